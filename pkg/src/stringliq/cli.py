"""Command-line orchestration.

Subcommands wrap one module operation each; `pipeline` chains them.
Options resolve in the order command line > config file > built-in
default, where the config file is INI-style with one section per
command (plus [common]); every run echoes its fully resolved settings
into the output directory for reproducibility.

All randomness flows from one top-level --seed: each stage derives its
own stream as the first 8 bytes of SHA-256("<seed>:<stage>"), so stages
are decoupled (inserting paths in one stage does not shift another) yet
the whole pipeline is a pure function of the seed.

Exit codes: 0 success, 2 usage or configuration, 3 malformed data,
4 numerical failure.  STRINGLIQ_OUT sets the default output directory.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import arbitrage, demand_model, lob, mpr, pricing, reporting, simulator
from .demand_model import CalibrationConfig, ModelState, calibrate, check_feasibility
from .errors import (ConfigurationError, DataError, NumericalError, StringliqError)
from .simulator import Measure, SimConfig

OUT_ENV = "STRINGLIQ_OUT"


def stage_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


class Settings:
    """Merged view of CLI flags, config file and defaults for one command."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.resolved: dict[str, object] = {}
        self._file = configparser.ConfigParser()
        cfg = getattr(args, "config", None)
        if cfg:
            if not Path(cfg).exists():
                raise DataError(f"config file {cfg} does not exist")
            self._file.read(cfg)
        self._args = args

    def get(self, name: str, default, cast=None):
        flag = getattr(self._args, name.replace("-", "_"), None)
        if flag is not None:
            value = flag
        else:
            value = None
            for section in (self.command, "common"):
                if self._file.has_option(section, name):
                    raw = self._file.get(section, name)
                    value = (cast or type(default))(raw) if default is not None else raw
                    break
            if value is None:
                value = default
        self.resolved[name] = value
        return value

    def echo(self, out_dir: Path) -> Path:
        cp = configparser.ConfigParser()
        cp[self.command] = {k: str(v) for k, v in self.resolved.items()}
        path = out_dir / f"resolved_{self.command}.ini"
        with open(path, "w") as fh:
            cp.write(fh)
        return path


def _out_dir(settings: Settings) -> Path:
    out = Path(settings.get("out-dir", os.environ.get(OUT_ENV, "."), str))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def cmd_synth(args) -> int:
    st = Settings("synth", args)
    out = _out_dir(st)
    seed = st.get("seed", 42, int)
    cfg = lob.SynthConfig(
        n_events=st.get("events", 50_000, int),
        price_cap=st.get("price-cap", 350.96, float),
        near_sd=st.get("near-sd", 0.015, float),
        cancel_rate=st.get("cancel-rate", 0.05, float),
        modify_rate=st.get("modify-rate", 0.08, float),
        lifetime_events=st.get("lifetime-events", 3000.0, float),
        qty_mean=st.get("qty-mean", 25.0, float),
        seed_qty=st.get("seed-qty", 80_000.0, float),
        seed_bins=st.get("seed-bins", 100, int),
        session_ms=st.get("session-ms", 23_400_000, int),
    )
    events = lob.synthesize_events(cfg, stage_seed(seed, "synth"))
    target = out / st.get("events-file", "events.csv", str)
    lob.write_events(target, events)
    st.echo(out)
    print(f"wrote {len(events)} events to {target}")
    return 0


def _surface_grids(st: Settings):
    n_p = st.get("price-steps", 100, int)
    n_t = st.get("time-steps", 78, int)
    lo = st.get("price-lo", 0.0, float)
    hi = st.get("price-hi", 350.96, float)
    session = st.get("session-ms", 23_400_000, int)
    prices = np.linspace(lo, hi, n_p + 1)
    times_ms = np.linspace(0, session, n_t + 1)
    return prices, times_ms


def cmd_ingest(args) -> int:
    st = Settings("ingest", args)
    out = _out_dir(st)
    events_file = st.get("events-file", "events.csv", str)
    events = lob.parse_events(events_file)
    prices, times_ms = _surface_grids(st)
    horizon = st.get("horizon", 1.0, float)
    surface, report = lob.build_surface(events, prices, times_ms)
    times = np.linspace(0.0, horizon, times_ms.size)
    surface = lob.DemandSurface(surface.prices, times, surface.Q, surface.q)
    surface.validate()
    target = out / st.get("surface-file", "surface.csv", str)
    surface.to_csv(target)
    with open(out / "ingest_report.txt", "w") as fh:
        fh.write("\n".join(report.lines()) + "\n")
    if _bool(st.get("figures", True, _bool)):
        reporting.plot_surface(surface, out / "surface.png")
    st.echo(out)
    print(f"wrote surface ({surface.Q.shape[0]}x{surface.Q.shape[1]}) to {target}")
    return 0


def cmd_calibrate(args) -> int:
    st = Settings("calibrate", args)
    out = _out_dir(st)
    surface_files = st.get("surface-file", "surface.csv", str).split(",")
    surfaces = [lob.DemandSurface.from_csv(f.strip()) for f in surface_files]
    cfg = CalibrationConfig(
        horizon=st.get("horizon", 1.0, float),
        range_multiple=st.get("range-multiple", 8.0, float),
        position_fraction=st.get("position-fraction", 0.25, float),
    )
    params, report = calibrate(surfaces, cfg)
    target = out / st.get("params-file", "params.txt", str)
    demand_model.save_params(target, params, report)
    with open(out / "calibration_report.txt", "w") as fh:
        fh.write("\n".join(report.lines()) + "\n")
    st.echo(out)
    print(f"wrote calibrated parameters to {target}")
    if report.feasibility is not None and not report.feasibility.feasible:
        print("warning: calibrated parameters fail feasibility checks")
    return 0


def cmd_check_feasibility(args) -> int:
    st = Settings("check-feasibility", args)
    out = _out_dir(st)
    params = demand_model.load_params(st.get("params-file", "params.txt", str))
    report = check_feasibility(params)
    text = "\n".join(report.lines()) + "\n"
    with open(out / "feasibility.txt", "w") as fh:
        fh.write(text)
    st.echo(out)
    print(text, end="")
    if _bool(st.get("strict", False, _bool)) and not report.feasible:
        raise NumericalError("feasibility checks failed")
    return 0


def cmd_solve_mpr(args) -> int:
    st = Settings("solve-mpr", args)
    out = _out_dir(st)
    params = demand_model.load_params(st.get("params-file", "params.txt", str))
    state = ModelState.initial(params)
    Q, _ = demand_model.surface_from_state(state, params)
    mu_Q, sigtilde = demand_model.drift_diffusion(state, params)
    A = mpr.compute_A(Q, mu_Q, sigtilde, params.dp, params.grid.ds)
    inputs = mpr.MprInputs(A=A, h1=params.f1.deriv(state.xq),
                           sigbar_q=params.sigbar_q, sigtilde_low=sigtilde[1],
                           ds=params.grid.ds, dp=params.dp)
    lam = mpr.solve_mpr_step(inputs, eta_floor=st.get("eta-floor", 1e-8, float))
    res = mpr.mpr_residual(lam, sigtilde[1:], A[1:], params.grid.ds)
    target = out / st.get("lambda-file", "lambda.csv", str)
    mpr.write_lambda_csv(target, lam[None, :], {
        "max_abs": float(np.max(np.abs(res))),
        "scale": float(1.0 + np.max(np.abs(A[1:]))),
    })
    st.echo(out)
    print(f"wrote initial-state risk prices to {target} "
          f"(max residual {float(np.max(np.abs(res))):.3e})")
    return 0


def cmd_simulate(args) -> int:
    st = Settings("simulate", args)
    out = _out_dir(st)
    params = demand_model.load_params(st.get("params-file", "params.txt", str))
    measure = Measure(st.get("measure", "risk-neutral", str))
    seed = st.get("seed", 42, int)
    cfg = SimConfig(
        n_paths=st.get("paths", 1000, int),
        seed=stage_seed(seed, "simulate"),
        measure=measure,
        chunk_size=st.get("chunk-size", 256, int),
        threads=st.get("threads", os.cpu_count() or 1, int),
        compute_residuals=_bool(st.get("residuals", False, _bool)),
        strict_bounds=_bool(st.get("strict", False, _bool)),
    )
    result = simulator.run(params, cfg)
    target = out / st.get("paths-file", "paths.csv", str)
    simulator.write_paths_csv(target, result)
    with open(out / "run_report.txt", "w") as fh:
        fh.write(result.report.to_text())
    if _bool(st.get("figures", True, _bool)):
        reporting.plot_price_paths(result.price_matrix(),
                                   params.grid.time_nodes(), out / "paths.png")
    st.echo(out)
    print(f"simulated {cfg.n_paths} {measure.value} paths to {target}")
    if result.report.clearing_failures:
        print(f"warning: {result.report.clearing_failures} clearing failures")
    return 0


def _load_terminal(st: Settings):
    paths_file = st.get("paths-file", "paths.csv", str)
    return simulator.read_terminal_prices(paths_file)


def _strike_vector(st: Settings, pi_0: float) -> np.ndarray:
    text = st.get("strikes", "", str)
    if text:
        return pricing.parse_strikes(text)
    rel = np.arange(0.97, 1.0301, 0.005)
    return np.round(pi_0 * rel, 4)


def cmd_price(args) -> int:
    st = Settings("price", args)
    out = _out_dir(st)
    pi_T, pi_0 = _load_terminal(st)
    rate = st.get("rate", 0.002537, float)
    expiry = st.get("maturity", 30.0 / 365.0, float)
    strikes = _strike_vector(st, pi_0)
    rows = []
    for kind in (pricing.OptionKind.CALL, pricing.OptionKind.PUT):
        specs = [pricing.OptionSpec(float(k), expiry, rate, kind) for k in strikes]
        for spec, mc in zip(specs, pricing.mc_prices(pi_T, specs)):
            rows.append((kind.value, spec.strike, mc.price, mc.stderr))
    target = out / st.get("prices-file", "prices.csv", str)
    with open(target, "w", newline="") as fh:
        import csv
        w = csv.writer(fh)
        w.writerow(["kind", "strike", "mc_price", "mc_stderr"])
        for kind, k, price, err in rows:
            w.writerow([kind, repr(float(k)), repr(float(price)), repr(float(err))])
    st.echo(out)
    print(f"wrote {len(rows)} option prices to {target}")
    return 0


def cmd_smile(args) -> int:
    st = Settings("smile", args)
    out = _out_dir(st)
    pi_T, pi_0 = _load_terminal(st)
    rate = st.get("rate", 0.002537, float)
    expiry = st.get("maturity", 30.0 / 365.0, float)
    strikes = _strike_vector(st, pi_0)
    points, failures = pricing.smile_report(pi_T, pi_0, strikes, rate, expiry)
    target = out / st.get("smile-file", "smile.csv", str)
    pricing.write_smile_csv(target, points, failures)
    if _bool(st.get("figures", True, _bool)):
        reporting.plot_smile(points, out / "smile.png")
    st.echo(out)
    print(f"wrote {len(points)} smile rows to {target} "
          f"({len(failures)} inversion failures)")
    return 0


def cmd_demo_arbitrage(args) -> int:
    st = Settings("demo-arbitrage", args)
    out = _out_dir(st)
    cfg = arbitrage.DemoConfig(
        n_paths=st.get("paths", 1000, int),
        n_steps=st.get("time-steps", 78, int),
        horizon=st.get("horizon", 1.0, float),
        seed=stage_seed(st.get("seed", 42, int), "demo-arbitrage"),
    )
    report = arbitrage.run_demo(config=cfg)
    arbitrage.write_demo_csv(out / "wealth_margins.csv", report)
    with open(out / "arbitrage_report.txt", "w") as fh:
        fh.write(report.to_text())
    if _bool(st.get("figures", True, _bool)):
        reporting.plot_wealth_margins(report, out / "wealth_margins.png")
    st.echo(out)
    print(report.to_text(), end="")
    return 0 if report.verdict == "arbitrage realized on all paths" else 4


def _format_book(book: lob.BookState) -> str:
    lines = ["  buy book:"]
    for price in sorted(book.depth(lob.Side.BUY), reverse=True):
        lines.append(f"    {price:>10.4f}  {book.depth(lob.Side.BUY)[price]}")
    lines.append("  sell book:")
    for price in sorted(book.depth(lob.Side.SELL)):
        lines.append(f"    {price:>10.4f}  {book.depth(lob.Side.SELL)[price]}")
    return "\n".join(lines)


def cmd_match_replay(args) -> int:
    st = Settings("match-replay", args)
    events = lob.parse_events(st.get("events-file", "events.csv", str))
    book = lob.BookState()
    for event in events:
        book, trades, clearing = lob.apply_event(book, event)
        print(f"event ref={event.ref_id} {event.side.name} {event.action.name} "
              f"{event.quantity} @ {event.price}")
        for price, qty in trades:
            print(f"  trade {qty} @ {price}")
        if clearing is not None:
            print(f"  clearing price: {clearing}")
        print(_format_book(book))
    return 0


def cmd_pipeline(args) -> int:
    st = Settings("pipeline", args)
    out = _out_dir(st)
    seed = st.get("seed", 42, int)

    synth_cfg = lob.SynthConfig(
        n_events=st.get("events", 50_000, int),
        price_cap=st.get("price-hi", 350.96, float),
        near_sd=st.get("near-sd", 0.015, float),
        qty_mean=st.get("qty-mean", 25.0, float),
        seed_qty=st.get("seed-qty", 80_000.0, float),
        seed_bins=st.get("seed-bins", 100, int),
        session_ms=st.get("session-ms", 23_400_000, int))
    events = lob.synthesize_events(synth_cfg, stage_seed(seed, "synth"))
    lob.write_events(out / "events.csv", events)

    n_p = st.get("price-steps", 100, int)
    n_t = st.get("time-steps", 78, int)
    horizon = st.get("horizon", 1.0, float)
    prices = np.linspace(0.0, synth_cfg.price_cap, n_p + 1)
    times_ms = np.linspace(0, synth_cfg.session_ms, n_t + 1)
    surface, ingest_report = lob.build_surface(events, prices, times_ms)
    surface = lob.DemandSurface(surface.prices,
                                np.linspace(0.0, horizon, n_t + 1),
                                surface.Q, surface.q)
    surface.validate()
    surface.to_csv(out / "surface.csv")
    with open(out / "ingest_report.txt", "w") as fh:
        fh.write("\n".join(ingest_report.lines()) + "\n")

    params, cal_report = calibrate(surface, CalibrationConfig(horizon=horizon))
    demand_model.save_params(out / "params.txt", params, cal_report)
    with open(out / "calibration_report.txt", "w") as fh:
        fh.write("\n".join(cal_report.lines()) + "\n")

    feas = check_feasibility(params)
    with open(out / "feasibility.txt", "w") as fh:
        fh.write("\n".join(feas.lines()) + "\n")

    sim_cfg = SimConfig(
        n_paths=st.get("paths", 1000, int),
        seed=stage_seed(seed, "simulate"),
        measure=Measure(st.get("measure", "risk-neutral", str)),
        chunk_size=st.get("chunk-size", 256, int),
        threads=st.get("threads", os.cpu_count() or 1, int),
        strict_bounds=_bool(st.get("strict", False, _bool)))
    result = simulator.run(params, sim_cfg)
    simulator.write_paths_csv(out / "paths.csv", result)
    with open(out / "run_report.txt", "w") as fh:
        fh.write(result.report.to_text())

    pi_T = result.terminal_prices()
    pi_0 = float(result.paths[0].pi[0])
    rate = st.get("rate", 0.002537, float)
    expiry = st.get("maturity", 30.0 / 365.0, float)
    strikes = _strike_vector(st, pi_0)
    points, failures = pricing.smile_report(pi_T, pi_0, strikes, rate, expiry)
    pricing.write_smile_csv(out / "smile.csv", points, failures)

    if _bool(st.get("figures", True, _bool)):
        reporting.plot_surface(surface, out / "surface.png")
        reporting.plot_price_paths(result.price_matrix(),
                                   params.grid.time_nodes(), out / "paths.png")
        reporting.plot_smile(points, out / "smile.png")
    st.echo(out)
    print(f"pipeline complete in {out}: {len(events)} events, "
          f"{sim_cfg.n_paths} paths, {len(points)} smile rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stringliq",
        description="order-book liquidity model: ingest, calibrate, simulate, price")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, options):
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI settings file")
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or .)")
        for opt, kwargs in options.items():
            p.add_argument(f"--{opt}", **kwargs)
        p.set_defaults(fn=fn)
        return p

    common_int = {"type": int}
    common_float = {"type": float}
    add("synth", cmd_synth, {
        "seed": common_int, "events": common_int, "price-cap": common_float,
        "near-sd": common_float, "cancel-rate": common_float,
        "modify-rate": common_float, "lifetime-events": common_float,
        "qty-mean": common_float, "seed-qty": common_float,
        "seed-bins": common_int, "session-ms": common_int,
        "events-file": {}})
    add("ingest", cmd_ingest, {
        "events-file": {}, "surface-file": {}, "price-steps": common_int,
        "time-steps": common_int, "price-lo": common_float,
        "price-hi": common_float, "session-ms": common_int,
        "horizon": common_float, "figures": {}})
    add("calibrate", cmd_calibrate, {
        "surface-file": {}, "params-file": {}, "horizon": common_float,
        "range-multiple": common_float, "position-fraction": common_float})
    add("check-feasibility", cmd_check_feasibility, {
        "params-file": {}, "strict": {}})
    add("solve-mpr", cmd_solve_mpr, {
        "params-file": {}, "lambda-file": {}, "eta-floor": common_float})
    add("simulate", cmd_simulate, {
        "params-file": {}, "paths-file": {}, "paths": common_int,
        "seed": common_int, "measure": {}, "chunk-size": common_int,
        "threads": common_int, "residuals": {}, "strict": {}, "figures": {}})
    add("price", cmd_price, {
        "paths-file": {}, "prices-file": {}, "strikes": {},
        "rate": common_float, "maturity": common_float})
    add("smile", cmd_smile, {
        "paths-file": {}, "smile-file": {}, "strikes": {},
        "rate": common_float, "maturity": common_float, "figures": {}})
    add("demo-arbitrage", cmd_demo_arbitrage, {
        "paths": common_int, "time-steps": common_int,
        "horizon": common_float, "seed": common_int, "figures": {}})
    add("match-replay", cmd_match_replay, {"events-file": {}})
    add("pipeline", cmd_pipeline, {
        "seed": common_int, "events": common_int, "paths": common_int,
        "price-steps": common_int, "time-steps": common_int,
        "price-hi": common_float, "near-sd": common_float,
        "qty-mean": common_float, "seed-qty": common_float,
        "seed-bins": common_int, "session-ms": common_int,
        "horizon": common_float, "measure": {}, "rate": common_float,
        "maturity": common_float, "strikes": {}, "chunk-size": common_int,
        "threads": common_int, "strict": {}, "figures": {}})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except StringliqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
