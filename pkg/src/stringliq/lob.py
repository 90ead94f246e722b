"""Limit-order events, price-time-priority matching and net-demand surfaces.

The matching rules are the usual continuous double auction: an incoming
limit order is matched against the best price on the opposite side while
it crosses, the transaction price is the resting order's limit price,
ties at a price level are broken first-in-first-out, and any unmatched
remainder rests in the book at its own limit.

The net-demand surface estimate counts, at each grid time, the resting
(unmatched, uncancelled) book: buy quantity at limit prices >= p_i minus
sell quantity at limit prices <= p_i, and the density is the scaled
first difference of that curve in price.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, EventParseError

EVENT_HEADER = ["ref_id", "timestamp_ms", "price", "quantity", "side", "action"]
SURFACE_HEADER = ["t_index", "p_index", "t", "p", "Q", "q"]


class Side(str, Enum):
    BUY = "B"
    SELL = "S"


class Action(str, Enum):
    ADD = "A"
    MODIFY = "M"
    DELETE = "D"


@dataclass(frozen=True)
class OrderEvent:
    ref_id: int
    timestamp_ms: int
    price: float
    quantity: int
    side: Side
    action: Action


class BookState:
    """One side-keyed book of FIFO price levels plus a ref-id index."""

    def __init__(self):
        self.bids: dict[float, deque] = {}
        self.asks: dict[float, deque] = {}
        self.last_clearing_price: float | None = None
        self._index: dict[int, tuple[Side, float]] = {}

    def _levels(self, side: Side) -> dict[float, deque]:
        return self.bids if side == Side.BUY else self.asks

    def best_bid(self) -> float | None:
        return max(self.bids) if self.bids else None

    def best_ask(self) -> float | None:
        return min(self.asks) if self.asks else None

    def is_crossed(self) -> bool:
        bb, ba = self.best_bid(), self.best_ask()
        return bb is not None and ba is not None and bb >= ba

    def contains(self, ref_id: int) -> bool:
        return ref_id in self._index

    def depth(self, side: Side) -> dict[float, int]:
        """Total resting quantity per price level."""
        return {p: sum(q for _, q in lvl) for p, lvl in self._levels(side).items() if lvl}

    def total_quantity(self, side: Side) -> int:
        return sum(sum(q for _, q in lvl) for lvl in self._levels(side).values())

    def _rest(self, order_ref: int, side: Side, price: float, quantity: int) -> None:
        self._levels(side).setdefault(price, deque()).append([order_ref, quantity])
        self._index[order_ref] = (side, price)

    def _remove(self, ref_id: int) -> tuple[Side, float, int] | None:
        loc = self._index.pop(ref_id, None)
        if loc is None:
            return None
        side, price = loc
        lvl = self._levels(side)[price]
        for i, (rid, qty) in enumerate(lvl):
            if rid == ref_id:
                del lvl[i]
                if not lvl:
                    del self._levels(side)[price]
                return side, price, qty
        return None

    def resting_orders(self) -> list[tuple[int, Side, float, int]]:
        out = []
        for side in (Side.BUY, Side.SELL):
            for price, lvl in self._levels(side).items():
                for rid, qty in lvl:
                    out.append((rid, side, price, qty))
        return out


def match_order(book: BookState, incoming: OrderEvent):
    """Match an Add against the book.

    Returns (book, trades, clearing_price) where trades is a list of
    (price, quantity) fills at resting-order limit prices and
    clearing_price is the last trade's price, or None if nothing traded.
    The book is updated in place and returned for convenience.
    """
    if incoming.action != Action.ADD:
        raise ConfigurationError("match_order only processes Add events")
    remaining = incoming.quantity
    trades: list[tuple[float, int]] = []

    if incoming.side == Side.BUY:
        opposite, better = book.asks, min
        crosses = lambda lvl_price: lvl_price <= incoming.price
    else:
        opposite, better = book.bids, max
        crosses = lambda lvl_price: lvl_price >= incoming.price

    while remaining > 0 and opposite:
        best = better(opposite)
        if not crosses(best):
            break
        queue = opposite[best]
        while queue and remaining > 0:
            entry = queue[0]
            fill = min(remaining, entry[1])
            trades.append((best, fill))
            remaining -= fill
            entry[1] -= fill
            if entry[1] == 0:
                queue.popleft()
                book._index.pop(entry[0], None)
        if not queue:
            del opposite[best]

    if remaining > 0:
        book._rest(incoming.ref_id, incoming.side, incoming.price, remaining)
    if trades:
        book.last_clearing_price = trades[-1][0]
    return book, trades, (trades[-1][0] if trades else None)


def apply_event(book: BookState, event: OrderEvent):
    """Replay one event of any action type; returns (book, trades, clearing)."""
    if event.action == Action.ADD:
        return match_order(book, event)
    if event.action == Action.DELETE:
        book._remove(event.ref_id)
        return book, [], None
    # Modify: keep queue priority only for a pure size reduction at the
    # same price; any other change loses priority and may cross the book.
    loc = book._index.get(event.ref_id)
    if loc is None:
        return book, [], None
    side, price = loc
    if event.price == price and side == event.side:
        lvl = book._levels(side)[price]
        for entry in lvl:
            if entry[0] == event.ref_id:
                if 0 < event.quantity <= entry[1]:
                    entry[1] = event.quantity
                    return book, [], None
                break
    book._remove(event.ref_id)
    replacement = OrderEvent(event.ref_id, event.timestamp_ms, event.price,
                             event.quantity, event.side, Action.ADD)
    return match_order(book, replacement)


def _parse_row(row: list[str], seen: set[int]) -> OrderEvent:
    if len(row) != 6:
        raise ValueError(f"expected 6 fields, got {len(row)}")
    ref_id = int(row[0])
    timestamp_ms = int(row[1])
    price = float(row[2])
    quantity = int(row[3])
    try:
        side = Side(row[4].strip())
    except ValueError:
        raise ValueError(f"unknown side code {row[4]!r}")
    try:
        action = Action(row[5].strip())
    except ValueError:
        raise ValueError(f"unknown action code {row[5]!r}")
    if price < 0 or not np.isfinite(price):
        raise ValueError(f"bad price {price}")
    if quantity <= 0:
        raise ValueError(f"quantity must be positive, got {quantity}")
    if action == Action.ADD:
        if ref_id in seen:
            raise ValueError(f"duplicate Add for ref_id {ref_id}")
        seen.add(ref_id)
    elif ref_id not in seen:
        raise ValueError(f"{action.name} references unseen ref_id {ref_id}")
    return OrderEvent(ref_id, timestamp_ms, price, quantity, side, action)


def parse_events(source, errors: str = "raise"):
    """Parse the event CSV into a time-sorted list of OrderEvent.

    `source` may be a path, a text file object, or an iterable of lines.
    Malformed rows are collected; with errors="raise" (default) a single
    EventParseError listing every offending line is raised after the full
    scan, with errors="collect" the function returns (events, line_errors)
    and skips the bad rows.
    """
    if errors not in ("raise", "collect"):
        raise ConfigurationError(f"unknown errors mode {errors!r}")
    close = False
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        fh = open(source, "r", newline="")
        close = True
    elif isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        fh = source
    else:
        fh = io.StringIO("\n".join(source))
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("event stream is empty (header row required)")
        if [h.strip() for h in header] != EVENT_HEADER:
            raise DataError(f"bad event header {header!r}, expected {EVENT_HEADER}")
        events: list[OrderEvent] = []
        bad: list[tuple[int, str]] = []
        seen: set[int] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                events.append(_parse_row(row, seen))
            except ValueError as exc:
                bad.append((lineno, str(exc)))
    finally:
        if close:
            fh.close()
    events.sort(key=lambda e: e.timestamp_ms)  # stable, ties keep file order
    if errors == "raise":
        if bad:
            raise EventParseError(bad)
        return events
    return events, bad


def write_events(path, events) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_HEADER)
        for e in events:
            w.writerow([e.ref_id, e.timestamp_ms, repr(float(e.price)),
                        e.quantity, e.side.value, e.action.value])


@dataclass(frozen=True)
class DemandSurface:
    """Net demand Q and density q on a uniform price x time grid.

    Q has shape (n_prices, n_times); q holds the per-dollar density
    -(Q[i] - Q[i-1]) / dp with the first row copied from the second.
    """

    prices: np.ndarray
    times: np.ndarray
    Q: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        for name in ("prices", "times", "Q", "q"):
            a = np.ascontiguousarray(getattr(self, name), dtype=float)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if self.Q.shape != (self.prices.size, self.times.size):
            raise DimensionError(f"Q shape {self.Q.shape} does not match grids")
        if self.q.shape != self.Q.shape:
            raise DimensionError("q shape does not match Q")

    @property
    def dp(self) -> float:
        return float(self.prices[1] - self.prices[0])

    def validate(self, tol: float = 1e-9) -> None:
        """Check monotonicity of Q in price and non-negativity of q.

        The tolerance is relative to the magnitude of the surface.
        """
        steps = np.diff(self.prices)
        if steps.size and not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-9):
            raise ConfigurationError("price grid is not uniform")
        scale = tol * max(1.0, float(np.abs(self.Q).max(initial=0.0)))
        if np.any(np.diff(self.Q, axis=0) > scale):
            raise DataError("net demand increases in price somewhere on the grid")
        if np.any(self.q < -scale):
            raise DataError("net demand density is negative somewhere on the grid")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SURFACE_HEADER)
            for j, t in enumerate(self.times):
                for i, p in enumerate(self.prices):
                    w.writerow([j, i, repr(float(t)), repr(float(p)),
                                repr(float(self.Q[i, j])), repr(float(self.q[i, j]))])

    @classmethod
    def from_csv(cls, path) -> "DemandSurface":
        rows = []
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != SURFACE_HEADER:
                raise DataError(f"bad surface header {header!r}")
            for row in reader:
                rows.append((int(row[0]), int(row[1]), float(row[2]),
                             float(row[3]), float(row[4]), float(row[5])))
        if not rows:
            raise DataError("surface file has no data rows")
        n_t = max(r[0] for r in rows) + 1
        n_p = max(r[1] for r in rows) + 1
        if len(rows) != n_t * n_p:
            raise DataError("surface file is not a full grid")
        prices = np.empty(n_p)
        times = np.empty(n_t)
        Q = np.empty((n_p, n_t))
        q = np.empty((n_p, n_t))
        for j, i, t, p, Qv, qv in rows:
            times[j] = t
            prices[i] = p
            Q[i, j] = Qv
            q[i, j] = qv
        return cls(prices, times, Q, q)


@dataclass
class IngestReport:
    n_events: int = 0
    n_outside_window: int = 0
    n_clipped_prices: int = 0
    n_trades: int = 0
    bad_rows: list = field(default_factory=list)

    def lines(self) -> list[str]:
        return [
            f"events processed:      {self.n_events}",
            f"events outside window: {self.n_outside_window}",
            f"prices clipped:        {self.n_clipped_prices}",
            f"trades matched:        {self.n_trades}",
            f"malformed rows:        {len(self.bad_rows)}",
        ]


def _book_profiles(book: BookState, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative resting quantity curves on the node grid.

    Returns (QB, QS): QB[i] counts buys with limit >= nodes[i], QS[i]
    counts sells with limit <= nodes[i].
    """
    buy_hist = np.zeros(nodes.size)
    sell_hist = np.zeros(nodes.size)
    for price, lvl in book.bids.items():
        qty = sum(q for _, q in lvl)
        idx = int(np.searchsorted(nodes, price, side="right")) - 1
        buy_hist[max(idx, 0)] += qty
    for price, lvl in book.asks.items():
        qty = sum(q for _, q in lvl)
        idx = int(np.searchsorted(nodes, price, side="left"))
        sell_hist[min(idx, nodes.size - 1)] += qty
    QB = np.cumsum(buy_hist[::-1])[::-1]
    QS = np.cumsum(sell_hist)
    return QB, QS


def build_surface(events, price_grid, time_grid, report: IngestReport | None = None):
    """Replay events through the matching engine and estimate (Q, q).

    `price_grid` is the vector of price nodes (uniform), `time_grid` the
    snapshot times in the same unit as event timestamps (ms).  Events
    outside [time_grid[0], time_grid[-1]] are ignored and counted;
    event prices are clipped to the grid range with a counter.
    """
    nodes = np.asarray(price_grid, dtype=float)
    times = np.asarray(time_grid, dtype=float)
    if nodes.size < 2 or np.any(np.diff(nodes) <= 0):
        raise ConfigurationError("price grid must be increasing with >= 2 nodes")
    if times.size < 1 or np.any(np.diff(times) < 0):
        raise ConfigurationError("time grid must be non-decreasing")
    if report is None:
        report = IngestReport()

    book = BookState()
    dp = float(nodes[1] - nodes[0])
    Q = np.zeros((nodes.size, times.size))
    q = np.zeros_like(Q)
    ev = iter(sorted(events, key=lambda e: e.timestamp_ms))
    pending = next(ev, None)

    for j, t in enumerate(times):
        while pending is not None and pending.timestamp_ms <= t:
            e = pending
            if e.timestamp_ms < times[0]:
                report.n_outside_window += 1
            else:
                price = min(max(e.price, nodes[0]), nodes[-1])
                if price != e.price:
                    report.n_clipped_prices += 1
                    e = OrderEvent(e.ref_id, e.timestamp_ms, price,
                                   e.quantity, e.side, e.action)
                _, trades, _ = apply_event(book, e)
                report.n_trades += len(trades)
                report.n_events += 1
            pending = next(ev, None)
        QB, QS = _book_profiles(book, nodes)
        Q[:, j] = QB - QS
        q[1:, j] = -(Q[1:, j] - Q[:-1, j]) / dp
        q[0, j] = q[1, j] if nodes.size > 1 else 0.0

    report.n_outside_window += sum(1 for _ in ev) + (1 if pending is not None else 0)
    return DemandSurface(nodes, times, Q, q), report


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic event-stream generator settings.

    The stream opens with a standing book (a few large, never-cancelled
    quotes per price bin, so every bin carries density all session) and
    then churns limit orders around a slowly moving mid: each arrival
    rests for an exponential lifetime before a scheduled cancellation,
    which keeps the resting population stationary after the warmup
    block of arrivals stamped at the session open.  Quantities are in
    shares, prices in dollars on [0, cap].
    """

    n_events: int = 50_000
    price_cap: float = 350.96
    mid_start: float = 0.5                   # fraction of cap
    mid_vol: float = 0.001                   # session-end sd, fraction of cap
    near_fraction: float = 0.6               # arrivals near the mid
    near_sd: float = 0.015                   # fraction of cap
    cancel_rate: float = 0.05                # extra unscheduled cancellations
    modify_rate: float = 0.08
    lifetime_events: float = 3000.0          # mean resting lifetime, in arrivals
    warmup_fraction: float = 0.3             # arrivals stamped at the open
    qty_mean: float = 25.0
    seed_qty: float = 80_000.0               # standing-book shares per bin
    seed_bins: int = 100
    session_ms: int = 23_400_000             # 6.5 trading hours
    buy_bias: float = 0.5

    def __post_init__(self):
        if self.n_events < 0 or self.price_cap <= 0:
            raise ConfigurationError("event count and price cap must be positive")
        for name in ("near_fraction", "cancel_rate", "modify_rate", "buy_bias",
                     "warmup_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.mid_vol < 0 or self.near_sd < 0 or self.qty_mean <= 0:
            raise ConfigurationError("dispersion and size settings must be non-negative")
        if self.lifetime_events <= 0:
            raise ConfigurationError("order lifetime must be positive")


def synthesize_events(config: SynthConfig, seed: int) -> list[OrderEvent]:
    """Generate a reproducible synthetic event stream."""
    import heapq

    rng = np.random.Generator(np.random.Philox(key=np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(0x10B)], dtype=np.uint64)))
    cap = config.price_cap
    events: list[OrderEvent] = []
    ref = 0
    live: list[int] = []                     # churning (cancellable) orders
    live_price: dict[int, float] = {}
    live_side: dict[int, Side] = {}
    live_qty: dict[int, int] = {}
    expiries: list[tuple[float, int]] = []   # (due arrival index, ref_id)

    def emit(ts, price, qty, side, action, rid=None):
        nonlocal ref
        if rid is None:
            ref += 1
            rid = ref
        price = float(min(max(price, 0.0), cap))
        events.append(OrderEvent(rid, int(ts), round(price, 4), int(qty), side, action))
        return rid

    def drop(rid, ts):
        live.remove(rid)
        emit(ts, live_price.pop(rid), max(live_qty.pop(rid), 1),
             live_side.pop(rid), Action.DELETE, rid=rid)

    # standing book: large permanent quotes per bin, buys strictly below
    # the opening mid and sells strictly above, so the book starts uncrossed;
    # the smooth size profile keeps the base curve free of bin-scale kinks
    mid = config.mid_start * cap
    if config.n_events > 0 and config.seed_bins > 0:
        edges = np.linspace(0.0, cap, config.seed_bins + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        for c in centers:
            side = Side.BUY if c < mid else Side.SELL
            shape = 1.0 + 0.25 * np.cos(2.0 * np.pi * c / cap)
            qty = max(1, int(config.seed_qty * shape))
            emit(0, c, qty, side, Action.ADD)

    n_warm = int(config.warmup_fraction * config.n_events)
    ts_arrivals = np.concatenate([
        np.zeros(n_warm, dtype=np.int64),
        np.sort(rng.integers(1, config.session_ms,
                             size=config.n_events - n_warm))])
    mid_steps = rng.standard_normal(config.n_events) * config.mid_vol * cap
    mid_path = mid + np.cumsum(mid_steps) / np.sqrt(max(config.n_events, 1))

    for i in range(config.n_events):
        ts = int(ts_arrivals[i])
        while expiries and expiries[0][0] <= i:
            _, rid = heapq.heappop(expiries)
            if rid in live_price:
                drop(rid, ts)
        mid_i = float(np.clip(mid_path[i], 0.05 * cap, 0.95 * cap))
        u = rng.random()
        if u < config.cancel_rate and live:
            drop(live[int(rng.integers(0, len(live)))], ts)
            continue
        if u < config.cancel_rate + config.modify_rate and live:
            rid = live[int(rng.integers(0, len(live)))]
            new_qty = max(1, live_qty[rid] // 2)
            live_qty[rid] = new_qty
            emit(ts, live_price[rid], new_qty, live_side[rid], Action.MODIFY, rid=rid)
            continue
        side = Side.BUY if rng.random() < config.buy_bias else Side.SELL
        sgn = -1.0 if side == Side.BUY else 1.0
        if rng.random() < config.near_fraction:
            price = mid_i + sgn * abs(rng.standard_normal()) * config.near_sd * cap
        else:
            # far orders spread evenly across the whole side of the book
            price = rng.uniform(0.0, mid_i) if side == Side.BUY \
                else rng.uniform(mid_i, cap)
        qty = max(1, int(rng.exponential(config.qty_mean)))
        rid = emit(ts, price, qty, side, Action.ADD)
        live.append(rid)
        live_price[rid] = price
        live_side[rid] = side
        live_qty[rid] = qty
        heapq.heappush(expiries, (i + rng.exponential(config.lifetime_events), rid))

    return events
