"""Standard-normal primitives with fixed rational approximations.

Both the distribution function and its inverse are evaluated through
explicit rational minimax approximations (Cody's erf/erfc and Wichura's
PPND16) rather than through whatever libm or scipy ship with, so sampled
paths and reported option deltas are bit-stable across platforms and
library upgrades.  Absolute accuracy is at the 1e-15 level for the CDF
and 1e-15 relative for the quantile function; the test suite pins both
against scipy.special.

All functions accept scalars or numpy arrays and are pure.
"""

from __future__ import annotations

import numpy as np

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_INV_SQRT_PI = 1.0 / np.sqrt(np.pi)

# Cody's coefficients for erf on |x| <= 0.46875 ...
_ERF_A = (3.16112374387056560e00, 1.13864154151050156e02,
          3.77485237685302021e02, 3.20937758913846947e03,
          1.85777706184603153e-1)
_ERF_B = (2.36012909523441209e01, 2.44024637934444173e02,
          1.28261652607737228e03, 2.84423683343917062e03)
# ... erfc on 0.46875 < x <= 4 ...
_ERF_C = (5.64188496988670089e-1, 8.88314979438837594e00,
          6.61191906371416295e01, 2.98635138197400131e02,
          8.81952221241769090e02, 1.71204761263407058e03,
          2.05107837782607147e03, 1.23033935479799725e03,
          2.15311535474403846e-8)
_ERF_D = (1.57449261107098347e01, 1.17693950891312499e02,
          5.37181101862009858e02, 1.62138957456669019e03,
          3.29079923573345963e03, 4.36261909014324716e03,
          3.43936767414372164e03, 1.23033935480374942e03)
# ... and erfc*x*exp(x^2) for x > 4.
_ERF_P = (3.05326634961232344e-1, 3.60344899949804439e-1,
          1.25781726111229246e-1, 1.60837851487422766e-2,
          6.58749161529837803e-4, 1.63153871373020978e-2)
_ERF_Q = (2.56852019228982242e00, 1.87295284992346047e00,
          5.27905102951428412e-1, 6.05183413124413191e-2,
          2.33520497626869185e-3)


def _erf_small(y: np.ndarray) -> np.ndarray:
    z = y * y
    num = _ERF_A[4] * z
    den = z
    for i in range(3):
        num = (num + _ERF_A[i]) * z
        den = (den + _ERF_B[i]) * z
    return y * (num + _ERF_A[3]) / (den + _ERF_B[3])


def _erfc_mid(y: np.ndarray) -> np.ndarray:
    num = _ERF_C[8] * y
    den = y
    for i in range(7):
        num = (num + _ERF_C[i]) * y
        den = (den + _ERF_D[i]) * y
    r = (num + _ERF_C[7]) / (den + _ERF_D[7])
    # split exp(-y^2) to preserve accuracy, as in Cody's CALERF
    ysq = np.floor(y * 16.0) / 16.0
    dely = (y - ysq) * (y + ysq)
    return np.exp(-ysq * ysq) * np.exp(-dely) * r


def _erfc_large(y: np.ndarray) -> np.ndarray:
    z = 1.0 / (y * y)
    num = _ERF_P[5] * z
    den = z
    for i in range(4):
        num = (num + _ERF_P[i]) * z
        den = (den + _ERF_Q[i]) * z
    r = z * (num + _ERF_P[4]) / (den + _ERF_Q[4])
    r = (_INV_SQRT_PI - r) / y
    ysq = np.floor(y * 16.0) / 16.0
    dely = (y - ysq) * (y + ysq)
    with np.errstate(under="ignore"):
        return np.exp(-ysq * ysq) * np.exp(-dely) * r


def erfc(x):
    """Complementary error function (Cody's rational approximation)."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    y = np.abs(x)
    out = np.empty_like(y)
    m1 = y <= 0.46875
    m2 = (y > 0.46875) & (y <= 4.0)
    m3 = y > 4.0
    if m1.any():
        out[m1] = 1.0 - _erf_small(y[m1])
    if m2.any():
        out[m2] = _erfc_mid(y[m2])
    if m3.any():
        out[m3] = _erfc_large(y[m3])
    neg = x < 0.0
    out[neg] = 2.0 - out[neg]
    return float(out[0]) if scalar else out


def norm_cdf(x):
    """P(Z <= x) for standard normal Z."""
    x = np.asarray(x, dtype=float)
    return 0.5 * erfc(-x / _SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return float(out) if out.ndim == 0 else out


# Wichura's PPND16 coefficients (central, middle-tail, far-tail regions).
_PPND_A = (3.3871328727963666080e0, 1.3314166789178437745e2,
           1.9715909503065514427e3, 1.3731693765509461125e4,
           4.5921953931549871457e4, 6.7265770927008700853e4,
           3.3430575583588128105e4, 2.5090809287301226727e3)
_PPND_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
           5.3941960214247511077e3, 2.1213794301586595867e4,
           3.9307895800092710610e4, 2.8729085735721942674e4,
           5.2264952788528545610e3)
_PPND_C = (1.42343711074968357734e0, 4.63033784615654529590e0,
           5.76949722146069140550e0, 3.64784832476320460504e0,
           1.27045825245236838258e0, 2.41780725177450611770e-1,
           2.27238449892691845833e-2, 7.74545014278341407640e-4)
_PPND_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
           6.89767334985100004550e-1, 1.48103976427480074590e-1,
           1.51986665636164571966e-2, 5.47593808499534494600e-4,
           1.05075007164441684324e-9)
_PPND_E = (6.65790464350110377720e0, 5.46378491116411436990e0,
           1.78482653991729133580e0, 2.96560571828504891230e-1,
           2.65321895265761230930e-2, 1.24266094738807843860e-3,
           2.71155556874348757815e-5, 2.01033439929228813265e-7)
_PPND_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
           1.48753612908506148525e-2, 7.86869131145613259100e-4,
           1.84631831751005468180e-5, 1.42151175831644588870e-7,
           2.04426310338993978564e-15)


def _horner(coef, r):
    out = np.full_like(r, coef[-1])
    for c in coef[-2::-1]:
        out = out * r + c
    return out


def norm_ppf(p):
    """Quantile function of the standard normal (Wichura's AS 241).

    Arguments must lie strictly inside (0, 1); endpoints raise rather
    than returning infinities, because a sampler feeding the result into
    a path simulation never wants silent infs.
    """
    p = np.asarray(p, dtype=float)
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("norm_ppf argument must lie strictly in (0, 1)")
    q = p - 0.5
    out = np.empty_like(p)
    central = np.abs(q) <= 0.425
    if central.any():
        r = 0.180625 - q[central] * q[central]
        out[central] = q[central] * _horner(_PPND_A, r) / _horner(_PPND_B, r)
    tail = ~central
    if tail.any():
        pt = np.where(q[tail] < 0.0, p[tail], 1.0 - p[tail])
        r = np.sqrt(-np.log(pt))
        mid = r <= 5.0
        rr = np.where(mid, r - 1.6, r - 5.0)
        val = np.where(mid,
                       _horner(_PPND_C, rr) / _horner(_PPND_D, rr),
                       _horner(_PPND_E, rr) / _horner(_PPND_F, rr))
        out[tail] = np.where(q[tail] < 0.0, -val, val)
    return float(out[0]) if scalar else out
