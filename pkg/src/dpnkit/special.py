"""Digamma, trigamma and log-gamma for positive real arguments.

All three functions are vectorised over numpy arrays and accept Python
scalars (returning a float).  The approach is the classical one: shift
the argument upward with the recurrence until the asymptotic (Stirling /
de Moivre) series converges to double precision, then undo the shift.
Log-gamma additionally uses a Taylor series around 1 and 2 so that the
result keeps full *relative* accuracy next to its two zeros.
"""

import numpy as np

__all__ = ["digamma", "trigamma", "log_gamma", "log_beta", "DomainError"]

EULER_GAMMA = 0.57721566490153286061
HALF_LOG_2PI = 0.91893853320467274178

_SHIFT_TO = 10.0

# Bernoulli numbers B_2 .. B_20
_B2K = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
    -174611.0 / 330.0,
)

# zeta(k) - 1 for k = 2, 3, ...
_ZETA_M1 = (
    0.64493406684822643647,
    0.2020569031595942854,
    0.082323233711138191516,
    0.036927755143369926331,
    0.017343061984449139715,
    0.0083492773819228268398,
    0.0040773561979443393787,
    0.0020083928260822144179,
    0.00099457512781808533715,
    0.0004941886041194645587,
    0.00024608655330804829864,
    0.00012271334757848914675,
    0.000061248135058704829259,
    0.000030588236307020493552,
    0.000015282259408651871733,
    7.6371976378997622736e-6,
    3.8172932649998398565e-6,
    1.9082127165539389257e-6,
    9.5396203387279611315e-7,
    4.7693298678780646312e-7,
    2.3845050272773299e-7,
    1.1921992596531107307e-7,
    5.9608189051259479612e-8,
    2.9803503514652280186e-8,
)

# half-width of the Taylor windows around x = 1 and x = 2
_TAYLOR_RADIUS = 0.25


class DomainError(ValueError):
    """Raised when a special function is evaluated at a non-positive point."""


def _prepare(x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(arr > 0):
        bad = arr[~(arr > 0)].ravel()[0]
        raise DomainError(f"argument must be > 0, got {bad!r}")
    return arr


def _finish(x, out):
    if np.ndim(x) == 0:
        return float(out)
    return out


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    arr = _prepare(x)
    z = arr.copy()
    acc = np.zeros_like(z)
    for _ in range(int(_SHIFT_TO)):
        small = z < _SHIFT_TO
        if not small.any():
            break
        acc = np.where(small, acc - 1.0 / z, acc)
        z = np.where(small, z + 1.0, z)
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    # sum_{k} B_2k / (2k z^2k), Horner from the highest retained term
    for k in range(len(_B2K), 0, -1):
        series = (series + _B2K[k - 1] / (2 * k)) * inv2
    out = acc + np.log(z) - 0.5 / z - series
    return _finish(x, out)


def trigamma(x):
    """psi'(x) for x > 0; the derivative used when back-propagating digamma."""
    arr = _prepare(x)
    z = arr.copy()
    acc = np.zeros_like(z)
    for _ in range(int(_SHIFT_TO)):
        small = z < _SHIFT_TO
        if not small.any():
            break
        acc = np.where(small, acc + 1.0 / (z * z), acc)
        z = np.where(small, z + 1.0, z)
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    for k in range(len(_B2K), 0, -1):
        series = (series + _B2K[k - 1]) * inv2
    out = acc + inv + 0.5 * inv2 + series * inv
    return _finish(x, out)


def _lgamma_taylor2(z):
    """ln Gamma(2 + z) for |z| <= 0.25."""
    series = np.zeros_like(z)
    for k in range(len(_ZETA_M1) + 1, 1, -1):
        sign = 1.0 if k % 2 == 0 else -1.0
        series = series * z + sign * _ZETA_M1[k - 2] / k
    return z * (1.0 - EULER_GAMMA) + series * z * z


def _lgamma_stirling(z):
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    for k in range(len(_B2K), 0, -1):
        series = series * inv2 + _B2K[k - 1] / (2 * k * (2 * k - 1))
    return (z - 0.5) * np.log(z) - z + HALF_LOG_2PI + series * inv


def log_gamma(x):
    """ln Gamma(x) for x > 0, accurate to about 1e-15 relative."""
    arr = _prepare(x)
    out = np.empty_like(arr)

    near1 = np.abs(arr - 1.0) <= _TAYLOR_RADIUS
    near2 = np.abs(arr - 2.0) <= _TAYLOR_RADIUS
    if near1.any():
        z = arr[near1] - 1.0
        out[near1] = _lgamma_taylor2(z) - np.log1p(z)
    if near2.any():
        out[near2] = _lgamma_taylor2(arr[near2] - 2.0)

    rest = ~(near1 | near2)
    if rest.any():
        z = arr[rest].copy()
        prod = np.ones_like(z)
        for _ in range(int(_SHIFT_TO)):
            small = z < _SHIFT_TO
            if not small.any():
                break
            prod = np.where(small, prod * z, prod)
            z = np.where(small, z + 1.0, z)
        out[rest] = _lgamma_stirling(z) - np.log(prod)
    return _finish(x, out)


def log_beta(alpha, axis=-1):
    """ln B(alpha) = sum ln Gamma(alpha_k) - ln Gamma(sum alpha_k)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return np.sum(log_gamma(alpha), axis=axis) - log_gamma(np.sum(alpha, axis=axis))

