"""Closed-form Dirichlet divergences and uncertainty measures.

Every function takes concentration parameters ``alpha`` with the class
axis last, so a single Dirichlet is shape ``(K,)`` and a batch is
``(N, K)``.  Scalars come back as floats, batches as arrays.

The ``mc_*`` functions are Monte-Carlo estimators of the same
quantities.  They share no code with the closed forms (the density
normaliser uses the standard library's lgamma) and serve as independent
oracles in the test-suite.
"""

import math
from dataclasses import dataclass

import numpy as np

from .special import digamma, log_gamma

__all__ = [
    "DirichletParams",
    "dirichlet_kl",
    "predictive_entropy",
    "expected_entropy",
    "mutual_information",
    "differential_entropy",
    "max_prob",
    "precision",
    "sample_log_dirichlet",
    "mc_kl",
    "mc_expected_entropy",
    "mc_differential_entropy",
    "MCEstimate",
]


@dataclass(frozen=True)
class DirichletParams:
    """A validated concentration vector (or batch of them)."""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        if alpha.ndim == 0 or alpha.shape[-1] < 2:
            raise ValueError("a Dirichlet needs at least two classes")
        if not np.all(np.isfinite(alpha)) or not np.all(alpha > 0):
            raise ValueError("concentration parameters must be finite and > 0")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def alpha0(self):
        a0 = self.alpha.sum(axis=-1)
        return float(a0) if a0.ndim == 0 else a0

    @property
    def num_classes(self):
        return self.alpha.shape[-1]

    @property
    def mean(self):
        return self.alpha / self.alpha.sum(axis=-1, keepdims=True)


def _alpha(a):
    if isinstance(a, DirichletParams):
        return a.alpha
    return DirichletParams(a).alpha


def _out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


def dirichlet_kl(a, b):
    """KL(Dir(a) || Dir(b)); non-negative, zero iff ``a == b``."""
    a = _alpha(a)
    b = _alpha(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"class dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    a0 = a.sum(axis=-1)
    b0 = b.sum(axis=-1)
    kl = (
        log_gamma(a0)
        - np.sum(log_gamma(a), axis=-1)
        - log_gamma(b0)
        + np.sum(log_gamma(b), axis=-1)
        + np.sum((a - b) * (digamma(a) - np.asarray(digamma(a0))[..., None]), axis=-1)
    )
    # rounding can leave tiny negative values for near-identical pairs
    return _out(np.maximum(kl, 0.0))


def predictive_entropy(alpha):
    """Entropy of the expected categorical, H[E[pi]]."""
    a = _alpha(alpha)
    p = a / a.sum(axis=-1, keepdims=True)
    return _out(-np.sum(p * np.log(p), axis=-1))


def expected_entropy(alpha):
    """E[H[pi]] under pi ~ Dir(alpha)."""
    a = _alpha(alpha)
    a0 = a.sum(axis=-1, keepdims=True)
    return _out(-np.sum((a / a0) * (digamma(a + 1.0) - digamma(a0 + 1.0)), axis=-1))


def mutual_information(alpha):
    """Knowledge uncertainty: predictive minus expected entropy."""
    a = _alpha(alpha)
    return _out(np.asarray(predictive_entropy(a)) - np.asarray(expected_entropy(a)))


def differential_entropy(alpha):
    a = _alpha(alpha)
    a0 = a.sum(axis=-1)
    h = (
        np.sum(log_gamma(a), axis=-1)
        - log_gamma(a0)
        - np.sum((a - 1.0) * (digamma(a) - np.asarray(digamma(a0))[..., None]), axis=-1)
    )
    return _out(h)


def max_prob(alpha):
    a = _alpha(alpha)
    return _out(np.max(a, axis=-1) / a.sum(axis=-1))


def precision(alpha):
    return _out(_alpha(alpha).sum(axis=-1))


# -- Monte-Carlo oracles ---------------------------------------------------


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float

    def agrees(self, value, n_se=3.0):
        return abs(value - self.mean) <= n_se * self.stderr


def sample_log_dirichlet(rng, alpha, n):
    """Draw ``n`` samples of log(pi), pi ~ Dir(alpha), as an (n, K) array.

    Gamma variates are generated in log space.  Shapes below one use the
    boost identity Gamma(a) = Gamma(a + 1) * U**(1/a), which keeps tiny
    components representable instead of underflowing to zero.
    """
    alpha = _alpha(alpha)
    if alpha.ndim != 1:
        raise ValueError("sample_log_dirichlet expects a single concentration vector")
    k = alpha.shape[0]
    boost = alpha < 1.0
    shape = np.where(boost, alpha + 1.0, alpha)
    log_g = np.log(rng.standard_gamma(shape, size=(n, k)))
    if boost.any():
        u = rng.random(size=(n, int(boost.sum())))
        # 1 - u lies in (0, 1], so the log is finite
        log_g[:, boost] += np.log1p(-u) / alpha[boost]
    shift = log_g.max(axis=1, keepdims=True)
    log_norm = shift + np.log(np.sum(np.exp(log_g - shift), axis=1, keepdims=True))
    return log_g - log_norm


def _log_density(log_pi, alpha):
    # stdlib lgamma keeps the oracle independent of the closed forms
    log_norm = math.lgamma(float(alpha.sum())) - sum(math.lgamma(float(v)) for v in alpha)
    return log_norm + log_pi @ (alpha - 1.0)


def _estimate(samples):
    samples = np.asarray(samples, dtype=np.float64)
    return MCEstimate(float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(samples.size)))


def mc_kl(rng, a, b, n=1_000_000, log_pi=None):
    """Monte-Carlo estimate of KL(Dir(a) || Dir(b)) = E_a[ln p_a - ln p_b].

    ``log_pi`` may carry pre-drawn samples from Dir(a) so several
    estimators can share one batch of draws.
    """
    a = _alpha(a)
    b = _alpha(b)
    if log_pi is None:
        log_pi = sample_log_dirichlet(rng, a, n)
    return _estimate(_log_density(log_pi, a) - _log_density(log_pi, b))


def mc_expected_entropy(rng, alpha, n=1_000_000, log_pi=None):
    alpha = _alpha(alpha)
    if log_pi is None:
        log_pi = sample_log_dirichlet(rng, alpha, n)
    return _estimate(-np.sum(np.exp(log_pi) * log_pi, axis=1))


def mc_differential_entropy(rng, alpha, n=1_000_000, log_pi=None):
    alpha = _alpha(alpha)
    if log_pi is None:
        log_pi = sample_log_dirichlet(rng, alpha, n)
    return _estimate(-_log_density(log_pi, alpha))
