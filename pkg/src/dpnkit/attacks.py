"""Gradient-based adversarial examples against :mod:`dpnkit.priornet` models.

Inputs may be a single example ``(D,)`` or a batch ``(N, ...)``; norms
and budgets are always per example (over all non-batch axes).  Targeted
attacks *descend* the loss of the target class; untargeted attacks
ascend the loss of the true class, which is passed as ``target``.

The default pixel domain is ``[0, 1]`` and iterates are clipped to it
after every step.  ``sign(0) == 0`` throughout.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .priornet import TargetConcentration, loss_nll, loss_reverse_kl, predict, target_alpha

__all__ = [
    "AttackConfig",
    "AttackResult",
    "StationaryInputError",
    "LOSS_KINDS",
    "DEFAULT_EPSILON_SIGMA",
    "select_target_class",
    "sample_epsilon",
    "attack_loss",
    "adaptive_attack_loss",
    "input_gradient",
    "lp_norm",
    "project_lp",
    "fgsm",
    "fgm",
    "iterative_attack",
    "soft_constraint_attack",
    "write_manifest",
]

LOSS_KINDS = ("nll_target", "rkl_target_dirichlet")

# half-normal scale for adversarial-training budgets: 30 pixel levels out of 128
DEFAULT_EPSILON_SIGMA = 30.0 / 128.0


class StationaryInputError(ValueError):
    """The loss gradient vanished, so a normalised step is undefined."""


def _norm_order(p):
    if p in (np.inf, "inf", "Inf", float("inf")):
        return np.inf
    if p in (1, 2, "1", "2"):
        return int(p)
    raise ValueError(f"unsupported norm {p!r}; expected 1, 2 or inf")


@dataclass(frozen=True)
class AttackConfig:
    norm: object = np.inf
    epsilon: float = 0.1
    steps: int = 10
    step_size: float = None
    momentum: float = 1.0
    soft_c: float = 0.0
    loss_kind: str = "nll_target"
    targeted: bool = True
    target_concentration: float = 100.0
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "norm", _norm_order(self.norm))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / self.steps)
        numeric = (self.epsilon, self.step_size, self.momentum, self.soft_c, self.target_concentration)
        if not all(np.isfinite(v) for v in numeric):
            raise ValueError("attack configuration values must be finite")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.step_size <= 0 or self.momentum < 0 or self.soft_c < 0:
            raise ValueError("step_size must be > 0; momentum and soft_c must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    achieved_delta: object
    target_class: object
    success: object
    stalled: object = False
    trace: list = field(default=None, repr=False)


# -- samplers ----------------------------------------------------------------


def select_target_class(rng, true_label, num_classes):
    """Uniform draw over the classes other than ``true_label`` (scalar or array)."""
    if num_classes < 2:
        raise ValueError("need at least two classes to pick a different target")
    true_label = np.asarray(true_label, dtype=np.int64)
    if np.any(true_label < 0) or np.any(true_label >= num_classes):
        raise IndexError("true label out of range")
    draw = rng.integers(0, num_classes - 1, size=true_label.shape)
    out = draw + (draw >= true_label)
    return int(out) if out.ndim == 0 else out


def sample_epsilon(rng, sigma=DEFAULT_EPSILON_SIGMA, size=None):
    """Positive budgets ``|z|`` with ``z ~ N(0, sigma)``; exact zeros are redrawn."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    eps = np.abs(rng.normal(0.0, sigma, size=size))
    zero = eps == 0
    while np.any(zero):
        redraw = np.abs(rng.normal(0.0, sigma, size=int(np.sum(zero))))
        if np.ndim(eps) == 0:
            eps = redraw[0]
        else:
            eps[zero] = redraw
        zero = eps == 0
    return float(eps) if np.ndim(eps) == 0 else eps


# -- losses and gradients -----------------------------------------------------


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 1 else (x, False)


def _labels(target, n):
    target = np.asarray(target, dtype=np.int64)
    return np.broadcast_to(target, (n,)).copy()


def attack_loss(model, x, target, loss_kind="nll_target", target_concentration=100.0):
    """Per-example summed attack loss (weights of one, so row gradients are independent)."""
    xb, _ = _as_batch(x)
    labels = _labels(target, len(xb))
    ones = np.ones(len(xb))
    if loss_kind == "nll_target":
        return loss_nll(model, xb, labels, weights=ones)
    if loss_kind == "rkl_target_dirichlet":
        k = model.meta["num_classes"]
        tc = TargetConcentration(target_concentration, target_concentration, k)
        return loss_reverse_kl(model, xb, target_alpha(labels, tc, "in"), weights=ones)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def adaptive_attack_loss(model, x, target, tc):
    """Reverse KL from the model to a confident in-domain Dirichlet on ``target``.

    Minimising it asks for an input the detector would score like a clean,
    confidently classified example of the target class.
    """
    return attack_loss(model, x, target, "rkl_target_dirichlet", tc.beta_in)


def input_gradient(model, x, target, loss_kind="nll_target", target_concentration=100.0):
    """Gradient of each example's attack loss w.r.t. that example, plus the losses."""
    bound = attack_loss(model, x, target, loss_kind, target_concentration)
    ev = bound.evaluate()
    grad = model.backward(ev, bound.node)["x"]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite input gradient")
    return grad, bound.rows()


def _descent_grad(model, xb, labels, targeted, loss_kind, beta):
    grad, rows = input_gradient(model, xb, labels, loss_kind, beta)
    return (grad if targeted else -grad), rows


# -- geometry ------------------------------------------------------------------


def _rows(a):
    return a.reshape(a.shape[0], -1)


def lp_norm(v, p):
    """Per-row L_p norm of a batch."""
    p = _norm_order(p)
    flat = _rows(np.asarray(v, dtype=np.float64))
    if p == np.inf:
        return np.max(np.abs(flat), axis=1)
    if p == 1:
        return np.sum(np.abs(flat), axis=1)
    return np.sqrt(np.sum(flat * flat, axis=1))


def _expand(per_row, like):
    return np.reshape(per_row, (-1,) + (1,) * (like.ndim - 1))


def _project_l1(v, radius):
    """Euclidean projection of each row of ``v`` onto the L1 ball (sort-based)."""
    out = v.copy()
    for i in range(v.shape[0]):
        row = v[i]
        if np.sum(np.abs(row)) <= radius[i]:
            continue
        u = np.sort(np.abs(row))[::-1]
        css = np.cumsum(u)
        idx = np.arange(1, u.size + 1)
        rho = np.nonzero(u * idx > css - radius[i])[0][-1]
        theta = (css[rho] - radius[i]) / (rho + 1.0)
        out[i] = np.sign(row) * np.maximum(np.abs(row) - theta, 0.0)
        # guard against the last ulp of rounding
        total = np.sum(np.abs(out[i]))
        if total > radius[i]:
            out[i] *= radius[i] / total
    return out


def project_lp(x0, x, epsilon, p, domain=(0.0, 1.0)):
    """Nearest point to ``x`` in the ``epsilon`` L_p ball around ``x0``, clipped to ``domain``."""
    p = _norm_order(p)
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x0.shape != x.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x.shape}")
    single = x.ndim == 1
    if single:
        x0, x = x0[None], x[None]
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (x.shape[0],))
    if p == np.inf:
        e = _expand(eps, x)
        out = np.clip(x, x0 - e, x0 + e)
    elif p == 2:
        delta = x - x0
        norm = lp_norm(delta, 2)
        factor = np.where(norm > eps, eps / np.where(norm > 0, norm, 1.0), 1.0)
        out = x0 + delta * _expand(factor, x)
    else:
        delta = _rows(x - x0)
        out = x0 + _project_l1(delta, eps).reshape(x.shape)
    out = np.clip(out, domain[0], domain[1])
    return out[0] if single else out


# -- attacks ---------------------------------------------------------------------


def _result(model, x, x_adv, labels, targeted, p, single, stalled=None, trace=None):
    delta = lp_norm(x_adv - x, p)
    pred = predict(model, x_adv)
    success = pred == labels if targeted else pred != labels
    stalled = np.zeros(len(x), dtype=bool) if stalled is None else stalled
    if single:
        return AttackResult(x_adv[0], float(delta[0]), int(labels[0]), bool(success[0]),
                            bool(stalled[0]), trace)
    return AttackResult(x_adv, delta, labels, success, stalled, trace)


def fgsm(model, x, target, epsilon, loss_kind="nll_target", targeted=True,
         target_concentration=100.0, domain=(0.0, 1.0)):
    """One signed-gradient step of size ``epsilon`` (L_inf budget)."""
    xb, single = _as_batch(x)
    labels = _labels(target, len(xb))
    grad, _ = _descent_grad(model, xb, labels, targeted, loss_kind, target_concentration)
    eps = _expand(np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (len(xb),)), xb)
    x_adv = np.clip(xb - eps * np.sign(grad), domain[0], domain[1])
    return _result(model, xb, x_adv, labels, targeted, np.inf, single)


def _normalised_step(grad, p):
    if p == np.inf:
        return np.sign(grad)
    norm = lp_norm(grad, p)
    return grad / _expand(np.where(norm > 0, norm, 1.0), grad)


def fgm(model, x, target, epsilon, p=2, loss_kind="nll_target", targeted=True,
        target_concentration=100.0, domain=(0.0, 1.0)):
    """One step of L_p length ``epsilon`` along the normalised gradient.

    For ``p = inf`` the step is ``epsilon * sign(grad)``, i.e. exactly FGSM.
    """
    p = _norm_order(p)
    if p == np.inf:
        return fgsm(model, x, target, epsilon, loss_kind, targeted, target_concentration, domain)
    xb, single = _as_batch(x)
    labels = _labels(target, len(xb))
    grad, _ = _descent_grad(model, xb, labels, targeted, loss_kind, target_concentration)
    if np.any(lp_norm(grad, p) == 0):
        raise StationaryInputError("zero loss gradient: FGM direction undefined")
    eps = _expand(np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (len(xb),)), xb)
    x_adv = np.clip(xb - eps * _normalised_step(grad, p), domain[0], domain[1])
    return _result(model, xb, x_adv, labels, targeted, p, single)


def iterative_attack(model, x, target, cfg, epsilon=None):
    """BIM / MIM / PGD: momentum-accumulated steps projected onto the budget ball.

    ``g_t = momentum * g_{t-1} + grad / ||grad||_1``; the step is
    ``step_size * sign(g_t)`` for L_inf and the L_p-normalised ``g_t``
    otherwise.  ``momentum = 0`` gives BIM.  Examples whose gradient
    vanishes stop early and are flagged in ``stalled``.  ``epsilon``
    optionally overrides ``cfg.epsilon`` per example.
    """
    xb, single = _as_batch(x)
    labels = _labels(target, len(xb))
    eps = cfg.epsilon if epsilon is None else epsilon
    p = cfg.norm
    x_t = xb.copy()
    g_acc = np.zeros_like(xb)
    stalled = np.zeros(len(xb), dtype=bool)
    for _ in range(cfg.steps):
        grad, _ = _descent_grad(model, x_t, labels, cfg.targeted, cfg.loss_kind,
                                cfg.target_concentration)
        l1 = lp_norm(grad, 1)
        stalled |= l1 == 0
        active = _expand(~stalled, xb)
        g_acc = np.where(active, cfg.momentum * g_acc + grad / _expand(np.where(l1 > 0, l1, 1.0), xb), g_acc)
        step = cfg.step_size * _normalised_step(g_acc, p)
        x_new = project_lp(xb, x_t - step, eps, p, cfg.domain)
        x_t = np.where(active, x_new, x_t)
        if stalled.all():
            break
    return _result(model, xb, x_t, labels, cfg.targeted, p, single, stalled)


def soft_constraint_attack(model, x, target, cfg):
    """Gradient descent on ``loss + soft_c * ||x_adv - x||_2`` without a hard ball.

    Runs ``cfg.steps`` fixed-size steps, clipping to the pixel domain, and
    returns the best iterate per example.  ``trace`` holds the best
    objective after each step (non-increasing by construction).
    """
    xb, single = _as_batch(x)
    labels = _labels(target, len(xb))
    c = cfg.soft_c

    def objective(z):
        grad, rows = _descent_grad(model, z, labels, cfg.targeted, cfg.loss_kind,
                                   cfg.target_concentration)
        loss = rows if cfg.targeted else -rows
        delta = z - xb
        dist = lp_norm(delta, 2)
        unit = delta / _expand(np.where(dist > 0, dist, 1.0), xb)
        value = loss + c * dist
        if not np.all(np.isfinite(value)):
            raise FloatingPointError("soft-constraint objective diverged")
        return value, grad + c * unit

    best_x = xb.copy()
    best_val, grad = objective(xb)
    trace = [best_val.copy()]
    z = xb.copy()
    for _ in range(cfg.steps):
        z = np.clip(z - cfg.step_size * grad, cfg.domain[0], cfg.domain[1])
        val, grad = objective(z)
        better = val < best_val
        best_val = np.where(better, val, best_val)
        best_x = np.where(_expand(better, xb), z, best_x)
        trace.append(best_val.copy())

    result = _result(model, xb, best_x, labels, cfg.targeted, 2, single)
    result.trace = [float(t[0]) for t in trace] if single else trace
    return result


def write_manifest(path, result, epsilon, norm):
    """One JSON record per attacked input."""
    n = np.atleast_1d(result.achieved_delta).shape[0]
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (n,))
    norm = _norm_order(norm)
    with open(path, "w") as fh:
        for i in range(n):
            record = {
                "index": i,
                "target_class": int(np.atleast_1d(result.target_class)[i]),
                "epsilon": float(eps[i]),
                "norm": "inf" if norm == np.inf else norm,
                "achieved_delta": float(np.atleast_1d(result.achieved_delta)[i]),
                "success": bool(np.atleast_1d(result.success)[i]),
            }
            fh.write(json.dumps(record) + "\n")
