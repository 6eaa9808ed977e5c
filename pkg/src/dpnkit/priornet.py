"""Prior Network / DNN heads and their training losses.

Models are plain :class:`~dpnkit.autodiff.Graph` objects built by
:func:`mlp`.  A model has one input ``"x"`` and a ``"logits"`` output.
Used as a Prior Network, the logits are mapped to Dirichlet
concentrations ``alpha = exp(clip(logits, -30, 30))``; used as a DNN they
feed a softmax.

Every loss is a weighted sum over the rows of a batch,
``sum_i w_i * l_i``, so the joint in-domain / out-of-domain loss is just
one batch with two blocks of weights.  The loss heads are part of the
model graph from construction on, so a built model is never mutated
again except by parameter updates; a :class:`BoundLoss` pairs a head
with the batch it is evaluated on.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, GraphError

__all__ = [
    "LOGIT_CLAMP",
    "TargetConcentration",
    "LossWeights",
    "BoundLoss",
    "mlp",
    "mlp_from_params",
    "logits",
    "forward_alpha",
    "predict",
    "target_alpha",
    "flat_alpha",
    "loss_forward_kl",
    "loss_reverse_kl",
    "loss_nll",
    "loss_joint",
    "divergence_loss",
]

LOGIT_CLAMP = 30.0

_LOSS_KINDS = ("nll", "forward_kl", "reverse_kl")


@dataclass(frozen=True)
class TargetConcentration:
    beta_in: float
    beta_ood: float
    num_classes: int

    def __post_init__(self):
        if not self.beta_in > 0 or not self.beta_ood > 0:
            raise ValueError("target concentrations must be > 0")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")


# -- models ----------------------------------------------------------------


def mlp(in_dim, num_classes, hidden=(128, 128), seed=0, dropout_keep=1.0, activation="relu"):
    """Fully connected classifier with He-initialised weights."""
    rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden, num_classes]
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return mlp_from_params(params, dropout_keep=dropout_keep, activation=activation)


def mlp_from_params(params, dropout_keep=1.0, activation="relu"):
    """Rebuild an :func:`mlp` graph around existing weights (e.g. a checkpoint)."""
    n_layers = sum(1 for k in params if k.startswith("W"))
    if n_layers == 0 or set(params) != {f"{p}{i}" for i in range(n_layers) for p in "Wb"}:
        raise GraphError(f"parameters {sorted(params)} do not describe an MLP")
    if activation not in ("relu", "leaky_relu"):
        raise ValueError(f"unknown activation {activation!r}")

    g = Graph()
    h = g.input("x")
    for i in range(n_layers):
        w = g.parameter(f"W{i}", params[f"W{i}"])
        b = g.parameter(f"b{i}", params[f"b{i}"])
        h = g.add(g.matmul(h, w), b)
        if i < n_layers - 1:
            h = g.relu(h) if activation == "relu" else g.leaky_relu(h)
            if dropout_keep < 1.0:
                h = g.dropout(h, dropout_keep)
    g.outputs["logits"] = h
    g.outputs["alpha"] = g.exp(g.clip(h, -LOGIT_CLAMP, LOGIT_CLAMP))
    g.meta.update(
        in_dim=params["W0"].shape[0],
        num_classes=params[f"W{n_layers - 1}"].shape[1],
        dropout_keep=dropout_keep,
        activation=activation,
    )
    for kind in _LOSS_KINDS:
        _head(g, kind)
    return g


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 1 else (x, False)


def logits(model, x):
    xb, single = _batch(x)
    out = model.forward({"x": xb}, [model.outputs["logits"]])[model.outputs["logits"]]
    return out[0] if single else out


def forward_alpha(model, x):
    """Dirichlet concentrations for one input ``(D,)`` or a batch ``(N, D)``."""
    xb, single = _batch(x)
    node = model.outputs["alpha"]
    out = model.forward({"x": xb}, [node])[node]
    return out[0] if single else out


def predict(model, x):
    """Arg-max class (identical for the softmax and Dirichlet readings)."""
    return np.argmax(logits(model, x), axis=-1)


# -- targets ---------------------------------------------------------------


def target_alpha(label, tc, domain="in"):
    """Concentrations ``1 + beta * onehot(label)``; ``label`` may be an array."""
    if domain not in ("in", "ood"):
        raise ValueError(f"domain must be 'in' or 'ood', got {domain!r}")
    beta = tc.beta_in if domain == "in" else tc.beta_ood
    labels = np.asarray(label)
    if np.any(labels < 0) or np.any(labels >= tc.num_classes):
        raise IndexError(f"class index out of range for K={tc.num_classes}: {label}")
    out = np.ones(labels.shape + (tc.num_classes,))
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0 + beta, axis=-1)
    return out


def flat_alpha(num_classes, n=None):
    return np.ones((num_classes,) if n is None else (n, num_classes))


# -- loss heads --------------------------------------------------------------


def _kl_rows(g, a, b):
    """Per-row KL(Dir(a) || Dir(b)) for (N, K) nodes ``a`` and ``b``."""
    a0 = g.sum(a, axis=-1)
    b0 = g.sum(b, axis=-1)
    norm = g.sub(
        g.add(g.sub(g.lgamma(a0), g.sum(g.lgamma(a), axis=-1)), g.sum(g.lgamma(b), axis=-1)),
        g.lgamma(b0),
    )
    psi_diff = g.sub(g.digamma(a), g.digamma(g.sum(a, axis=-1, keepdims=True)))
    cross = g.sum(g.multiply(g.sub(a, b), psi_diff), axis=-1)
    return g.add(norm, cross)


def _head(model, kind):
    key = f"loss_{kind}"
    if key in model.outputs:
        return model.outputs[key]
    g = model
    weight = g.input("weight")
    if kind == "nll":
        rows = g.softmax_nll(g.outputs["logits"], g.input("labels", dtype=np.int64))
    elif kind == "forward_kl":
        rows = _kl_rows(g, g.input("target"), g.outputs["alpha"])
    elif kind == "reverse_kl":
        rows = _kl_rows(g, g.outputs["alpha"], g.input("target"))
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    g.outputs[f"rows_{kind}"] = rows
    g.outputs[key] = g.sum(g.multiply(rows, weight))
    return g.outputs[key]


@dataclass
class BoundLoss:
    """A loss head of ``model`` together with the batch it is evaluated on."""

    model: Graph
    kind: str
    feed: dict

    @property
    def node(self):
        return self.model.outputs[f"loss_{self.kind}"]

    def evaluate(self, rng=None):
        return self.model.forward(self.feed, [self.node], rng=rng)

    def value(self):
        return float(self.evaluate()[self.node])

    def rows(self):
        """Unweighted per-example losses."""
        node = self.model.outputs[f"rows_{self.kind}"]
        return self.model.forward(self.feed, [node])[node]

    def value_and_grad(self, rng=None):
        ev = self.evaluate(rng=rng)
        return float(ev[self.node]), self.model.backward(ev, self.node)

    def gradients(self, rng=None):
        return self.value_and_grad(rng=rng)[1]

    def input_gradient(self, name="x"):
        return self.gradients()[name]


def _weights(n, weights):
    if weights is None:
        return np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"weights must have shape ({n},), got {weights.shape}")
    return weights


def _check_targets(model, x, target):
    k = model.meta["num_classes"]
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = np.broadcast_to(target, (x.shape[0], target.shape[0]))
    if target.shape != (x.shape[0], k):
        raise ValueError(f"target shape {target.shape} does not match batch of {x.shape[0]} with K={k}")
    return target


def divergence_loss(model, x, target, divergence, weights=None):
    xb, _ = _batch(x)
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    kind = {"forward": "forward_kl", "reverse": "reverse_kl"}[divergence]
    feed = {"x": xb, "target": _check_targets(model, xb, target), "weight": _weights(len(xb), weights)}
    _head(model, kind)
    return BoundLoss(model, kind, feed)


def loss_forward_kl(model, x, target, weights=None):
    """KL(target || model) averaged over the batch (or weighted by ``weights``)."""
    return divergence_loss(model, x, target, "forward", weights)


def loss_reverse_kl(model, x, target, weights=None):
    """KL(model || target) averaged over the batch (or weighted by ``weights``)."""
    return divergence_loss(model, x, target, "reverse", weights)


def loss_nll(model, x, labels, weights=None):
    xb, _ = _batch(x)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = model.meta["num_classes"]
    if labels.shape != (xb.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for a batch of {xb.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"label out of range for K={k}")
    feed = {"x": xb, "labels": labels, "weight": _weights(len(xb), weights)}
    _head(model, "nll")
    return BoundLoss(model, "nll", feed)


def loss_joint(model, in_batch, ood_batch, tc, w, divergence="reverse"):
    """Mean in-domain divergence + gamma * mean out-of-domain divergence.

    ``in_batch`` is ``(x, labels)``.  ``ood_batch`` is ``(x, labels)``
    or ``(x, None)``; labelled OOD rows are pulled towards
    ``target_alpha(label, tc, "ood")``, unlabelled rows towards the flat
    Dirichlet.  ``ood_batch`` may be ``None`` only when ``w.gamma == 0``.
    """
    x_in, y_in = in_batch
    x_in = np.atleast_2d(np.asarray(x_in, dtype=np.float64))
    if x_in.shape[0] == 0:
        raise ValueError("in-domain batch is empty")
    n_in = x_in.shape[0]
    xs = [x_in]
    targets = [target_alpha(np.asarray(y_in), tc, "in")]
    weights = [np.full(n_in, 1.0 / n_in)]

    if ood_batch is not None and len(ood_batch[0]):
        x_ood, y_ood = ood_batch
        x_ood = np.atleast_2d(np.asarray(x_ood, dtype=np.float64))
        n_ood = x_ood.shape[0]
        xs.append(x_ood)
        if y_ood is None:
            targets.append(flat_alpha(tc.num_classes, n_ood))
        else:
            targets.append(target_alpha(np.asarray(y_ood), tc, "ood"))
        weights.append(np.full(n_ood, w.gamma / n_ood))
    elif w.gamma != 0:
        raise ValueError("an out-of-domain batch is required when gamma > 0")

    return divergence_loss(
        model, np.concatenate(xs), np.concatenate(targets), divergence, np.concatenate(weights)
    )
