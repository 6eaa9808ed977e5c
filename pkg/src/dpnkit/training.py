"""Training loops: standard NLL / forward-KL / reverse-KL, adversarial
training for DNNs and Prior Networks, and explicit ensembles.

All randomness is drawn from independent streams spawned from
``TrainConfig.seed`` (shuffling, dropout, attack sampling,
augmentation), so a seeded run is bit-reproducible and switching the
attack generator on or off does not disturb the other streams.
"""

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .attacks import DEFAULT_EPSILON_SIGMA, fgsm, sample_epsilon, select_target_class
from .autodiff import NonFiniteError
from .priornet import (
    LossWeights,
    TargetConcentration,
    forward_alpha,
    logits,
    loss_joint,
    loss_nll,
    predict,
)

__all__ = [
    "TrainConfig",
    "ConfigError",
    "TrainingError",
    "TABLE2",
    "format_config",
    "parse_config",
    "load_config",
    "one_cycle_lr",
    "augment",
    "sample_augmentation",
    "apply_augmentation",
    "Adam",
    "train_standard",
    "train_dnn_adversarial",
    "train_pn_adversarial",
    "ensemble_predict",
    "ensemble_uncertainty",
    "write_history",
    "HISTORY_COLUMNS",
]

OBJECTIVES = ("dnn_nll", "pn_kl", "pn_rkl")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    eta0: float
    epochs: int
    cycle_length: int
    dropout_keep: float = 1.0
    gamma: float = 0.0
    beta_in: float = None
    beta_adv: float = None
    ood_source: str = "none"
    batch_size: int = 128
    seed: int = 0
    augment: bool = False
    lr_start_div: float = 10.0
    lr_final_div: float = 100.0

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ConfigError("eta0 must be > 0")
        if self.epochs < 1 or not 0 < self.cycle_length <= self.epochs:
            raise ConfigError("need 0 < cycle_length <= epochs")
        if not 0 < self.dropout_keep <= 1:
            raise ConfigError("dropout_keep must be in (0, 1]")
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise ConfigError("gamma must be finite and >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        src = self.ood_source
        if src not in ("none", "fgsm_adv") and not (src.startswith("dataset:") and len(src) > 8):
            raise ConfigError(f"ood_source must be none, fgsm_adv or dataset:<name>, got {src!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


def _row(eta0, epochs, cycle, keep, gamma=0.0, beta_in=None, beta_adv=None, ood="none", augment=False):
    return TrainConfig(eta0, epochs, cycle, keep, gamma, beta_in, beta_adv, ood, augment=augment)


# (dataset, model) -> configuration, as listed in the experimental setup
TABLE2 = {
    ("MNIST", "DNN"): _row(1e-3, 20, 10, 0.5),
    ("MNIST", "PN-KL"): _row(1e-3, 20, 10, 0.5, 0.0, 1e3),
    ("MNIST", "PN-RKL"): _row(1e-3, 20, 10, 0.5, 0.0, 1e3),
    ("SVHN", "DNN"): _row(1e-3, 40, 30, 0.5),
    ("SVHN", "PN-KL"): _row(5e-4, 40, 30, 0.7, 1.0, 1e3, ood="dataset:CIFAR-10"),
    ("SVHN", "PN-RKL"): _row(5e-6, 40, 30, 0.7, 10.0, 1e3, ood="dataset:CIFAR-10"),
    ("CIFAR-10", "DNN"): _row(1e-3, 45, 30, 0.5, augment=True),
    ("CIFAR-10", "DNN-ADV"): _row(1e-3, 45, 30, 0.5, ood="fgsm_adv", augment=True),
    ("CIFAR-10", "PN-KL"): _row(5e-4, 45, 30, 0.7, 1.0, 1e2, ood="dataset:CIFAR-100", augment=True),
    ("CIFAR-10", "PN-RKL"): _row(5e-6, 45, 30, 0.7, 10.0, 1e2, ood="dataset:CIFAR-100", augment=True),
    ("CIFAR-10", "PN"): _row(5e-6, 45, 30, 0.7, 30.0, 1e2, 1.0, "fgsm_adv", augment=True),
    ("CIFAR-100", "DNN"): _row(1e-3, 100, 70, 0.5, augment=True),
    ("CIFAR-100", "DNN-ADV"): _row(1e-3, 100, 70, 0.5, ood="fgsm_adv", augment=True),
    ("CIFAR-100", "PN-KL"): _row(5e-4, 100, 70, 0.7, 1.0, 1e2, ood="dataset:TinyImageNet", augment=True),
    ("CIFAR-100", "PN-RKL"): _row(5e-6, 100, 70, 0.7, 10.0, 1e2, ood="dataset:TinyImageNet", augment=True),
    ("CIFAR-100", "PN"): _row(5e-4, 100, 70, 0.7, 30.0, 1e2, 1.0, "fgsm_adv", augment=True),
    ("TinyImageNet", "DNN"): _row(1e-3, 120, 80, 0.5, augment=True),
    ("TinyImageNet", "PN-KL"): _row(5e-4, 120, 80, 0.5, 0.0, 1e2, augment=True),
    ("TinyImageNet", "PN-RKL"): _row(5e-6, 120, 80, 0.5, 0.0, 1e2, augment=True),
}


# -- config text -----------------------------------------------------------------


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg):
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(cfg).items())


def parse_config(text):
    """Parse ``key = value`` lines (``#`` comments allowed) into a TrainConfig."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, types[key], value, lineno)
    missing = [k for k in ("eta0", "epochs", "cycle_length") if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    return TrainConfig(**values)


def _parse_value(key, typ, value, lineno):
    try:
        if typ in ("int", int):
            return int(value)
        if typ in ("bool", bool):
            if value.lower() not in ("true", "false"):
                raise ValueError(value)
            return value.lower() == "true"
        if typ in ("str", str):
            return value
        if value.lower() == "none":
            if key in ("beta_in", "beta_adv"):
                return None
            raise ValueError(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {value!r} for {key!r}") from None


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


# -- schedule / augmentation ------------------------------------------------------------


def one_cycle_lr(step_epoch, cfg):
    """Triangular one-cycle schedule followed by a linear annealing tail.

    eta0/lr_start_div -> eta0 over the first half cycle, back down at the
    end of the cycle, then linearly to eta0/lr_final_div at ``epochs``.
    When ``cycle_length == epochs`` there is no tail.
    """
    t = float(step_epoch)
    if not 0.0 <= t <= cfg.epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.epochs}]")
    hi = cfg.eta0
    lo = hi / cfg.lr_start_div
    end = hi / cfg.lr_final_div
    half = cfg.cycle_length / 2.0
    if t <= half:
        return lo + (hi - lo) * t / half
    if t <= cfg.cycle_length:
        return hi - (hi - lo) * (t - half) / half
    return lo + (end - lo) * (t - cfg.cycle_length) / (cfg.epochs - cfg.cycle_length)


MAX_SHIFT = 4
MAX_ROTATION = 15.0


def sample_augmentation(rng):
    flip = bool(rng.random() < 0.5)
    dy, dx = (int(v) for v in rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2))
    angle = float(rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    return flip, dy, dx, angle


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    yd = slice(max(-dy, 0), h + min(-dy, 0))
    xd = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = img[yd, xd]
    return out


def apply_augmentation(x, flip, dy, dx, angle):
    img = np.asarray(x, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected an H x W (x C) image, got shape {img.shape}")
    if flip:
        img = img[:, ::-1]
    if dy or dx:
        img = _shift(img, dy, dx)
    if angle:
        img = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(img, 0.0, 1.0)


def augment(x, rng, enabled=True):
    """Random flip, +/-4 pixel shift and +/-15 degree rotation of one image."""
    if not enabled:
        return x
    return apply_augmentation(x, *sample_augmentation(rng))


# -- optimiser -------------------------------------------------------------------


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in params:
                continue
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training loops ----------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "valid_acc", "mean_alpha0_in", "mean_alpha0_ood")


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    return dict(zip(("shuffle", "dropout", "attack", "augment"), (np.random.default_rng(s) for s in ss.spawn(4))))


def _accuracy(model, split):
    if split is None or len(split) == 0:
        return float("nan")
    return float(np.mean(predict(model, split.x) == split.y))


def _augment_batch(xb, image_shape, rng):
    out = np.empty_like(xb)
    for i, row in enumerate(xb):
        out[i] = augment(row.reshape(image_shape), rng).reshape(-1)
    return out


def _fit(model, data, cfg, make_loss, ood_x=None):
    """Shared minibatch loop; ``make_loss(xb, yb, ood_xb, streams)`` builds the batch loss."""
    if data.train is None or len(data.train) == 0:
        raise ValueError("training set is empty")
    if cfg.augment and data.image_shape is None:
        raise ValueError("augmentation needs DatasetSplit.image_shape")
    streams = _streams(cfg.seed)
    params = model.params
    opt = Adam()
    n = len(data.train)
    n_batches = math.ceil(n / cfg.batch_size)
    ood_order = None
    ood_pos = 0
    history = []

    for epoch in range(cfg.epochs):
        order = streams["shuffle"].permutation(n)
        if ood_x is not None:
            ood_order = streams["shuffle"].permutation(len(ood_x))
            ood_pos = 0
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, yb = data.train.x[idx], data.train.y[idx]
            if cfg.augment:
                xb = _augment_batch(xb, data.image_shape, streams["augment"])
            ood_b = None
            if ood_x is not None:
                take = np.take(ood_order, np.arange(ood_pos, ood_pos + len(idx)), mode="wrap")
                ood_pos += len(idx)
                ood_b = ood_x[take]
            lr = one_cycle_lr(epoch + b / n_batches, cfg)
            bound = make_loss(xb, yb, ood_b, streams)
            try:
                value, grads = bound.value_and_grad(rng=streams["dropout"] if cfg.dropout_keep < 1 else None)
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}", history) from exc
            if not math.isfinite(value):
                raise TrainingError(f"epoch {epoch} batch {b}: loss is {value}", history)
            opt.step(params, grads, lr)
            total += value * len(idx)

        row = {
            "epoch": epoch + 1,
            "lr": one_cycle_lr(epoch + 1, cfg),
            "train_loss": total / n,
            "train_acc": _accuracy(model, data.train),
            "valid_acc": _accuracy(model, data.valid),
            "mean_alpha0_in": float(np.mean(np.sum(forward_alpha(model, data.train.x), axis=1))),
            "mean_alpha0_ood": (float(np.mean(np.sum(forward_alpha(model, ood_x), axis=1)))
                                if ood_x is not None else float("nan")),
        }
        history.append(row)
    return model, history


def _target_concentration(cfg, k):
    if cfg.beta_in is None:
        raise ConfigError("Prior Network training needs beta_in")
    beta_adv = cfg.beta_adv if cfg.beta_adv is not None else 1.0
    return TargetConcentration(cfg.beta_in, beta_adv, k)


def train_standard(model, data, cfg, objective, ood_data=None):
    """Train ``model`` in place; returns ``(model, history)``.

    ``objective`` is ``dnn_nll``, ``pn_kl`` or ``pn_rkl``.  For the two
    Prior Network objectives with ``gamma > 0`` every in-domain minibatch
    is paired with an equally sized minibatch of ``ood_data`` (an array of
    inputs), whose target is the flat Dirichlet.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    k = data.num_classes
    ood_x = None
    if objective == "dnn_nll":
        def make_loss(xb, yb, ood_b, streams):
            return loss_nll(model, xb, yb)
    else:
        tc = _target_concentration(cfg, k)
        weights = LossWeights(cfg.gamma)
        divergence = "forward" if objective == "pn_kl" else "reverse"
        if cfg.gamma > 0:
            if ood_data is None:
                raise ValueError("gamma > 0 needs ood_data")
            ood_x = np.asarray(ood_data, dtype=np.float64)

        def make_loss(xb, yb, ood_b, streams):
            ood = None if ood_b is None else (ood_b, None)
            return loss_joint(model, (xb, yb), ood, tc, weights, divergence)

    return _fit(model, data, cfg, make_loss, ood_x)


def _adversarial_batch(model, xb, yb, k, streams, sigma, attack):
    eps = sample_epsilon(streams["attack"], sigma, size=len(xb))
    targets = select_target_class(streams["attack"], yb, k)
    assert not np.any(targets == yb), "attack target equals the true class"
    return attack(model, xb, targets, eps)


def _fgsm_nll(model, x, targets, eps):
    return fgsm(model, x, targets, eps, "nll_target").x_adv


def train_dnn_adversarial(model, data, cfg, attack=None, epsilon_sigma=DEFAULT_EPSILON_SIGMA):
    """NLL training on each natural minibatch plus its targeted-FGSM copy.

    ``attack(model, x, targets, eps) -> x_adv`` defaults to targeted FGSM
    on the NLL of the target class, generated against the current weights.
    """
    if cfg.ood_source != "fgsm_adv":
        raise ConfigError("adversarial training needs ood_source = fgsm_adv")
    attack = attack or _fgsm_nll
    k = data.num_classes

    def make_loss(xb, yb, ood_b, streams):
        x_adv = _adversarial_batch(model, xb, yb, k, streams, epsilon_sigma, attack)
        return loss_nll(model, np.concatenate([xb, x_adv]), np.concatenate([yb, yb]))

    return _fit(model, data, cfg, make_loss)


def train_pn_adversarial(model, data, cfg, attack=None, epsilon_sigma=DEFAULT_EPSILON_SIGMA):
    """Reverse-KL Prior Network training on natural plus FGSM-perturbed data.

    The perturbation descends the reverse KL towards a sharp Dirichlet
    (``beta_in``) on a random wrong class.  The perturbed copy is then
    trained towards a wide Dirichlet (``beta_adv``) on the *true* class
    with weight ``gamma``.  With ``gamma == 0`` no attacks are generated
    and the run is identical to ``train_standard(..., "pn_rkl")``.
    """
    if cfg.ood_source != "fgsm_adv":
        raise ConfigError("adversarial training needs ood_source = fgsm_adv")
    k = data.num_classes
    tc = _target_concentration(cfg, k)
    weights = LossWeights(cfg.gamma)

    def _fgsm_rkl(model, x, targets, eps):
        return fgsm(model, x, targets, eps, "rkl_target_dirichlet", target_concentration=tc.beta_in).x_adv

    attack = attack or _fgsm_rkl

    def make_loss(xb, yb, ood_b, streams):
        if cfg.gamma == 0:
            return loss_joint(model, (xb, yb), None, tc, weights, "reverse")
        x_adv = _adversarial_batch(model, xb, yb, k, streams, epsilon_sigma, attack)
        return loss_joint(model, (xb, yb), (x_adv, yb), tc, weights, "reverse")

    return _fit(model, data, cfg, make_loss)


# -- ensembles ---------------------------------------------------------------------


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_predict(models, x):
    """Mean softmax over ``models`` and the stacked per-model probabilities ``(M, N, K)``."""
    if not models:
        raise ValueError("empty ensemble")
    ks = {m.meta["num_classes"] for m in models}
    if len(ks) != 1:
        raise ValueError(f"ensemble members disagree on the number of classes: {sorted(ks)}")
    per_model = np.stack([_softmax(logits(m, x)) for m in models])
    return per_model.mean(axis=0), per_model


def _entropy(p):
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def ensemble_uncertainty(per_model):
    """Entropy of the mean, mean entropy, and their difference (mutual information)."""
    per_model = np.asarray(per_model, dtype=np.float64)
    total = _entropy(per_model.mean(axis=0))
    expected = _entropy(per_model).mean(axis=0)
    return {"entropy_of_mean": total, "mean_entropy": expected, "mutual_information": total - expected}


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_COLUMNS})
