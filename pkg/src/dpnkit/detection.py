"""Uncertainty scores, AUROC and joint robustness / detection reports."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dirichlet
from .priornet import forward_alpha, logits, predict

__all__ = [
    "MEASURES",
    "DetectionReport",
    "uncertainty_scores",
    "auroc",
    "auroc_bruteforce",
    "attack_success_rate",
    "joint_report",
    "write_report_json",
    "write_report_csv",
]

MEASURES = ("max_prob", "predictive_entropy", "mutual_information", "differential_entropy", "alpha0")

# measures that need a Dirichlet head; a softmax head only has a categorical
_DIRICHLET_ONLY = ("mutual_information", "differential_entropy", "alpha0")


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def uncertainty_scores(model, xs, measure, head="dirichlet"):
    """One score per input, oriented so that larger means more anomalous.

    ``head="dirichlet"`` reads the model as a Prior Network, ``"softmax"``
    as a plain classifier (only ``max_prob`` and ``predictive_entropy``).
    """
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")
    if head == "softmax":
        if measure in _DIRICHLET_ONLY:
            raise ValueError(f"{measure} needs a Dirichlet head")
        p = _softmax(logits(model, xs))
        if measure == "max_prob":
            return -np.max(p, axis=-1)
        return -np.sum(p * np.log(np.maximum(p, 1e-300)), axis=-1)
    if head != "dirichlet":
        raise ValueError(f"unknown head {head!r}")

    alpha = forward_alpha(model, xs)
    if measure == "max_prob":
        return -np.asarray(dirichlet.max_prob(alpha))
    if measure == "alpha0":
        return -np.asarray(dirichlet.precision(alpha))
    return np.asarray(getattr(dirichlet, measure)(alpha))


def auroc(anomalous, nominal):
    """P(anomalous score > nominal score) with ties counted one half.

    Mann-Whitney rank statistic with average ranks for ties, O(n log n).
    """
    a = np.asarray(anomalous, dtype=np.float64).ravel()
    b = np.asarray(nominal, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("AUROC needs non-empty score sequences")
    scores = np.concatenate([a, b])
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # average 1-based rank within each block of equal scores
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_scores)) + 1]
    ends = np.r_[starts[1:], scores.size]
    block_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(scores.size)
    ranks[order] = np.repeat(block_rank, ends - starts)
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def auroc_bruteforce(anomalous, nominal):
    """Quadratic pairwise reference for :func:`auroc`."""
    a = np.asarray(anomalous, dtype=np.float64).ravel()
    b = np.asarray(nominal, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("AUROC needs non-empty score sequences")
    diff = a[:, None] - b[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def attack_success_rate(model, results, true_labels, targeted=True):
    """Fraction predicted as the target (targeted) or not as the true label."""
    x_adv = np.asarray(results.x_adv)
    targets = np.atleast_1d(results.target_class)
    true_labels = np.atleast_1d(np.asarray(true_labels))
    if x_adv.ndim == 1:
        x_adv = x_adv[None]
    if not len(x_adv) == len(targets) == len(true_labels):
        raise ValueError("attack results and labels are misaligned")
    pred = predict(model, x_adv)
    hit = pred == targets if targeted else pred != true_labels
    return float(np.mean(hit))


@dataclass
class DetectionReport:
    measure: str
    scores_natural: np.ndarray
    scores_attack: np.ndarray
    auroc: float
    accuracy_natural: float
    attack_success_rate: float
    epsilon: float = None
    extra: dict = field(default_factory=dict)

    def summary(self):
        return {
            "measure": self.measure,
            "epsilon": self.epsilon,
            "auroc": self.auroc,
            "accuracy_natural": self.accuracy_natural,
            "attack_success_rate": self.attack_success_rate,
            "n_natural": int(len(self.scores_natural)),
            "n_attack": int(len(self.scores_attack)),
        }


def joint_report(model, natural_x, natural_y, attack_x, attack_success, measures,
                 head="dirichlet", attack_epsilon=None, composite=None):
    """Per-measure detection reports for natural vs attacked inputs.

    ``attack_success`` is the per-input success flag of the attack.  When
    ``attack_epsilon`` varies across inputs an extra report is produced
    for every distinct budget.  ``composite(report) -> dict`` lets callers
    attach a combined robustness/detection figure to each report.
    """
    natural_x = np.asarray(natural_x)
    attack_x = np.asarray(attack_x)
    attack_success = np.asarray(attack_success, dtype=bool)
    if len(natural_x) == 0 or len(attack_x) == 0:
        raise ValueError("joint_report needs non-empty natural and attack sets")
    acc = float(np.mean(predict(model, natural_x) == np.asarray(natural_y)))

    groups = [(None, np.ones(len(attack_x), dtype=bool))]
    if attack_epsilon is not None:
        eps = np.broadcast_to(np.asarray(attack_epsilon, dtype=np.float64), (len(attack_x),))
        levels = np.unique(eps)
        if len(levels) > 1:
            groups += [(float(e), eps == e) for e in levels]
        else:
            groups = [(float(levels[0]), groups[0][1])]

    reports = []
    for measure in measures:
        nat = uncertainty_scores(model, natural_x, measure, head)
        adv = uncertainty_scores(model, attack_x, measure, head)
        for eps, mask in groups:
            rep = DetectionReport(
                measure=measure,
                scores_natural=nat,
                scores_attack=adv[mask],
                auroc=auroc(adv[mask], nat),
                accuracy_natural=acc,
                attack_success_rate=float(np.mean(attack_success[mask])),
                epsilon=eps,
            )
            if composite is not None:
                rep.extra.update(composite(rep))
            reports.append(rep)
    return reports


def write_report_json(path, reports):
    payload = []
    for rep in reports:
        d = asdict(rep)
        d["scores_natural"] = [float(v) for v in rep.scores_natural]
        d["scores_attack"] = [float(v) for v in rep.scores_attack]
        payload.append(d)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def write_report_csv(path, reports):
    cols = ("measure", "epsilon", "auroc", "accuracy_natural", "attack_success_rate", "n_natural", "n_attack")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for rep in reports:
            row = rep.summary()
            w.writerow({k: ("" if row[k] is None else row[k]) for k in cols})
