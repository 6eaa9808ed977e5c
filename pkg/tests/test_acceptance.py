"""Acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict that the terminal summary prints
as ``PASS``/``FAIL``.  Run just this module with::

    pytest tests/test_acceptance.py -v
"""

import time

import mpmath
import numpy as np
import pytest

from dpnkit import dirichlet as D
from dpnkit.attacks import (
    AttackConfig,
    StationaryInputError,
    adaptive_attack_loss,
    fgm,
    fgsm,
    iterative_attack,
    lp_norm,
    select_target_class,
    soft_constraint_attack,
)
from dpnkit.autodiff import finite_diff_check
from dpnkit.cli import run
from dpnkit.data import SyntheticSpec, gen_synthetic
from dpnkit.detection import auroc, auroc_bruteforce, uncertainty_scores
from dpnkit.priornet import (
    LossWeights,
    TargetConcentration,
    forward_alpha,
    loss_forward_kl,
    loss_joint,
    loss_nll,
    loss_reverse_kl,
    mlp,
    predict,
    target_alpha,
)
from dpnkit.special import digamma, log_gamma
from dpnkit.training import TABLE2, TrainConfig, format_config, parse_config, train_pn_adversarial, train_standard

SEED = 20181026


def verdict(record_property, label, ok, detail):
    record_property("criterion", f"{label}: {detail}")
    print(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
    assert ok, detail


# -- 1 ------------------------------------------------------------------------------


def test_c1_dirichlet_oracles(record_property):
    rng = np.random.default_rng(SEED)
    start = time.perf_counter()
    worst = {"kl": 0.0, "expected_entropy": 0.0, "differential_entropy": 0.0}
    misses = []
    for i in range(50):
        k = int(rng.integers(2, 11))
        a = np.exp(rng.uniform(np.log(0.1), np.log(100.0), k))
        b = np.exp(rng.uniform(np.log(0.1), np.log(100.0), k))
        log_pi = D.sample_log_dirichlet(rng, a, 1_000_000)
        checks = {
            "kl": (D.mc_kl(rng, a, b, log_pi=log_pi), D.dirichlet_kl(a, b)),
            "expected_entropy": (D.mc_expected_entropy(rng, a, log_pi=log_pi), D.expected_entropy(a)),
            "differential_entropy": (D.mc_differential_entropy(rng, a, log_pi=log_pi), D.differential_entropy(a)),
        }
        for name, (est, exact) in checks.items():
            z = abs(est.mean - exact) / est.stderr
            worst[name] = max(worst[name], z)
            if z > 3.0:
                misses.append(f"pair {i} {name} {z:.2f} SE")
    elapsed = time.perf_counter() - start
    ok = not misses and elapsed < 60.0
    detail = (f"150 comparisons, worst z kl={worst['kl']:.2f} H_exp={worst['expected_entropy']:.2f} "
              f"H_diff={worst['differential_entropy']:.2f}, {elapsed:.1f}s"
              + (f"; misses: {misses}" if misses else ""))
    verdict(record_property, "C1 Dirichlet MC oracles (3 SE, <60s)", ok, detail)


# -- 2 ------------------------------------------------------------------------------


def test_c2_special_functions(record_property):
    mpmath.mp.dps = 50
    grid = np.logspace(-3, 6, 200)
    psi_ref = np.array([float(mpmath.digamma(mpmath.mpf(float(x)))) for x in grid])
    lg_ref = np.array([float(mpmath.loggamma(mpmath.mpf(float(x)))) for x in grid])
    psi_err = np.max(np.abs(digamma(grid) - psi_ref))
    lg_err = np.max(np.abs(log_gamma(grid) - lg_ref) / np.abs(lg_ref))
    ok = psi_err < 1e-12 and lg_err < 1e-12
    verdict(record_property, "C2 digamma/lgamma vs 50-digit reference (1e-12)", ok,
            f"digamma max abs {psi_err:.2e}, lgamma max rel {lg_err:.2e}")


# -- 3 ------------------------------------------------------------------------------


def _random_losses(rng, seed):
    d = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    hidden = tuple(int(h) for h in rng.integers(3, 7, size=int(rng.integers(1, 3))))
    model = mlp(d, k, hidden=hidden, seed=seed, activation=str(rng.choice(["relu", "leaky_relu"])))
    # He-initialised weights plus random biases: all-zero biases behind dead
    # units would put the loss exactly on a ReLU kink
    model.set_params({name: rng.normal(0.0, 0.1, value.shape) for name, value in model.params.items()
                      if name.startswith("b")})
    n = int(rng.integers(1, 4))
    x = rng.uniform(0, 1, size=(n, d))
    y = rng.integers(0, k, n)
    tc = TargetConcentration(float(rng.choice([1.0, 10.0, 100.0])), float(rng.uniform(0.5, 2.0)), k)
    target = target_alpha(y, tc)
    x_ood = rng.uniform(0, 1, size=(n, d))
    gamma = float(rng.uniform(0.0, 30.0))
    return model, {
        "nll": loss_nll(model, x, y),
        "forward_kl": loss_forward_kl(model, x, target),
        "reverse_kl": loss_reverse_kl(model, x, target),
        "joint_reverse": loss_joint(model, (x, y), (x_ood, None), tc, LossWeights(gamma)),
        "joint_forward": loss_joint(model, (x, y), (x_ood, y), tc, LossWeights(gamma), "forward"),
        "adaptive": adaptive_attack_loss(model, x, (y + 1) % k, tc),
    }


def test_c3_gradient_oracle(record_property):
    rng = np.random.default_rng(SEED)
    start = time.perf_counter()
    worst = {}
    for seed in range(100):
        model, losses = _random_losses(rng, seed)
        wrt = list(model.params) + ["x"]
        for name, bound in losses.items():
            err = finite_diff_check(model, bound.feed, bound.node, h=1e-5, wrt=wrt)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 120.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    verdict(record_property, "C3 finite differences on 100 models (<1e-4 rel, <120s)", ok, detail)


# -- 4 ------------------------------------------------------------------------------


def test_c4_attack_constraints(record_property):
    rng = np.random.default_rng(SEED)
    models = [mlp(4, 3, hidden=(int(rng.integers(3, 9)),), seed=s) for s in range(20)]
    for m in models:
        m.set_params({k: rng.normal(0.0, 0.1, v.shape) for k, v in m.params.items() if k.startswith("b")})
    violations = []
    stationary = 0
    worst_excess = -np.inf
    checked = 0
    i = -1
    while checked < 10_000:
        i += 1
        model = models[i % len(models)]
        lo = float(rng.uniform(-1.0, 0.0))
        domain = (lo, lo + float(rng.uniform(0.5, 2.0)))
        n = int(rng.integers(1, 4))
        x = rng.uniform(*domain, size=(n, 4))
        target = rng.integers(0, 3, n)
        eps = float(np.exp(rng.uniform(np.log(1e-3), np.log(2.0))))
        norm = [1, 2, np.inf][int(rng.integers(0, 3))]
        kind = ["nll_target", "rkl_target_dirichlet"][int(rng.integers(0, 2))]
        which = int(rng.integers(0, 3))
        if which == 0:
            norm = np.inf
            res = fgsm(model, x, target, eps, kind, domain=domain)
        elif which == 1:
            try:
                res = fgm(model, x, target, eps, norm, kind, domain=domain)
            except StationaryInputError:
                # documented outcome for a vanishing gradient; nothing to check
                stationary += 1
                continue
        else:
            cfg = AttackConfig(norm=norm, epsilon=eps, steps=int(rng.integers(1, 6)),
                               step_size=eps * float(rng.uniform(0.1, 1.5)),
                               momentum=float(rng.choice([0.0, 1.0])), loss_kind=kind, domain=domain)
            res = iterative_attack(model, x, target, cfg)
        checked += 1
        excess = lp_norm(res.x_adv - x, norm) - eps
        worst_excess = max(worst_excess, float(excess.max()))
        in_domain = res.x_adv.min() >= domain[0] and res.x_adv.max() <= domain[1]
        if excess.max() > 1e-9 or not in_domain:
            violations.append(i)

    mismatches = 0
    for i in range(500):
        model = models[i % len(models)]
        x = rng.uniform(size=(3, 4))
        target = rng.integers(0, 3, 3)
        eps = float(rng.uniform(1e-3, 0.5))
        kind = ["nll_target", "rkl_target_dirichlet"][i % 2]
        cfg = AttackConfig(epsilon=eps, steps=1, momentum=0.0, step_size=eps, loss_kind=kind)
        a = iterative_attack(model, x, target, cfg).x_adv
        b = fgsm(model, x, target, eps, kind).x_adv
        mismatches += a.tobytes() != b.tobytes()

    ok = not violations and mismatches == 0
    verdict(record_property, "C4 attack constraint fuzz (1e4 runs) + BIM(1 step) == FGSM", ok,
            f"{checked} checked, {len(violations)} violations, max ||d||-eps {worst_excess:.1e}, "
            f"{stationary} stationary FGM inputs skipped, "
            f"{mismatches}/500 FGSM bit mismatches")


# -- 5 ------------------------------------------------------------------------------


def test_c5_degenerate_equivalences(record_property):
    rng = np.random.default_rng(SEED)
    model = mlp(3, 3, hidden=(8, 8), seed=5)
    x = rng.uniform(size=(6, 3))
    y = rng.integers(0, 3, 6)
    tc = TargetConcentration(100.0, 1.0, 3)
    alone = loss_reverse_kl(model, x, target_alpha(y, tc)).value()
    joint = loss_joint(model, (x, y), (rng.uniform(size=(6, 3)), None), tc, LossWeights(0.0)).value()

    soft = soft_constraint_attack(model, x, (y + 1) % 3, AttackConfig(soft_c=1e6, steps=20, step_size=0.05))
    soft_dist = float(np.max(lp_norm(soft.x_adv - x, 2)))

    zero = fgsm(model, x, (y + 1) % 3, 0.0)
    ok = joint == alone and soft_dist < 1e-3 and np.array_equal(zero.x_adv, x)
    verdict(record_property, "C5 degenerate equivalences", ok,
            f"gamma=0 joint-in diff {joint - alone:.1e}, soft_c=1e6 max L2 {soft_dist:.1e}, "
            f"eps=0 FGSM identity {np.array_equal(zero.x_adv, x)}")


# -- 6 and 7: desk-scale detection experiment ------------------------------------------------

TOY_SEED = 1
TOY_EPOCHS = 60


def _toy_cfg(**kw):
    return TrainConfig(eta0=1e-2, epochs=TOY_EPOCHS, cycle_length=42, batch_size=64, seed=TOY_SEED, **kw)


@pytest.fixture(scope="module")
def toy_experiment():
    start = time.perf_counter()
    data, _ = gen_synthetic(SyntheticSpec(seed=TOY_SEED))
    pn = mlp(2, 3, hidden=(64, 64), seed=TOY_SEED)
    train_pn_adversarial(pn, data, _toy_cfg(beta_in=100.0, beta_adv=1.0, gamma=30.0, ood_source="fgsm_adv"))
    dnn = mlp(2, 3, hidden=(64, 64), seed=TOY_SEED)
    train_standard(dnn, data, _toy_cfg(), "dnn_nll")
    targets = select_target_class(np.random.default_rng(TOY_SEED), data.test.y, 3)
    return {"data": data, "pn": pn, "dnn": dnn, "targets": targets, "train_time": time.perf_counter() - start}


def _mim(model, x, targets, eps, loss_kind):
    return iterative_attack(model, x, targets, AttackConfig(epsilon=eps, steps=10, momentum=1.0, loss_kind=loss_kind))


def test_c6_detection_experiment(record_property, toy_experiment):
    start = time.perf_counter()
    test = toy_experiment["data"].test
    pn, dnn, targets = toy_experiment["pn"], toy_experiment["dnn"], toy_experiment["targets"]
    acc = float(np.mean(predict(pn, test.x) == test.y))

    adv_pn = _mim(pn, test.x, targets, 0.3, "rkl_target_dirichlet")
    auc_pn = auroc(uncertainty_scores(pn, adv_pn.x_adv, "mutual_information"),
                   uncertainty_scores(pn, test.x, "mutual_information"))
    adv_dnn = _mim(dnn, test.x, targets, 0.3, "nll_target")
    auc_dnn = auroc(uncertainty_scores(dnn, adv_dnn.x_adv, "predictive_entropy", head="softmax"),
                    uncertainty_scores(dnn, test.x, "predictive_entropy", head="softmax"))
    elapsed = toy_experiment["train_time"] + time.perf_counter() - start
    ok = acc >= 0.95 and auc_pn > auc_dnn and auc_pn >= 0.85 and elapsed < 600
    verdict(record_property, "C6 toy detection: PN-adv MI vs DNN entropy (MIM eps=0.3)", ok,
            f"acc {acc:.3f}, AUROC PN {auc_pn:.4f} vs DNN {auc_dnn:.4f}, "
            f"attack success PN {adv_pn.success.mean():.2f} DNN {adv_dnn.success.mean():.2f}, {elapsed:.0f}s")


def test_c7_interpolated_precision(record_property, toy_experiment):
    test = toy_experiment["data"].test
    pn, targets = toy_experiment["pn"], toy_experiment["targets"]

    def mean_alpha0(x):
        return float(np.mean(np.sum(forward_alpha(pn, x), axis=1)))

    natural = mean_alpha0(test.x)
    small = mean_alpha0(_mim(pn, test.x, targets, 0.01, "rkl_target_dirichlet").x_adv)
    large = mean_alpha0(_mim(pn, test.x, targets, 0.3, "rkl_target_dirichlet").x_adv)
    ok = min(natural, large) < small < max(natural, large)
    verdict(record_property, "C7 alpha0 at eps=0.01 between natural and eps=0.3", ok,
            f"natural {natural:.2f}, eps=0.01 {small:.2f}, eps=0.3 {large:.2f}")


# -- 8 ------------------------------------------------------------------------------


def _pipeline(root):
    root.mkdir()
    (root / "data.cfg").write_text("points_per_class = 50\ntest_per_class = 30\n")
    (root / "train.cfg").write_text(
        "eta0 = 0.01\nepochs = 5\ncycle_length = 4\nbatch_size = 32\nbeta_in = 100\n"
        "beta_adv = 1\ngamma = 30\nood_source = fgsm_adv\ndropout_keep = 0.8\n"
    )
    steps = [
        ["gen-data", "--config", str(root / "data.cfg"), "--seed", "4", "--out", str(root / "data")],
        ["train", "--config", str(root / "train.cfg"), "--data", str(root / "data"), "--seed", "7",
         "--hidden", "16,16", "--out", str(root / "model")],
        ["attack", "--data", str(root / "data"), "--checkpoint", str(root / "model"), "--seed", "2",
         "--out", str(root / "attack")],
        ["evaluate", "--data", str(root / "data"), "--checkpoint", str(root / "model"),
         "--attacks", str(root / "attack"), "--out", str(root / "eval")],
    ]
    codes = [run(argv) for argv in steps]
    files = {}
    for part in ("data", "model", "attack", "eval"):
        for path in sorted((root / part).iterdir()):
            if path.name != "manifest.json":
                files[f"{part}/{path.name}"] = path.read_bytes()
    return codes, files


def test_c8_reproducibility(record_property, tmp_path):
    codes_a, files_a = _pipeline(tmp_path / "a")
    codes_b, files_b = _pipeline(tmp_path / "b")
    differing = [k for k in files_a if files_a[k] != files_b.get(k)]
    bad_rows = [key for key, cfg in TABLE2.items() if parse_config(format_config(cfg)) != cfg]
    ok = codes_a == codes_b == [0, 0, 0, 0] and not differing and set(files_a) == set(files_b) and not bad_rows
    verdict(record_property, "C8 bit-identical seeded pipeline + reference config round-trip", ok,
            f"{len(files_a)} artifacts, {len(differing)} differ; "
            f"{len(TABLE2) - len(bad_rows)}/{len(TABLE2)} reference config rows round-trip")


# -- 9 ------------------------------------------------------------------------------


def test_c9_auroc_exact(record_property):
    rng = np.random.default_rng(SEED)
    mismatches = 0
    for i in range(100):
        n_a, n_b = (int(v) for v in rng.integers(1, 501, size=2))
        if i % 2:
            # coarse scores force many ties
            a, b = rng.integers(0, 10, n_a).astype(float), rng.integers(0, 10, n_b).astype(float)
        else:
            a, b = rng.normal(0.5, 1.0, n_a), rng.normal(0.0, 1.0, n_b)
        mismatches += auroc(a, b) != auroc_bruteforce(a, b)
    verdict(record_property, "C9 AUROC equals O(n^2) brute force", mismatches == 0,
            f"{100 - mismatches}/100 instances identical")
