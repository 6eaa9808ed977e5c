"""Command-line pipeline: gen-data -> train -> attack -> evaluate, plus oracle-check.

Every command writes into ``--out DIR`` (guarded by a lock file) and
finishes with ``manifest.json``: the resolved arguments, the config text,
the seed and a SHA-256 digest of each artifact.  ``--replay MANIFEST``
re-runs a command from its manifest.

Exit codes: 0 success, 1 runtime failure, 2 usage / configuration error,
3 output directory locked by another run.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import attacks as atk
from .autodiff import finite_diff_check, load_checkpoint, save_checkpoint
from .data import DatasetSplit, Split, SyntheticSpec, gen_synthetic, load_csv, save_csv
from .detection import MEASURES, joint_report, write_report_csv, write_report_json
from .priornet import (
    LossWeights,
    TargetConcentration,
    loss_forward_kl,
    loss_joint,
    loss_nll,
    loss_reverse_kl,
    mlp,
    mlp_from_params,
    target_alpha,
)
from .training import (
    ConfigError,
    format_config,
    parse_config,
    train_dnn_adversarial,
    train_pn_adversarial,
    train_standard,
    write_history,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_LOCKED = 0, 1, 2, 3

COMMANDS = ("train", "attack", "evaluate", "gen-data", "oracle-check")
MODELS = {"dnn": "dnn_nll", "pn-kl": "pn_kl", "pn-rkl": "pn_rkl"}
LOCK_NAME = ".dpnkit.lock"


class UsageError(Exception):
    pass


class LockedError(Exception):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="dpnkit", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS, help="omit when using --replay")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--model", choices=sorted(MODELS), default="pn-rkl")
    p.add_argument("--attack", choices=("fgsm", "fgm", "bim", "mim", "soft"), default="mim")
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--norm", choices=("1", "2", "inf"), default="inf")
    p.add_argument("--measure", action="append", choices=MEASURES)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--data", help="directory written by gen-data")
    p.add_argument("--checkpoint", help="directory written by train")
    p.add_argument("--attacks", help="directory written by attack")
    p.add_argument("--hidden", default="64,64", help="comma-separated hidden widths")
    p.add_argument("--replay", help="re-run the command recorded in this manifest")
    p.add_argument("--quick", action="store_true", help="oracle-check: small smoke-test sizes")
    return p


# -- helpers -------------------------------------------------------------------


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@contextmanager
def _locked(out):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out} is in use by another run ({lock} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _write_manifest(out, args, config_text, seed, artifacts):
    manifest = {
        "command": args.command,
        "args": {k: v for k, v in vars(args).items() if k not in ("replay",)},
        "config": config_text,
        "seed": seed,
        "artifacts": {name: _digest(out / name) for name in sorted(artifacts)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} needs --{name}")


def _parse_kv(text, cls):
    """Generic ``key = value`` parser for simple dataclasses (used for SyntheticSpec)."""
    known = {f.name: f for f in fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = known[key].default
        try:
            if key == "means":
                values[key] = tuple(tuple(float(v) for v in pt.split(",")) for pt in value.split(";"))
            elif isinstance(default, tuple):
                values[key] = tuple(float(v) for v in value.split(","))
            elif isinstance(default, int):
                values[key] = int(value)
            else:
                values[key] = float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key!r}") from None
    return cls(**values)


def _read_text(path):
    if path is None:
        return ""
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def _load_data(directory):
    d = Path(directory)
    x, y = load_csv(d / "train.csv")
    meta = json.loads((d / "dataset.json").read_text())
    parts = {}
    for name in ("valid", "test"):
        if (d / f"{name}.csv").exists():
            parts[name] = Split(*load_csv(d / f"{name}.csv"))
    ood = load_csv(d / "ood.csv")[0] if (d / "ood.csv").exists() else None
    return DatasetSplit(Split(x, y), meta["num_classes"], parts.get("valid"), parts.get("test")), ood


def _load_model(directory):
    d = Path(directory)
    info = json.loads((d / "model.json").read_text())
    model = mlp_from_params(load_checkpoint(d / "model.dpn"), activation=info["activation"])
    return model, info


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args, out):
    text = _read_text(args.config)
    spec = _parse_kv(text, SyntheticSpec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    data, ood = gen_synthetic(spec)
    written = ["train.csv", "ood.csv", "dataset.json"]
    save_csv(out / "train.csv", data.train.x, data.train.y)
    for name in ("valid", "test"):
        part = getattr(data, name)
        if part is not None:
            save_csv(out / f"{name}.csv", part.x, part.y)
            written.append(f"{name}.csv")
    save_csv(out / "ood.csv", ood)
    (out / "dataset.json").write_text(json.dumps({"num_classes": data.num_classes, "spec": asdict(spec)}) + "\n")
    return text, spec.seed, written


def cmd_train(args, out):
    _require(args, "data", "config")
    text = _read_text(args.config)
    cfg = parse_config(text)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    data, ood = _load_data(args.data)
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    model = mlp(data.train.x.shape[1], data.num_classes, hidden, seed=cfg.seed, dropout_keep=cfg.dropout_keep)
    objective = MODELS[args.model]
    if cfg.ood_source == "fgsm_adv":
        if objective == "dnn_nll":
            _, history = train_dnn_adversarial(model, data, cfg)
        elif objective == "pn_rkl":
            _, history = train_pn_adversarial(model, data, cfg)
        else:
            raise UsageError("adversarial training is defined for --model dnn and pn-rkl")
    else:
        ood_x = ood if cfg.gamma > 0 else None
        _, history = train_standard(model, data, cfg, objective, ood_x)
    save_checkpoint(out / "model.dpn", model.params)
    write_history(out / "history.csv", history)
    info = {"model": args.model, "hidden": list(hidden), "activation": "relu", "dropout_keep": cfg.dropout_keep,
            "beta_in": cfg.beta_in}
    (out / "model.json").write_text(json.dumps(info, sort_keys=True) + "\n")
    return format_config(cfg), cfg.seed, ["model.dpn", "history.csv", "model.json"]


def cmd_attack(args, out):
    _require(args, "data", "checkpoint")
    model, info = _load_model(args.checkpoint)
    data, _ = _load_data(args.data)
    split = data.test if data.test is not None else data.train
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    targets = atk.select_target_class(rng, split.y, data.num_classes)
    is_pn = info["model"] != "dnn"
    loss_kind = "rkl_target_dirichlet" if is_pn else "nll_target"
    beta = info.get("beta_in") or 100.0
    norm = "inf" if args.norm == "inf" else int(args.norm)
    momentum = {"bim": 0.0, "mim": 1.0}.get(args.attack, 0.0)
    cfg = atk.AttackConfig(norm=norm, epsilon=args.eps, steps=args.steps, momentum=momentum,
                           soft_c=1.0, loss_kind=loss_kind, target_concentration=beta)
    if args.attack == "fgsm":
        res = atk.fgsm(model, split.x, targets, args.eps, loss_kind, target_concentration=beta)
    elif args.attack == "fgm":
        res = atk.fgm(model, split.x, targets, args.eps, norm, loss_kind, target_concentration=beta)
    elif args.attack == "soft":
        res = atk.soft_constraint_attack(model, split.x, targets, cfg)
    else:
        res = atk.iterative_attack(model, split.x, targets, cfg)
    atk.write_manifest(out / "attacks.jsonl", res, args.eps, norm)
    save_csv(out / "adversarial.csv", res.x_adv, split.y)
    return "", seed, ["attacks.jsonl", "adversarial.csv"]


def cmd_evaluate(args, out):
    _require(args, "data", "checkpoint", "attacks")
    model, info = _load_model(args.checkpoint)
    data, _ = _load_data(args.data)
    split = data.test if data.test is not None else data.train
    x_adv, _ = load_csv(Path(args.attacks) / "adversarial.csv")
    records = [json.loads(line) for line in (Path(args.attacks) / "attacks.jsonl").read_text().splitlines()]
    success = np.array([r["success"] for r in records], dtype=bool)
    eps = np.array([r["epsilon"] for r in records])
    head = "softmax" if info["model"] == "dnn" else "dirichlet"
    measures = args.measure or (["max_prob", "predictive_entropy"] if head == "softmax"
                                else ["max_prob", "predictive_entropy", "mutual_information", "alpha0"])
    reports = joint_report(model, split.x, split.y, x_adv, success, measures, head, eps)
    write_report_json(out / "report.json", reports)
    write_report_csv(out / "report.csv", reports)
    for rep in reports:
        print(f"{rep.measure:>22s}  AUROC {rep.auroc:.4f}  success {rep.attack_success_rate:.3f}")
    return "", 0 if args.seed is None else args.seed, ["report.json", "report.csv"]


def _random_pair(rng):
    k = int(rng.integers(2, 11))
    lo, hi = np.log(0.1), np.log(100.0)
    return np.exp(rng.uniform(lo, hi, k)), np.exp(rng.uniform(lo, hi, k))


def _random_model_losses(rng, seed):
    d, k = (int(v) for v in rng.integers(2, 5, size=2))
    model = mlp(d, k, hidden=(int(rng.integers(3, 7)),), seed=seed)
    model.set_params({n: rng.normal(0.0, 0.1, v.shape) for n, v in model.params.items() if n.startswith("b")})
    n = int(rng.integers(1, 4))
    x = rng.random((n, d))
    y = rng.integers(0, k, n)
    tc = TargetConcentration(100.0, 1.0, k)
    t = target_alpha(y, tc)
    losses = {
        "nll": loss_nll(model, x, y),
        "forward_kl": loss_forward_kl(model, x, t),
        "reverse_kl": loss_reverse_kl(model, x, t),
        "joint": loss_joint(model, (x, y), (rng.random((n, d)), None), tc, LossWeights(float(rng.uniform(0, 30)))),
        "adaptive": atk.adaptive_attack_loss(model, x, (y + 1) % k, tc),
    }
    return model, losses


def oracle_suite(seed=0, pairs=50, n_mc=1_000_000, models=100):
    """Monte-Carlo, special-function and finite-difference oracles.

    Returns ``(name, ok, detail)`` rows.  The defaults are the full
    suite (about 90 s); smaller arguments give a quick smoke run.
    """
    from scipy import special as sp

    from . import dirichlet as dm
    from .special import digamma, log_gamma

    rng = np.random.default_rng(seed)
    rows = []
    worst = {"kl": 0.0, "expected_entropy": 0.0, "differential_entropy": 0.0}
    for _ in range(pairs):
        a, b = _random_pair(rng)
        lp = dm.sample_log_dirichlet(rng, a, n_mc)
        for name, est, val in (
            ("kl", dm.mc_kl(rng, a, b, log_pi=lp), dm.dirichlet_kl(a, b)),
            ("expected_entropy", dm.mc_expected_entropy(rng, a, log_pi=lp), dm.expected_entropy(a)),
            ("differential_entropy", dm.mc_differential_entropy(rng, a, log_pi=lp), dm.differential_entropy(a)),
        ):
            worst[name] = max(worst[name], abs(est.mean - val) / est.stderr)
    for name, z in worst.items():
        rows.append((f"mc:{name}", z <= 3.0, f"worst {z:.2f} SE over {pairs} pairs"))

    xs = np.logspace(-3, 6, 200)
    psi_err = float(np.max(np.abs(digamma(xs) - sp.digamma(xs))))
    ref = sp.gammaln(xs)
    nz = np.abs(ref) > 0
    lg_err = float(np.max(np.abs(log_gamma(xs) - ref)[nz] / np.abs(ref[nz])))
    rows.append(("special:digamma", psi_err < 1e-12, f"max abs {psi_err:.2e} vs scipy"))
    rows.append(("special:lgamma", lg_err < 1e-12, f"max rel {lg_err:.2e} vs scipy"))

    worst_fd = {}
    for i in range(models):
        model, losses = _random_model_losses(rng, i)
        wrt = list(model.params) + ["x"]
        for name, bound in losses.items():
            e = finite_diff_check(model, bound.feed, bound.node, h=1e-5, wrt=wrt)
            worst_fd[name] = max(worst_fd.get(name, 0.0), e)
    for name, e in worst_fd.items():
        rows.append((f"fd:{name}", e < 1e-4, f"worst {e:.2e} over {models} models"))
    return rows


def cmd_oracle_check(args, out):
    seed = 0 if args.seed is None else args.seed
    rows = oracle_suite(seed, pairs=3, n_mc=100_000, models=5) if args.quick else oracle_suite(seed)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<28s} {detail}")
    (out / "oracle.json").write_text(json.dumps([{"check": n, "ok": bool(o), "detail": d} for n, o, d in rows],
                                                indent=1) + "\n")
    if not all(ok for _, ok, _ in rows):
        raise RuntimeError("oracle check failed")
    return "", seed, ["oracle.json"]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "oracle-check": cmd_oracle_check,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.replay:
        recorded = json.loads(Path(args.replay).read_text())["args"]
        out = args.out
        args = argparse.Namespace(**{**recorded, "replay": None})
        if out is not None:
            args.out = out
    if args.command is None:
        print("dpnkit: error: a command is required unless --replay is given", file=sys.stderr)
        return EXIT_USAGE
    if args.out is None:
        print("dpnkit: error: --out is required", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("dpnkit: error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _locked(Path(args.out)) as out:
            start = time.perf_counter()
            config_text, seed, artifacts = HANDLERS[args.command](args, out)
            _write_manifest(out, args, config_text, seed, artifacts)
            print(f"{args.command}: wrote {', '.join(artifacts)} to {out} "
                  f"in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    except (UsageError, ConfigError) as exc:
        print(f"dpnkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LockedError as exc:
        print(f"dpnkit: error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except Exception as exc:  # noqa: BLE001 - surface any pipeline failure as exit 1
        print(f"dpnkit: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
