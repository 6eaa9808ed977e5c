"""
Adversarial attacks
===================

Targeted attacks push an input towards a chosen wrong class.  Against a
Prior Network the adaptive attack also asks for a confident Dirichlet,
so the detector sees a low-uncertainty input.
"""

import numpy as np

from dpnkit.attacks import (
    AttackConfig,
    fgm,
    fgsm,
    iterative_attack,
    lp_norm,
    project_lp,
    sample_epsilon,
    select_target_class,
    soft_constraint_attack,
)
from dpnkit.data import SyntheticSpec, gen_synthetic
from dpnkit.priornet import mlp, predict
from dpnkit.training import TrainConfig, train_standard

data, _ = gen_synthetic(SyntheticSpec(seed=0))
model = mlp(2, 3, hidden=(32, 32), seed=0)
train_standard(model, data, TrainConfig(eta0=1e-2, epochs=20, cycle_length=14, batch_size=64), "dnn_nll")
x, y = data.test.x, data.test.y
print("clean accuracy:", np.mean(predict(model, x) == y))

rng = np.random.default_rng(0)
targets = select_target_class(rng, y, 3)

# %%
# One step vs many

for eps in (0.05, 0.3):
    one = fgsm(model, x, targets, eps)
    l2 = fgm(model, x, targets, eps, p=2)
    mim = iterative_attack(model, x, targets, AttackConfig(epsilon=eps, steps=10))
    print(f"eps={eps}: success FGSM {one.success.mean():.2f}, FGM-L2 {l2.success.mean():.2f}, "
          f"MIM {mim.success.mean():.2f}  (max Linf {mim.achieved_delta.max():.3f})")

# Projection onto the three supported balls.
x0, far = np.zeros(3), np.array([0.9, -0.3, 0.1])
for p in (1, 2, np.inf):
    proj = project_lp(x0, far, 0.5, p, domain=(-1, 1))
    print(f"project onto L{p} ball of radius 0.5:", np.round(proj, 3), " norm", lp_norm(proj[None], p)[0])

# %%
# Soft constraint: the budget becomes a penalty c * ||delta||_2.
for c in (0.0, 1.0, 1e6):
    res = soft_constraint_attack(model, x[:50], targets[:50], AttackConfig(soft_c=c, steps=30, step_size=0.02))
    print(f"c={c:g}: mean L2 shift {res.achieved_delta.mean():.4f}, success {res.success.mean():.2f}")

# Adversarial training draws budgets from a half-normal with sigma = 30/128.
print("\nsampled training budgets:", np.round(sample_epsilon(rng, size=6), 3))
