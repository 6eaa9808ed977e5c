"""
Prior Network targets and losses
================================

In-domain inputs are trained towards a sharp Dirichlet on their class,
out-of-domain inputs towards the flat Dirichlet.  The reverse KL
(model || target) is the loss used for adversarial training.
"""

import numpy as np

from dpnkit.priornet import (
    LossWeights,
    TargetConcentration,
    flat_alpha,
    forward_alpha,
    loss_forward_kl,
    loss_joint,
    loss_nll,
    loss_reverse_kl,
    mlp,
    target_alpha,
)

tc = TargetConcentration(beta_in=100.0, beta_ood=1.0, num_classes=4)
print("in-domain target, class 0:", target_alpha(0, tc))
print("wide target, class 2:     ", target_alpha(2, tc, domain="ood"))
print("flat target:              ", flat_alpha(4))

model = mlp(in_dim=2, num_classes=4, hidden=(16, 16), seed=0)
rng = np.random.default_rng(1)
x_in, y_in = rng.uniform(size=(8, 2)), rng.integers(0, 4, 8)
x_ood = rng.uniform(-1, 2, size=(8, 2))

print("\nuntrained alpha for one input:", np.round(forward_alpha(model, x_in[0]), 3))

target = target_alpha(y_in, tc)
for name, bound in [
    ("nll", loss_nll(model, x_in, y_in)),
    ("forward KL", loss_forward_kl(model, x_in, target)),
    ("reverse KL", loss_reverse_kl(model, x_in, target)),
]:
    value, grads = bound.value_and_grad()
    print(f"{name:>11}: {value:9.3f}   |grad W0| = {np.linalg.norm(grads['W0']):.3f}")

# The joint loss is one batch with two blocks of row weights: 1/N for
# in-domain rows and gamma/N for out-of-domain rows.
for gamma in (0.0, 10.0):
    joint = loss_joint(model, (x_in, y_in), (x_ood, None), tc, LossWeights(gamma))
    print(f"joint loss, gamma={gamma:>4}: {joint.value():.3f}")
