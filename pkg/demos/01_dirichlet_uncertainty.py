"""
Dirichlet uncertainty measures
==============================

A Prior Network outputs the concentration parameters of a Dirichlet over
class probabilities.  Three shapes of output tell different stories:
a sharp Dirichlet on one corner (confident), a sharp Dirichlet in the
middle (the data is ambiguous), and a flat Dirichlet (the model does not
know).  Total uncertainty splits into an expected-entropy part and a
mutual-information part, and only the latter separates the last two.
"""

import numpy as np

from dpnkit import dirichlet as D
from dpnkit.special import digamma, log_gamma

cases = {
    "confident": [101.0, 1.0, 1.0],
    "ambiguous": [100.0, 100.0, 100.0],
    "unknown": [1.0, 1.0, 1.0],
}

print(f"{'':>10} {'total':>8} {'expected':>9} {'mutual':>8} {'diff.ent':>9} {'alpha0':>7}")
for name, alpha in cases.items():
    print(f"{name:>10} {D.predictive_entropy(alpha):8.4f} {D.expected_entropy(alpha):9.4f} "
          f"{D.mutual_information(alpha):8.4f} {D.differential_entropy(alpha):9.3f} {D.precision(alpha):7.0f}")

# The closed forms rest on digamma and log-gamma, implemented from
# recurrences and asymptotic series.
print("\npsi(1) =", digamma(1.0), "  ln Gamma(0.5) =", log_gamma(0.5), "=", np.log(np.sqrt(np.pi)))

# %%
# Monte-Carlo cross-check
# -----------------------
# Each closed form has an independent sampling estimator.  The KL below is
# the divergence of the sharp in-domain target from the flat one.

rng = np.random.default_rng(0)
a, b = [101.0] + [1.0] * 9, [1.0] * 10
est = D.mc_kl(rng, a, b, n=200_000)
exact = D.dirichlet_kl(a, b)
print(f"\nKL closed form {exact:.4f}, Monte-Carlo {est.mean:.4f} +/- {est.stderr:.4f}"
      f" ({abs(est.mean - exact) / est.stderr:.1f} SE)")

# Everything vectorises over a leading batch axis.
batch = np.array(list(cases.values()))
print("mutual information per row:", np.round(D.mutual_information(batch), 4))
