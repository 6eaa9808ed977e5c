"""
A tiny reverse-mode autodiff engine
===================================

Graphs are built once and evaluated many times.  Each forward pass
returns an ``Evaluation`` holding every intermediate value, and
``backward`` turns it into gradients for all parameters and float inputs.
"""

import tempfile
from pathlib import Path

import numpy as np

from dpnkit.autodiff import Graph, finite_diff_check, load_checkpoint, save_checkpoint

# %%
# Softmax regression by hand

g = Graph()
x = g.input("x")
labels = g.input("y", dtype=np.int64)
w = g.parameter("W", np.zeros((2, 3)))
b = g.parameter("b", np.zeros(3))
logits = g.add(g.matmul(x, w), b)
loss = g.mean(g.softmax_nll(logits, labels))

feed = {"x": np.array([[1.0, 0.5]]), "y": np.array([0])}
ev = g.forward(feed)
grads = g.backward(ev, loss)
print("loss at zero weights:", float(ev[loss]), "(ln 3 =", np.log(3), ")")
print("d loss / d b:", grads["b"])  # softmax minus one-hot: [-2/3, 1/3, 1/3]

# A few steps of gradient descent on a toy batch.
rng = np.random.default_rng(0)
feed = {"x": rng.normal(size=(30, 2)), "y": rng.integers(0, 3, 30)}
feed["x"][np.arange(30), feed["y"] % 2] += 2.0 * (feed["y"] - 1)
for step in range(200):
    ev = g.forward(feed, [loss])
    for name, grad in g.backward(ev, loss).items():
        if name in g.params:
            g.params[name] -= 0.5 * grad
print("loss after 200 steps:", float(g.forward(feed, [loss])[loss]))

# %%
# Checking gradients
# ------------------
# Central differences against backprop, scaled per tensor.
print("finite-difference error:", finite_diff_check(g, feed, loss))

# %%
# Checkpoints are a small little-endian binary format.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "softmax.dpn"
    save_checkpoint(path, g.params)
    restored = load_checkpoint(path)
    print(f"checkpoint: {path.stat().st_size} bytes,", {k: v.shape for k, v in restored.items()})
