"""The gradient tape under the model: record ops, run backward, and
verify a gradient against central finite differences by hand.
"""

import numpy as np

from stationcast.autodiff import GradientTape, Tensor, layer_norm, matmul, softmax

rng = np.random.default_rng(0)

# a two-layer toy network on the tape
x = Tensor(rng.normal(size=(4, 3)), name="x")
w1 = Tensor(rng.normal(size=(3, 5)), name="w1")
w2 = Tensor(rng.normal(size=(5, 2)), name="w2")
gain = Tensor(np.ones(5), name="gain")
bias = Tensor(np.zeros(5), name="bias")


def forward():
    h = layer_norm(matmul(x, w1), gain, bias)
    return (softmax(matmul(h, w2), axis=-1) ** 2.0).sum()


with GradientTape() as tape:
    loss = forward()
tape.backward(loss)
print(f"loss = {loss.item():.6f}")
print(f"tape recorded {len(tape.nodes)} ops; w1.grad norm = {np.linalg.norm(w1.grad):.4f}")

# independent check: central finite differences on one entry of w1
i, j = 1, 2
h = 1e-5
orig = w1.data[i, j]
w1.data[i, j] = orig + h
up = forward().item()
w1.data[i, j] = orig - h
down = forward().item()
w1.data[i, j] = orig
numeric = (up - down) / (2 * h)
print(f"w1[{i},{j}]: tape {w1.grad[i, j]:+.8f}  finite-diff {numeric:+.8f}")

# gradients accumulate until cleared, which is what the optimizer relies on
with GradientTape() as tape2:
    loss2 = forward()
tape2.backward(loss2)
print(f"after a second backward, w1.grad norm doubles: {np.linalg.norm(w1.grad):.4f}")
