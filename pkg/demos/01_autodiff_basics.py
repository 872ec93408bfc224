"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a small expression graph, pull gradients back through it, and
confirm them against central finite differences.
"""

import numpy as np

from warpfit.tensor import Tensor, backward, matmul, sigmoid, use_dtype
from warpfit.gradcheck import check_gradients

# Tensors wrap numpy arrays; requires_grad marks the leaves we will
# differentiate with respect to.
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

# Any composition of the supported ops builds a graph behind the scenes.
y = sigmoid(matmul(x, w))
loss = (y * y).sum()
print("loss:", float(loss.data))

# backward walks the graph once in reverse topological order and fills
# .grad on every leaf that asked for it.
backward(loss)
print("x.grad shape:", x.grad.shape)
print("w.grad shape:", w.grad.shape)

# The same gradient, measured numerically: nudge one entry of w by +/-h
# and take the centered difference of the loss. The probe runs in
# float64; the default float32 graph would swallow a 1e-6 nudge.
h = 1e-6


def loss_at(wv):
    with use_dtype(np.float64):
        return float((sigmoid(matmul(Tensor(x.data), Tensor(wv))) ** 2).sum().data)


probe = np.zeros_like(w.data, dtype=np.float64)
probe[1, 0] = h
numeric = (loss_at(w.data.astype(np.float64) + probe)
           - loss_at(w.data.astype(np.float64) - probe)) / (2 * h)
print("w.grad[1,0] analytic %.8f vs numeric %.8f" % (w.grad[1, 0], numeric))

# check_gradients automates that comparison over every input element,
# in float64, and reports the worst relative error.
with use_dtype(np.float64):
    err = check_gradients(
        lambda a, b: (sigmoid(matmul(a, b)) ** 2).sum(),
        rng.standard_normal((3, 4)), rng.standard_normal((4, 2)))
print("worst relative error over all elements: %.2e" % err)

# Broadcasting works like numpy, and gradients sum back over the
# broadcast axes automatically.
bias = Tensor(np.zeros(2), requires_grad=True)
out = (Tensor(rng.standard_normal((5, 2))) + bias).sum()
backward(out)
print("bias.grad (one per column, summed over 5 rows):", bias.grad)
