"""A guided tour of the tensor core.

Builds a tiny computation, runs reverse-mode backward, and checks the result
against the finite-difference oracle — the same procedure the test suite
applies to every operation.
"""

import numpy as np

from modt import tensor as T
from modt.tensor import Tensor, finite_difference_grad

# A two-layer scalar network: y = sum(sigmoid(W2 @ relu(W1 @ x)))
rng = np.random.default_rng(0)
w1 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w2 = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
x = Tensor(rng.normal(size=(3, 1)))

y = T.sigmoid(T.matmul(w2, T.relu(T.matmul(w1, x)))).sum()
print(f"forward value: {y.item():.6f}")

y.backward()
print("dL/dW1:\n", w1.grad)

# The oracle: central differences, never touching the tape.
def f(w):
    return T.sigmoid(T.matmul(w2, T.relu(T.matmul(w, x)))).sum()

numeric = finite_difference_grad(f, Tensor(w1.numpy()))
err = np.max(np.abs(w1.grad - numeric) / np.maximum(1.0, np.abs(w1.grad)))
print(f"max relative error vs finite differences: {err:.2e}")
assert err < 1e-5
print("backward rule verified.")
