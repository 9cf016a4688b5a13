"""Reverse-mode gradients on a tiny network, checked against finite differences."""

import numpy as np

from shiftalign import autodiff as ad
from shiftalign.autodiff import Tape

rng = np.random.default_rng(0)
x = rng.normal(size=(5, 3))
labels = np.array([0, 1, 2, 1, 0])
W0 = rng.normal(size=(3, 4))


def loss_of(W):
    tape = Tape()
    w = tape.param("W", W)
    h = ad.relu(ad.matmul(tape.const(x), w))
    loss = ad.mean(ad.softmax_cross_entropy(ad.matmul(h, tape.const(np.ones((4, 3)))), labels))
    return tape, loss


tape, loss = loss_of(W0)
grad = tape.backward(loss)["W"]

# central differences, one entry at a time
numeric = np.zeros_like(W0)
for idx in np.ndindex(W0.shape):
    up, down = W0.copy(), W0.copy()
    up[idx] += 1e-5
    down[idx] -= 1e-5
    numeric[idx] = (float(loss_of(up)[1].value) - float(loss_of(down)[1].value)) / 2e-5

print("loss:", float(loss.value))
print("max |analytic - numeric|:", np.abs(grad - numeric).max())
