"""A walk through the tape-based autodiff engine.

Everything downstream (attention, the criterion, the trainer) rests on
three ideas shown here: ops record onto an active tape in execution order,
``backward`` replays that record in reverse, and gradients accumulate on
the tensors that asked for them.
"""

import numpy as np

from personcap import autodiff as ad
from personcap.autodiff import Tape, Tensor, backward

rng = np.random.default_rng(0)

# a tensor is a dense float array plus an optional gradient slot
w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
x = ad.constant(rng.standard_normal((4, 3)))
print("w:", w)
print("x:", x)

# ops only record while a tape is open; this context is the whole API
with Tape():
    h = ad.relu(ad.matmul(x, w))     # [4, 2]
    loss = ad.sum_all(ad.mul(h, h))  # scalar
backward(loss)

print("loss:", loss.item())
print("dloss/dw:\n", w.grad)

# the hand derivative of sum(relu(xw)^2) is x^T (2 relu(xw) * 1[xw > 0])
pre = x.data @ w.data
by_hand = x.data.T @ (2.0 * np.maximum(pre, 0.0) * (pre > 0.0))
print("matches the hand formula:", bool(np.allclose(w.grad, by_hand)))

# using a tensor twice accumulates both contributions
a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
with Tape():
    twice = ad.sum_all(a + a)
backward(twice)
print("d(sum(a + a))/da:", a.grad)          # [2, 2]

# outside a tape the same ops compute values but record nothing
b = Tensor(np.array([3.0]), requires_grad=True)
silent = ad.mul(b, b)
print("untaped product:", silent.data, " grad still", b.grad)

# gradients keep accumulating until zero_grad; optimizers rely on this
with Tape():
    backward(ad.sum_all(a * 1.0))
print("after a second backward:", a.grad)   # [3, 3]
a.zero_grad()
print("after zero_grad:", a.grad)
