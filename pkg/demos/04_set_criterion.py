"""The set criterion: Hungarian matching plus a matched-pair loss.

Predictions are a set; nothing ties slot i to ground truth i.  Each layer
is first matched one-to-one by segment overlap and confidence, then the
loss reads focal confidence terms over all slots and gIoU terms over the
matched pairs.  Summation order is normalized, so the total is bitwise
invariant under any reordering of predictions or ground truths.
"""

import numpy as np

from personcap.autodiff import Tape, Tensor, backward
from personcap.criterion import LayerPrediction, set_loss
from personcap.matching import hungarian

rng = np.random.default_rng(11)

# ---------------------------------------------------------------------------
# assignment on a small cost matrix

cost = np.array([[4.0, 1.0, 3.0],
                 [2.0, 0.0, 5.0],
                 [3.0, 2.0, 2.0]])
assign = hungarian(cost)
print("cost matrix:\n", cost)
print("optimal pairs:", assign.pairs, " total", assign.total_cost(cost))

# ---------------------------------------------------------------------------
# the criterion over one decoder layer

gt = np.array([[0.10, 0.40],
               [0.55, 0.90]])
segments = Tensor(np.array([[0.50, 0.85],     # near gt 1
                            [0.05, 0.45],     # near gt 0
                            [0.30, 0.60]]),   # spurious
                  requires_grad=True)
confidence = Tensor(np.array([0.8, 0.7, 0.6]), requires_grad=True)

with Tape():
    total, (assign,) = set_loss([LayerPrediction(segments, confidence)], gt)
    backward(total)
print("\nmatched (prediction, ground truth):", assign.pairs)
print("unmatched predictions:", assign.unmatched)
print("loss:", round(total.item(), 6))
print("gradient pushes starts/ends of matched slots:\n",
      np.round(segments.grad, 3))

# ---------------------------------------------------------------------------
# permutation invariance, bitwise


def loss_under(p_order, g_order):
    layer = LayerPrediction(Tensor(segments.data[p_order]),
                            Tensor(confidence.data[p_order]))
    with Tape():
        value, _ = set_loss([layer], gt[g_order])
    return value.item()


base = loss_under(np.arange(3), np.arange(2))
shuffled = loss_under(np.array([2, 0, 1]), np.array([1, 0]))
print("\nshuffled slots and ground truths:", shuffled == base,
      f"({base!r} both ways)")

# ---------------------------------------------------------------------------
# better segments, smaller loss

closer = Tensor(np.array([[0.55, 0.90], [0.10, 0.40], [0.30, 0.60]]))
with Tape():
    improved, _ = set_loss([LayerPrediction(closer, Tensor(confidence.data))],
                           gt)
print("after snapping the two matched slots onto their targets:",
      round(improved.item(), 6), "<", round(total.item(), 6))
