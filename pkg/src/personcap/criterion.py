"""Set-prediction training criterion.

Predictions are an unordered set; each decoder layer is scored by first
solving a minimum-cost assignment against the ground-truth persons and then
summing three weighted terms:

    loss = beta_giou * mean(1 - gIoU)   over matched pairs
         + beta_cls  * mean(focal)      over all predictions (matched=1, else 0)
         + beta_cap  * mean(caption CE) over matched pairs

with the final loss summed across layers.  The matching cost uses only
geometry and confidence; captions never influence who is matched to whom.

Per-term values are accumulated in sorted order, which makes the loss exactly
invariant (bitwise) under any permutation of predictions or ground truths as
long as the optimal matching is unique.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .geometry import giou1d_matrix
from .matching import Assignment, hungarian

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class MatchWeights:
    alpha_giou: float = 2.0
    alpha_cls: float = 1.0

    def __post_init__(self):
        if self.alpha_giou < 0 or self.alpha_cls < 0:
            raise ContractError("match weights must be non-negative")
        if self.alpha_giou == 0 and self.alpha_cls == 0:
            raise ContractError("match weights cannot both be zero")


@dataclass(frozen=True)
class LossWeights:
    beta_giou: float = 2.0
    beta_cls: float = 1.0
    beta_cap: float = 1.0

    def __post_init__(self):
        if min(self.beta_giou, self.beta_cls, self.beta_cap) < 0:
            raise ContractError("loss weights must be non-negative")


# ``captions_for(pairs)`` returns, per matched (pred, gt) pair, the
# teacher-forced word logits [T, V], the target token row [T], and an
# optional keep-mask over positions.
CaptionsFor = Callable[
    [list[tuple[int, int]]],
    list[tuple[Tensor, np.ndarray, np.ndarray | None]],
]


@dataclass
class LayerPrediction:
    """One decoder layer's output set."""

    segments: Tensor                    # [N, 2] start/end in [0, 1]
    confidence: Tensor                  # [N] in (0, 1)
    captions_for: CaptionsFor | None = None


def focal_loss(prob, label, alpha: float = 0.25, gamma: float = 2.0):
    """Scaled cross-entropy that down-weights easy examples (numpy, no grad)."""
    prob = np.clip(np.asarray(prob, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    label = np.asarray(label)
    p_t = np.where(label == 1, prob, 1.0 - prob)
    alpha_t = np.where(label == 1, alpha, 1.0 - alpha)
    out = -alpha_t * (1.0 - p_t) ** gamma * np.log(p_t)
    return out if out.ndim else float(out)


def focal_loss_t(confidence: Tensor, labels: np.ndarray,
                 alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Differentiable focal loss per prediction; labels are 0/1 constants."""
    y = np.asarray(labels, dtype=np.float64)
    one_minus = ad.add(ad.neg(confidence), 1.0)
    p_t = ad.add(ad.mul(confidence, ad.constant(y)),
                 ad.mul(one_minus, ad.constant(1.0 - y)))
    p_t = ad.clip(p_t, PROB_FLOOR, 1.0 - PROB_FLOOR)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    mod = ad.powc(ad.add(ad.neg(p_t), 1.0), gamma)
    return ad.mul(ad.mul(ad.constant(alpha_t), mod), ad.neg(ad.log(p_t)))


def caption_ce(word_logits: Tensor, targets: np.ndarray,
               mask: np.ndarray | None = None) -> Tensor:
    """Cross-entropy per caption, averaged over its unmasked positions."""
    if word_logits.ndim != 2:
        raise ContractError(f"caption_ce: logits must be [T, V], got {word_logits.shape}")
    t = word_logits.shape[0]
    if t == 0:
        raise ContractError("caption_ce: empty caption")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t,):
        raise ContractError(f"caption_ce: {t} logit rows vs targets {targets.shape}")
    picked = ad.take_per_row(ad.log_softmax(word_logits, axis=-1), targets)
    if mask is None:
        return ad.mul(ad.neg(ad.sum_all(picked)), 1.0 / t)
    m = np.asarray(mask, dtype=np.float64)
    n_real = m.sum()
    if n_real == 0:
        raise ContractError("caption_ce: mask removes every position")
    return ad.mul(ad.neg(ad.sum_all(ad.mul(picked, ad.constant(m)))), 1.0 / n_real)


def match_cost(pred_segments: np.ndarray, confidence: np.ndarray,
               gt_segments: np.ndarray, w: MatchWeights = MatchWeights()) -> np.ndarray:
    """[N, M] assignment cost: localization misfit plus confidence penalty."""
    pred_segments = np.asarray(pred_segments, dtype=np.float64).reshape(-1, 2)
    gt_segments = np.asarray(gt_segments, dtype=np.float64).reshape(-1, 2)
    confidence = np.asarray(confidence, dtype=np.float64).reshape(-1)
    giou_term = 1.0 - giou1d_matrix(pred_segments, gt_segments)
    cls_term = focal_loss(confidence, np.ones_like(confidence))
    return w.alpha_giou * giou_term + w.alpha_cls * np.asarray(cls_term)[:, None]


def _giou_pairs(segments: Tensor, pred_idx: np.ndarray, gt_rows: np.ndarray) -> Tensor:
    """Differentiable gIoU for matched (pred, gt) pairs; gt side is constant."""
    p = len(pred_idx)
    pred = ad.gather_rows(segments, pred_idx)
    s_a = ad.reshape(ad.slice_axis(pred, 1, 0, 1), (p,))
    e_a = ad.reshape(ad.slice_axis(pred, 1, 1, 2), (p,))
    s_b = ad.constant(gt_rows[:, 0])
    e_b = ad.constant(gt_rows[:, 1])
    len_b = ad.constant(gt_rows[:, 1] - gt_rows[:, 0])
    inter = ad.relu(ad.minimum(e_a, e_b) - ad.maximum(s_a, s_b))
    union = ad.add(ad.add(e_a - s_a, len_b), ad.neg(inter))
    hull = ad.maximum(e_a, e_b) - ad.minimum(s_a, s_b)
    iou = ad.div(inter, ad.add(union, 1e-12))
    return iou - ad.div(hull - union, ad.add(hull, 1e-12))


def _sorted_mean(values: Tensor) -> Tensor:
    """Mean of a vector accumulated in ascending value order.

    Summation order is then a function of the value multiset alone, which is
    what makes set_loss bitwise permutation-invariant.
    """
    order = np.argsort(values.data, kind="stable")
    return ad.mul(ad.sum_all(ad.gather_rows(values, order)), 1.0 / values.shape[0])


def set_loss(layers: Sequence[LayerPrediction], gt_segments: np.ndarray,
             loss_w: LossWeights = LossWeights(),
             match_w: MatchWeights = MatchWeights()) -> tuple[Tensor, list[Assignment]]:
    """Total criterion over decoder layers plus the per-layer assignments."""
    if not layers:
        raise ContractError("set_loss: need at least one layer of predictions")
    gt_segments = np.asarray(gt_segments, dtype=np.float64).reshape(-1, 2)
    total: Tensor | None = None
    assignments: list[Assignment] = []
    for layer in layers:
        n_pred = layer.segments.shape[0]
        if layer.confidence.shape != (n_pred,):
            raise ContractError(f"set_loss: {n_pred} segments vs confidence "
                                f"{layer.confidence.shape}")
        cost = match_cost(layer.segments.data, layer.confidence.data,
                          gt_segments, match_w)
        assign = hungarian(cost)
        assignments.append(assign)

        labels = np.zeros(n_pred)
        for i, _ in assign.pairs:
            labels[i] = 1.0
        layer_loss = ad.mul(_sorted_mean(focal_loss_t(layer.confidence, labels)),
                            loss_w.beta_cls)

        if assign.pairs:
            pred_idx = np.array([i for i, _ in assign.pairs], dtype=np.int64)
            gt_rows = gt_segments[[j for _, j in assign.pairs]]
            giou = _giou_pairs(layer.segments, pred_idx, gt_rows)
            misfit = ad.add(ad.neg(giou), 1.0)
            layer_loss = ad.add(layer_loss, ad.mul(_sorted_mean(misfit), loss_w.beta_giou))

            if layer.captions_for is not None and loss_w.beta_cap > 0:
                items = layer.captions_for(list(assign.pairs))
                per_pair = [caption_ce(logits, tgt, mask) for logits, tgt, mask in items]
                stacked = ad.concat([ad.reshape(v, (1,)) for v in per_pair], axis=0)
                layer_loss = ad.add(layer_loss,
                                    ad.mul(_sorted_mean(stacked), loss_w.beta_cap))

        total = layer_loss if total is None else ad.add(total, layer_loss)
    return total, assignments
