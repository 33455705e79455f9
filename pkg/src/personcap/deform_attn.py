"""Deformable attention over temporal feature pyramids.

Two kernels share the sampling machinery:

* ``msdatt`` -- each query predicts, per head, K fractional offsets and a
  softmax weight for every pyramid level, then takes the weighted sum of the
  value-projected features sampled at reference + offset.  Heads are
  concatenated and output-projected.
* ``dsa`` -- caption-time soft attention.  The concatenated [linguistic
  state, person query] predicts L*K sampling points around the reference;
  the value-projected samples act as keys and values of standard single-head
  dot-product attention, so the context vector can only draw from a local
  neighbourhood of the reference point.

All levels are addressed by the same normalized coordinate in [0, 1]; a
level of length T maps it to the continuous row index u = p * (T - 1), and
coordinates pushed outside the level contribute zeros (see
``autodiff.linear_sample``).  Everything is differentiable, including through
the sampling locations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


@dataclass
class FeaturePyramid:
    """Temporal feature maps, each level ceil-half the length of the previous."""

    levels: list[Tensor]

    def __post_init__(self):
        if not self.levels:
            raise ContractError("pyramid needs at least one level")
        d = self.levels[0].shape[-1]
        for i, lvl in enumerate(self.levels):
            if lvl.ndim != 2:
                raise ContractError(f"level {i} must be [T, d], got {lvl.shape}")
            if lvl.shape[1] != d:
                raise ContractError(f"level {i} has width {lvl.shape[1]}, expected {d}")
            if lvl.shape[0] < 1:
                raise ContractError(f"level {i} is empty")
            if i > 0:
                want = (self.levels[i - 1].shape[0] + 1) // 2
                if lvl.shape[0] != want:
                    raise ContractError(
                        f"level {i} length {lvl.shape[0]}, expected ceil-half {want}")

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]

    @property
    def lengths(self) -> list[int]:
        return [lvl.shape[0] for lvl in self.levels]


def build_pyramid(base: Tensor, num_levels: int) -> FeaturePyramid:
    """Stride-2 average pooling chain starting from the base sequence."""
    if num_levels < 1:
        raise ContractError("num_levels must be >= 1")
    levels = [base]
    for _ in range(num_levels - 1):
        levels.append(ad.avgpool2_rows(levels[-1]))
    return FeaturePyramid(levels)


def sample_linear(level: Tensor, positions) -> Tensor:
    """Interpolated read of a [T, d] map at normalized positions (zeros outside)."""
    if not isinstance(positions, Tensor):
        positions = ad.constant(positions)
    return ad.linear_sample(level, positions)


@dataclass
class MSDAttParams:
    """Learnable pieces of one msdatt layer.

    Offset/weight layouts flatten (head, level, point) in that nesting order,
    so column h*L*K + l*K + k addresses head h, level l, point k.
    """

    heads: int
    points: int
    w_offset: Tensor    # [d, H*L*K]
    b_offset: Tensor    # [H*L*K]
    w_attn: Tensor      # [d, H*L*K]
    b_attn: Tensor      # [H*L*K]
    w_value: Tensor     # [d, d]
    b_value: Tensor     # [d]
    w_out: Tensor       # [d, d]
    b_out: Tensor       # [d]


def msdatt(queries: Tensor, refs: Tensor, pyramid: FeaturePyramid,
           params: MSDAttParams, return_weights: bool = False):
    """Multi-scale deformable attention for a batch of queries.

    queries [N, d], refs [N] normalized scalars -> [N, d].  With
    ``return_weights`` also gives the softmax weights [N, H, L, K].
    """
    d = pyramid.width
    h = params.heads
    k = params.points
    n_levels = len(pyramid.levels)
    if queries.ndim != 2 or queries.shape[1] != d:
        raise ContractError(f"queries must be [N, {d}], got {queries.shape}")
    if d % h != 0:
        raise ContractError(f"channel width {d} not divisible by {h} heads")
    n = queries.shape[0]
    if refs.shape != (n,):
        raise ContractError(f"refs must be [{n}], got {refs.shape}")
    flat = h * n_levels * k
    if params.w_offset.shape != (d, flat) or params.w_attn.shape != (d, flat):
        raise ContractError(
            f"offset/weight projections must map {d} -> {flat} "
            f"(H={h}, L={n_levels}, K={k})")
    d_head = d // h

    offsets = ad.reshape(ad.add_row(ad.matmul(queries, params.w_offset),
                                    params.b_offset), (n, h, n_levels, k))
    logits = ad.reshape(ad.add_row(ad.matmul(queries, params.w_attn),
                                   params.b_attn), (n, h, n_levels * k))
    weights = ad.reshape(ad.softmax(logits, axis=-1), (n, h, n_levels, k))

    refs_e = ad.expand(ad.reshape(refs, (n, 1, 1, 1)), (n, h, n_levels, k))
    positions = ad.add(refs_e, offsets)

    per_head = None
    for lvl in range(n_levels):
        values = ad.reshape(
            ad.add_row(ad.matmul(pyramid.levels[lvl], params.w_value), params.b_value),
            (pyramid.lengths[lvl], h, d_head))
        pos_l = ad.reshape(ad.slice_axis(positions, 2, lvl, lvl + 1), (n, h, k))
        w_l = ad.reshape(ad.slice_axis(weights, 2, lvl, lvl + 1), (n, h, k))
        sampled = ad.linear_sample_per_head(values, pos_l)       # [N, H, K, d_head]
        contrib = ad.sum_axis(ad.mul_last(sampled, w_l), 2)      # [N, H, d_head]
        per_head = contrib if per_head is None else ad.add(per_head, contrib)

    merged = ad.reshape(per_head, (n, d))
    out = ad.add_row(ad.matmul(merged, params.w_out), params.b_out)
    if return_weights:
        return out, weights
    return out


@dataclass
class DSAParams:
    """Learnable pieces of deformable soft attention (single head).

    The joint width below is the linguistic width plus the query width; both
    equal d in the symmetric case, giving the [2d, ...] shapes.
    """

    points: int
    w_offset: Tensor    # [joint, L*K]
    b_offset: Tensor    # [L*K]
    w_value: Tensor     # [d, d]
    b_value: Tensor     # [d]
    w_key: Tensor       # [d, dk]
    b_key: Tensor       # [dk]
    w_query: Tensor     # [joint, dk]
    b_query: Tensor     # [dk]


def dsa_values(pyramid: FeaturePyramid, params: DSAParams) -> list:
    """Value-project every pyramid level once; reusable across time steps."""
    return [ad.add_row(ad.matmul(level, params.w_value), params.b_value)
            for level in pyramid.levels]


def dsa(linguistic: Tensor, person_query: Tensor, refs: Tensor,
        pyramid: FeaturePyramid, params: DSAParams,
        return_weights: bool = False, values: list | None = None):
    """Locally-deformable soft attention for caption decoding.

    linguistic [P, dh], person_query [P, dq], refs [P] -> context [P, d].
    Pass ``values`` from ``dsa_values`` to amortize the value projection
    over repeated calls on the same pyramid.
    """
    d = pyramid.width
    k = params.points
    n_levels = len(pyramid.levels)
    if (linguistic.ndim != 2 or person_query.ndim != 2
            or linguistic.shape[0] != person_query.shape[0]):
        raise ContractError(
            f"linguistic {linguistic.shape} and query {person_query.shape} must "
            "share the leading axis")
    p = linguistic.shape[0]
    joint = linguistic.shape[1] + person_query.shape[1]
    lk = n_levels * k
    if params.w_offset.shape != (joint, lk):
        raise ContractError(f"offset projection must map {joint} -> {lk}, "
                            f"got {params.w_offset.shape}")
    dk = params.w_key.shape[1]

    hq = ad.concat([linguistic, person_query], axis=1)           # [P, joint]
    offsets = ad.add_row(ad.matmul(hq, params.w_offset), params.b_offset)
    positions = ad.add(ad.expand(ad.reshape(refs, (p, 1)), (p, lk)), offsets)

    if values is None:
        values = dsa_values(pyramid, params)
    sampled = []
    for lvl in range(n_levels):
        pos_l = ad.slice_axis(positions, 1, lvl * k, (lvl + 1) * k)
        sampled.append(ad.linear_sample(values[lvl], pos_l))     # [P, K, d]
    samples = ad.concat(sampled, axis=1)                         # [P, L*K, d]

    keys = ad.reshape(ad.add_row(ad.matmul(ad.reshape(samples, (p * lk, d)),
                                           params.w_key), params.b_key),
                      (p, lk, dk))
    query = ad.add_row(ad.matmul(hq, params.w_query), params.b_query)
    logits = ad.mul(ad.reshape(ad.bmm(keys, ad.reshape(query, (p, dk, 1))),
                               (p, lk)), 1.0 / np.sqrt(dk))
    attn = ad.softmax(logits, axis=-1)                           # [P, L*K]
    context = ad.sum_axis(ad.mul_last(samples, attn), 1)         # [P, d]
    if return_weights:
        return context, attn
    return context
