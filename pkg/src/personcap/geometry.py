"""Temporal interval arithmetic on normalized segments.

A segment is a ``[start, end]`` pair with ``0 <= start <= end <= 1``; arrays
stack them on the last axis.  All functions are pure numpy and broadcast over
leading axes; ``*_matrix`` variants give all-pairs tables.

Degenerate zero-length segments follow explicit conventions so early-training
predictions never yield NaN: two identical points overlap perfectly (IoU and
gIoU are 1), two distinct zero-length points share nothing (IoU is 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class BBox:
    """Pixel-space person box: top-left corner plus positive extents."""

    x: float
    y: float
    w: float
    h: float


def check_segments(seg: np.ndarray) -> None:
    """Raise unless every [start, end] row satisfies 0 <= start <= end <= 1."""
    seg = np.asarray(seg, dtype=np.float64)
    if seg.shape[-1] != 2:
        raise ContractError(f"segments must stack [start, end] on the last axis, got {seg.shape}")
    if np.any(seg[..., 0] > seg[..., 1]):
        raise ContractError("segment with start > end")
    if np.any(seg < 0.0) or np.any(seg > 1.0):
        raise ContractError("segment endpoint outside [0, 1]")


def seg_length(seg: np.ndarray) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.float64)
    return seg[..., 1] - seg[..., 0]


def tiou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intersection over union of segment pairs (broadcast over leading axes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter = np.maximum(0.0, np.minimum(a[..., 1], b[..., 1]) - np.maximum(a[..., 0], b[..., 0]))
    union = seg_length(a) + seg_length(b) - inter
    identical_points = (union == 0.0) & (a[..., 0] == b[..., 0])
    safe = np.where(union > 0.0, union, 1.0)
    return np.where(union > 0.0, inter / safe, np.where(identical_points, 1.0, 0.0))


def giou1d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU minus the hull's empty fraction; 1.0 for coincident point pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iou = tiou(a, b)
    hull = np.maximum(a[..., 1], b[..., 1]) - np.minimum(a[..., 0], b[..., 0])
    inter = np.maximum(0.0, np.minimum(a[..., 1], b[..., 1]) - np.maximum(a[..., 0], b[..., 0]))
    union = seg_length(a) + seg_length(b) - inter
    safe = np.where(hull > 0.0, hull, 1.0)
    # the hull always covers the union; clamp shields the <=-IoU invariant
    # from last-ulp rounding when segments overlap
    correction = np.where(hull > 0.0, np.maximum(0.0, hull - union) / safe, 0.0)
    return iou - correction


def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs tIoU: rows index ``a`` [N,2], columns index ``b`` [M,2]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    return tiou(a[:, None, :], b[None, :, :])


def giou1d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    return giou1d(a[:, None, :], b[None, :, :])


def segment_from_center_width(center, width) -> np.ndarray:
    """Build [start, end] from (center, width), clipping overflow into [0, 1]."""
    center = np.asarray(center, dtype=np.float64)
    width = np.asarray(width, dtype=np.float64)
    start = np.clip(center - width / 2.0, 0.0, 1.0)
    end = np.clip(center + width / 2.0, 0.0, 1.0)
    return np.stack([start, end], axis=-1)


def center_width_of(seg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of segment_from_center_width for unclipped segments."""
    seg = np.asarray(seg, dtype=np.float64)
    return (seg[..., 0] + seg[..., 1]) / 2.0, seg[..., 1] - seg[..., 0]
