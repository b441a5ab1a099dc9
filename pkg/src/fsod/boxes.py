"""Axis-aligned box utilities in the ``(x1, y1, x2, y2)`` corner convention."""
from __future__ import annotations

import math

import torch

from .errors import ConfigError, ShapeError

# caps exp() in decode so a wild delta cannot overflow
MAX_LOG_RATIO = math.log(1000.0 / 16)
MIN_BOX_SIZE = 1.0


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU matrix of shape ``(len(a), len(b))``."""
    if a.numel() == 0 or b.numel() == 0:
        return a.new_zeros((a.shape[0], b.shape[0]))
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(dim=2)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union.clamp(min=1e-12)


def to_center(b: torch.Tensor) -> torch.Tensor:
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return torch.stack([b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h], dim=-1)


def to_corners(c: torch.Tensor) -> torch.Tensor:
    half_w = 0.5 * c[..., 2]
    half_h = 0.5 * c[..., 3]
    return torch.stack([c[..., 0] - half_w, c[..., 1] - half_h, c[..., 0] + half_w, c[..., 1] + half_h], dim=-1)


def encode_boxes(anchors, targets, weights=(1.0, 1.0, 1.0, 1.0)):
    """Deltas ``(dx, dy, dw, dh)``: centre shift over anchor size, log size ratio."""
    if anchors.shape != targets.shape:
        raise ShapeError(f"anchors {tuple(anchors.shape)} and targets {tuple(targets.shape)} differ")
    a = to_center(anchors)
    t = to_center(targets)
    if (t[..., 2:] <= 0).any():
        raise ShapeError("target boxes must have positive width and height")
    wx, wy, ww, wh = weights
    return torch.stack([
        wx * (t[..., 0] - a[..., 0]) / a[..., 2],
        wy * (t[..., 1] - a[..., 1]) / a[..., 3],
        ww * torch.log(t[..., 2] / a[..., 2]),
        wh * torch.log(t[..., 3] / a[..., 3]),
    ], dim=-1)


def clip_boxes(b: torch.Tensor, image_size) -> torch.Tensor:
    """Clip into ``[0, W] x [0, H]`` keeping at least ``MIN_BOX_SIZE`` extent."""
    h, w = image_size
    x1 = b[..., 0].clamp(0, w - MIN_BOX_SIZE)
    y1 = b[..., 1].clamp(0, h - MIN_BOX_SIZE)
    x2 = torch.maximum(b[..., 2].clamp(0, w), x1 + MIN_BOX_SIZE)
    y2 = torch.maximum(b[..., 3].clamp(0, h), y1 + MIN_BOX_SIZE)
    return torch.stack([x1, y1, x2, y2], dim=-1)


def decode_boxes(anchors, deltas, image_size=None, weights=(1.0, 1.0, 1.0, 1.0)):
    if anchors.shape != deltas.shape:
        raise ShapeError(f"anchors {tuple(anchors.shape)} and deltas {tuple(deltas.shape)} differ")
    a = to_center(anchors)
    wx, wy, ww, wh = weights
    dw = (deltas[..., 2] / ww).clamp(max=MAX_LOG_RATIO)
    dh = (deltas[..., 3] / wh).clamp(max=MAX_LOG_RATIO)
    c = torch.stack([
        a[..., 0] + deltas[..., 0] / wx * a[..., 2],
        a[..., 1] + deltas[..., 1] / wy * a[..., 3],
        a[..., 2] * torch.exp(dw),
        a[..., 3] * torch.exp(dh),
    ], dim=-1)
    out = to_corners(c)
    return clip_boxes(out, image_size) if image_size is not None else out


def generate_anchors(stride, scales, ratios, feature_shape, dtype=torch.float32):
    """Anchors for one level, ordered row-major over cells then scale-major.

    ``ratio`` is height/width; width ``s/sqrt(r)`` and height ``s*sqrt(r)``
    keep the area at ``s**2``.
    """
    if not scales or not ratios:
        raise ConfigError("anchor scales and ratios must be non-empty")
    fh, fw = feature_shape
    shapes = []
    for s in scales:
        for r in ratios:
            shapes.append((s / math.sqrt(r), s * math.sqrt(r)))
    wh = torch.tensor(shapes, dtype=dtype)  # (A, 2)
    cy = (torch.arange(fh, dtype=dtype) + 0.5) * stride
    cx = (torch.arange(fw, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(cy, cx, indexing="ij")
    centers = torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=1)  # (HW, 2)
    half = 0.5 * wh
    lo = centers[:, None, :] - half[None]
    hi = centers[:, None, :] + half[None]
    return torch.cat([lo, hi], dim=2).reshape(-1, 4)
