"""Multi-stage refinement region proposal head.

Per pyramid level, anchors pass through ``N-1`` refinement stages (dilated
3x3 conv feeding a 3x3 delta head) and a final stage whose 3x3 conv is
deformable and which predicts both final deltas and objectness. Features
flow stage to stage; boxes only serve as the decode base for the next
stage's deltas, which are read at each box's current centre cell.
Stage weights are shared across pyramid levels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .boxes import box_area, box_iou, decode_boxes, generate_anchors
from .errors import ConfigError, ShapeError
from .nn_primitives import conv2d, deformable_conv2d, stop_gradient

POSITIVE, IGNORE, NEGATIVE = 1, -1, 0


@dataclass
class AnchorConfig:
    strides: Dict[int, int] = field(default_factory=lambda: {2: 4, 3: 8, 4: 16, 5: 32})
    scales: Dict[int, List[float]] = field(default_factory=lambda: {2: [12.0], 3: [24.0], 4: [48.0], 5: [96.0]})
    ratios: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])

    def __post_init__(self):
        # JSON round-trips turn the integer level keys into strings
        self.strides = {int(k): int(v) for k, v in self.strides.items()}
        self.scales = {int(k): [float(s) for s in v] for k, v in self.scales.items()}
        if not self.ratios or any(not v for v in self.scales.values()):
            raise ConfigError("anchor scales and ratios must be non-empty")
        counts = {len(v) for v in self.scales.values()}
        if len(counts) != 1:
            raise ConfigError("every level needs the same number of anchor scales (shared heads)")

    @property
    def per_cell(self) -> int:
        return len(next(iter(self.scales.values()))) * len(self.ratios)


@dataclass
class MRRPNConfig:
    num_stages: int = 3
    dilations: Optional[List[int]] = None
    reg_weights: Optional[List[float]] = None
    balance: float = 1.4
    iou_thresholds: Optional[List[float]] = None
    negative_margin: float = 0.2
    pre_nms: int = 1000
    post_nms: int = 100
    nms_thresh: float = 0.7
    cls_samples: int = 256
    positive_fraction: float = 0.5
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self):
        if isinstance(self.anchors, dict):
            self.anchors = AnchorConfig(**self.anchors)
        n = self.num_stages
        if n < 1:
            raise ConfigError(f"num_stages must be >= 1, got {n}")
        if self.dilations is None:
            self.dilations = [2] * (n - 1)
        if self.reg_weights is None:
            self.reg_weights = [7.0] * n
        if self.iou_thresholds is None:
            self.iou_thresholds = [round(min(0.5 + 0.1 * t, 0.7), 6) for t in range(n)]
        if len(self.dilations) != n - 1:
            raise ConfigError(f"need {n - 1} dilation rates for {n} stages, got {len(self.dilations)}")
        if len(self.reg_weights) != n or len(self.iou_thresholds) != n:
            raise ConfigError(f"reg_weights and iou_thresholds need {n} entries")
        if any(w <= 0 for w in self.reg_weights) or self.balance <= 0:
            raise ConfigError("regression weights and balance must be positive")
        if any(b < a for a, b in zip(self.iou_thresholds, self.iou_thresholds[1:])):
            raise ConfigError("IoU thresholds must be non-decreasing across stages")


@dataclass
class StageOutput:
    features: torch.Tensor
    deltas: torch.Tensor
    boxes: torch.Tensor
    objectness: Optional[torch.Tensor] = None


def iou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Elementwise ``1 - IoU`` for matched rows of ``pred`` and ``gt``.

    A prediction with zero area scores loss 1; its IoU is masked out so no
    gradient flows from the degenerate row.
    """
    lt = torch.maximum(pred[..., :2], gt[..., :2])
    rb = torch.minimum(pred[..., 2:], gt[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(dim=-1)
    pa = box_area(pred)
    union = pa + box_area(gt) - inter
    ok = (pa > 0) & (union > 0)
    iou = torch.where(ok, inter / torch.where(ok, union, torch.ones_like(union)), torch.zeros_like(union))
    return 1.0 - iou


def mrrpn_loss(stage_reg_losses: Sequence, cls_loss, cfg: MRRPNConfig):
    """``balance * sum_t(weight_t * reg_t) + cls``."""
    if len(stage_reg_losses) != cfg.num_stages:
        raise ShapeError(f"expected {cfg.num_stages} stage regression losses, got {len(stage_reg_losses)}")
    reg = sum(w * l for w, l in zip(cfg.reg_weights, stage_reg_losses))
    return cfg.balance * reg + cls_loss


def assign_targets(boxes, gt_boxes, stage_idx: int, cfg: MRRPNConfig, ignore_boxes=None):
    """Label boxes positive / negative / ignore against ground truth.

    Positive when max IoU reaches the stage threshold or the box is the best
    match of some gt; negative below ``threshold - negative_margin``;
    ignore in between. Boxes overlapping a masked (ignore) region by at
    least the negative bound are never used as negatives.
    Returns ``(labels, matched_gt_index)`` (index -1 where unmatched).
    """
    if not 1 <= stage_idx <= cfg.num_stages:
        raise ShapeError(f"stage index {stage_idx} outside 1..{cfg.num_stages}")
    thr = cfg.iou_thresholds[stage_idx - 1]
    neg = thr - cfg.negative_margin
    m = boxes.shape[0]
    labels = torch.full((m,), IGNORE, dtype=torch.long)
    matched = torch.full((m,), -1, dtype=torch.long)
    if gt_boxes.numel() == 0:
        labels[:] = NEGATIVE
    else:
        iou = box_iou(boxes, gt_boxes)
        best, idx = iou.max(dim=1)
        labels[best < neg] = NEGATIVE
        pos = best >= thr
        # each gt claims its best box(es), ties included
        gt_best = iou.max(dim=0).values
        for g in range(gt_boxes.shape[0]):
            if gt_best[g] > 0:
                hit = (iou[:, g] == gt_best[g])
                pos |= hit
                idx = torch.where(hit, torch.full_like(idx, g), idx)
        labels[pos] = POSITIVE
        matched[pos] = idx[pos]
    if ignore_boxes is not None and ignore_boxes.numel():
        near = box_iou(boxes, ignore_boxes).max(dim=1).values >= neg
        labels[near & (labels == NEGATIVE)] = IGNORE
    return labels, matched


def _gather_at_centers(maps, boxes, stride, per_cell, width):
    """Read ``width`` channels per anchor slot at each box's centre cell.

    ``maps`` is ``(B, per_cell*width, H, W)``, ``boxes`` ``(B, M, 4)`` with
    box ``m`` belonging to anchor slot ``m % per_cell``.
    """
    b, _, h, w = maps.shape
    m = boxes.shape[1]
    cx = 0.5 * (boxes[..., 0] + boxes[..., 2])
    cy = 0.5 * (boxes[..., 1] + boxes[..., 3])
    j = torch.floor(cx / stride).long().clamp(0, w - 1)
    i = torch.floor(cy / stride).long().clamp(0, h - 1)
    slot = (torch.arange(m, device=maps.device) % per_cell).view(1, m, 1)
    k = torch.arange(width, device=maps.device).view(1, 1, width)
    chan = slot * width + k
    idx = (chan * h + i.unsqueeze(-1)) * w + j.unsqueeze(-1)
    return torch.gather(maps.reshape(b, -1), 1, idx.reshape(b, -1)).view(b, m, width)


def norm_groups(width: int) -> int:
    return math.gcd(width, 8)


class RefineStage(nn.Module):
    """Dilated conv -> GroupNorm -> ReLU -> 3x3 delta head."""

    def __init__(self, width: int, per_cell: int, dilation: int):
        super().__init__()
        self.dilation = dilation
        self.per_cell = per_cell
        self.conv = nn.Conv2d(width, width, 3, padding=dilation, dilation=dilation)
        # stacked plain convs trained from scratch lose their ReLUs without a norm
        self.norm = nn.GroupNorm(norm_groups(width), width)
        self.delta = nn.Conv2d(width, 4 * per_cell, 3, padding=1)
        nn.init.kaiming_normal_(self.conv.weight, nonlinearity="relu")
        nn.init.zeros_(self.conv.bias)
        nn.init.normal_(self.delta.weight, std=0.01)
        nn.init.zeros_(self.delta.bias)

    def forward(self, features, boxes, stride, image_size) -> StageOutput:
        d = self.dilation
        feats = torch.relu(self.norm(conv2d(features, self.conv.weight, self.conv.bias, padding=d, dilation=d)))
        maps = conv2d(feats, self.delta.weight, self.delta.bias, padding=1)
        deltas = _gather_at_centers(maps, boxes, stride, self.per_cell, 4)
        return StageOutput(feats, deltas, decode_boxes(boxes, deltas, image_size))


class FinalStage(nn.Module):
    """Deformable conv (zero-initialised offset branch) -> GroupNorm -> regression + objectness."""

    def __init__(self, width: int, per_cell: int):
        super().__init__()
        self.per_cell = per_cell
        self.offset = nn.Conv2d(width, 2 * 9, 3, padding=1)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        self.weight = nn.Parameter(torch.empty(width, width, 3, 3))
        self.bias = nn.Parameter(torch.zeros(width))
        nn.init.kaiming_normal_(self.weight, nonlinearity="relu")
        self.norm = nn.GroupNorm(norm_groups(width), width)
        self.reg = nn.Conv2d(width, 4 * per_cell, 3, padding=1)
        self.cls = nn.Conv2d(width, per_cell, 3, padding=1)
        for head in (self.reg, self.cls):
            nn.init.normal_(head.weight, std=0.01)
            nn.init.zeros_(head.bias)

    def forward(self, features, boxes, stride, image_size) -> StageOutput:
        offsets = conv2d(features, self.offset.weight, self.offset.bias, padding=1)
        feats = torch.relu(self.norm(deformable_conv2d(features, self.weight, offsets, self.bias, padding=1)))
        deltas = _gather_at_centers(conv2d(feats, self.reg.weight, self.reg.bias, padding=1),
                                    boxes, stride, self.per_cell, 4)
        # objectness stays on the anchor grid: refined boxes converge on shared centre
        # cells, where positives and negatives would otherwise read the same logit
        cls_map = conv2d(feats, self.cls.weight, self.cls.bias, padding=1)
        b, a, h, w = cls_map.shape
        if boxes.shape[1] != h * w * a:
            raise ShapeError(f"final stage expects one box per anchor ({h * w * a}), got {boxes.shape[1]}")
        logits = cls_map.permute(0, 2, 3, 1).reshape(b, h * w * a)
        return StageOutput(feats, deltas, decode_boxes(boxes, deltas, image_size), logits)


class MRRPN(nn.Module):
    def __init__(self, width: int, cfg: Optional[MRRPNConfig] = None):
        super().__init__()
        self.cfg = cfg or MRRPNConfig()
        a = self.cfg.anchors.per_cell
        self.stages = nn.ModuleList(RefineStage(width, a, r) for r in self.cfg.dilations)
        self.final = FinalStage(width, a)
        self._anchor_cache: Dict[tuple, torch.Tensor] = {}

    def anchors(self, level, shape, dtype=torch.float32):
        key = (level, tuple(shape), dtype)
        if key not in self._anchor_cache:
            ac = self.cfg.anchors
            self._anchor_cache[key] = generate_anchors(ac.strides[level], ac.scales[level], ac.ratios, shape, dtype)
        return self._anchor_cache[key]

    def refine_stage(self, features, boxes, stage_idx, stride, image_size) -> StageOutput:
        if not 1 <= stage_idx <= self.cfg.num_stages - 1:
            raise ShapeError(f"refinement stage index {stage_idx} outside 1..{self.cfg.num_stages - 1}")
        return self.stages[stage_idx - 1](features, boxes, stride, image_size)

    def run_level(self, level, features, image_size):
        """All stages on one level; returns per-stage input and output boxes."""
        b = features.shape[0]
        stride = self.cfg.anchors.strides[level]
        boxes = self.anchors(level, features.shape[2:], features.dtype).unsqueeze(0).expand(b, -1, -1)
        inputs, outputs = [], []
        feats = features
        for t in range(1, self.cfg.num_stages):
            inputs.append(boxes)
            out = self.refine_stage(feats, boxes, t, stride, image_size)
            outputs.append(out.boxes)
            feats = out.features
            boxes = stop_gradient(out.boxes)
        inputs.append(boxes)
        out = self.final(feats, boxes, stride, image_size)
        outputs.append(out.boxes)
        return inputs, outputs, out.objectness

    def forward(self, pyramid, image_size):
        """Returns per-stage input boxes, predicted boxes (B, M, 4) and objectness (B, M)."""
        ins, outs, logits = None, None, []
        for level in sorted(pyramid):
            i, o, lg = self.run_level(level, pyramid[level], image_size)
            ins = [[x] for x in i] if ins is None else [acc + [x] for acc, x in zip(ins, i)]
            outs = [[x] for x in o] if outs is None else [acc + [x] for acc, x in zip(outs, o)]
            logits.append(lg)
        ins = [torch.cat(x, dim=1) for x in ins]
        outs = [torch.cat(x, dim=1) for x in outs]
        return ins, outs, torch.cat(logits, dim=1)

    def losses(self, stage_inputs, stage_outputs, objectness, gt_boxes, ignore_boxes=None):
        """Per-stage IoU regression losses and final-stage objectness BCE.

        Objectness logits sit on the anchor grid, so their targets come from
        the anchors themselves, at the final stage's IoU threshold.
        """
        cfg = self.cfg
        n = cfg.num_stages
        reg = []
        final_labels = []
        for b, gt in enumerate(gt_boxes):
            ign = None if ignore_boxes is None else ignore_boxes[b]
            final_labels.append(assign_targets(stage_inputs[0][b].detach(), gt, n, cfg, ign)[0])
        for t in range(1, n + 1):
            total, count = stage_outputs[t - 1].new_zeros(()), 0
            for b, gt in enumerate(gt_boxes):
                ign = None if ignore_boxes is None else ignore_boxes[b]
                labels, matched = assign_targets(stage_inputs[t - 1][b].detach(), gt, t, cfg, ign)
                pos = labels == POSITIVE
                if pos.any():
                    total = total + iou_loss(stage_outputs[t - 1][b][pos], gt[matched[pos]]).sum()
                    count += int(pos.sum())
            reg.append(total / max(count, 1))
        cls_terms = []
        for b, labels in enumerate(final_labels):
            pos = torch.nonzero(labels == POSITIVE).flatten()
            neg = torch.nonzero(labels == NEGATIVE).flatten()
            n_pos = min(len(pos), int(cfg.cls_samples * cfg.positive_fraction))
            pos = pos[torch.randperm(len(pos))[:n_pos]]
            neg = neg[torch.randperm(len(neg))[: cfg.cls_samples - n_pos]]
            keep = torch.cat([pos, neg])
            target = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]).to(objectness.dtype)
            cls_terms.append((objectness[b, keep], target))
        logits = torch.cat([c[0] for c in cls_terms])
        targets = torch.cat([c[1] for c in cls_terms])
        cls = F.binary_cross_entropy_with_logits(logits, targets) if len(targets) else objectness.sum() * 0
        return reg, cls

    def proposals(self, boxes, objectness, nms_fn):
        """Top-scoring, NMS-filtered proposals per image: list of (boxes, scores, index)."""
        cfg = self.cfg
        result = []
        scores = torch.sigmoid(objectness.detach())
        for b in range(boxes.shape[0]):
            s = scores[b]
            k = min(cfg.pre_nms, s.numel())
            top_s, top_i = torch.topk(s, k, sorted=True)
            bx = boxes[b, top_i].detach()
            keep = nms_fn(bx, top_s, cfg.nms_thresh, cfg.post_nms)
            keep = torch.as_tensor(keep, dtype=torch.long)
            result.append((bx[keep], top_s[keep], top_i[keep]))
        return result


def dump_proposals(fh, image_id, proposals, stage_outputs, batch_index=0):
    """Write one JSON line per proposal with its per-stage box trace."""
    boxes, scores, index = proposals
    for bx, sc, ix in zip(boxes.tolist(), scores.tolist(), index.tolist()):
        trace = [[round(v, 4) for v in so[batch_index, ix].tolist()] for so in stage_outputs]
        fh.write(json.dumps({"image_id": image_id, "box": [round(v, 4) for v in bx],
                             "score": round(sc, 6), "stages": trace}) + "\n")


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = [
    "AnchorConfig", "MRRPNConfig", "StageOutput", "MRRPN", "RefineStage", "FinalStage",
    "assign_targets", "iou_loss", "mrrpn_loss", "dump_proposals", "param_count",
    "POSITIVE", "NEGATIVE", "IGNORE",
]
