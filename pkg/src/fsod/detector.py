"""Detector assembly, RoI pooling, two-phase training and checkpoints.

The detector is backbone -> neck -> multi-stage proposal head -> RoI align
-> two fc layers -> cosine classifier (GCL layout) + class-agnostic box
regressor. ``train_base`` optimises everything on base classes;
``fine_tune`` binds novel classes to placeholder nodes and optimises all
but the backbone, whose parameters are left bit-identical.
"""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import config as config_util
from .boxes import box_iou, decode_boxes, encode_boxes
from .cfpan import CFPAN, NeckConfig
from .datasets import AnnotatedImage, Dataset
from .errors import ConfigError, ProtocolError, ShapeError
from .evaluation import nms
from .gcl import (ClassifierLayout, GCLConfig, LossBreakdown, activate_placeholders, cosine_logits,
                  gcl_base_loss, gcl_finetune_loss)
from .mrrpn import MRRPN, MRRPNConfig, norm_groups
from .nn_primitives import bilinear_sample, stop_gradient

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
PHASES = ("base", "finetuned")
OPTIMIZERS = ("sgd", "adamw")


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 18
    batch_size: int = 2
    warmup_iters: int = 50
    decay_at: List[float] = field(default_factory=lambda: [0.75])
    grad_clip: float = 10.0
    flip: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("learning rate and batch size must be positive, epochs >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")


def _finetune_default():
    return TrainConfig(lr=0.001, epochs=108, batch_size=1, warmup_iters=10)


@dataclass
class DetectorConfig:
    image_size: int = 128
    backbone_widths: List[int] = field(default_factory=lambda: [16, 32, 64, 64])
    neck: NeckConfig = field(default_factory=NeckConfig)
    rpn: MRRPNConfig = field(default_factory=MRRPNConfig)
    gcl: GCLConfig = field(default_factory=GCLConfig)
    roi_size: int = 7
    roi_sampling: int = 2
    roi_canonical: float = 36.0
    head_hidden: int = 256
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    base: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=_finetune_default)
    finetune_mode: str = "balanced"  # "balanced" | "novel-only"
    score_thresh: float = 0.05
    det_nms: float = 0.5
    max_dets: int = 100
    zero_init_heads: bool = False
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if len(self.backbone_widths) != 4:
            raise ConfigError("backbone must emit exactly four levels (C2..C5)")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be a multiple of 32, got {self.image_size}")
        if self.finetune_mode not in ("balanced", "novel-only"):
            raise ConfigError(f"finetune_mode must be 'balanced' or 'novel-only', got {self.finetune_mode!r}")

    @classmethod
    def from_dict(cls, d):
        return config_util.from_dict(cls, d)

    def to_dict(self):
        return config_util.to_dict(self)


@dataclass
class Detection:
    box: List[float]
    label: str
    score: float


# ----------------------------------------------------------------- backbone

class Backbone(nn.Module):
    """Plain strided convnet emitting C2..C5 at strides 4, 8, 16, 32."""

    def __init__(self, widths):
        super().__init__()
        self.stem = nn.Conv2d(3, widths[0], 3, stride=2, padding=1)
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.GroupNorm(norm_groups(w), w), nn.ReLU(),
                nn.Conv2d(w, w, 3, padding=1), nn.GroupNorm(norm_groups(w), w), nn.ReLU(),
            ))
            prev = w
        self.stages = nn.ModuleList(stages)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        x = torch.relu(self.stem(x))
        out = {}
        for level, stage in zip((2, 3, 4, 5), self.stages):
            x = stage(x)
            out[level] = x
        return out


# ---------------------------------------------------------------- RoI align

def roi_level(boxes: torch.Tensor, canonical: float) -> torch.Tensor:
    """Pyramid level ``clamp(floor(4 + log2(sqrt(area) / canonical)), 2, 5)``."""
    side = ((boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6) * (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-6)).sqrt()
    return torch.floor(4 + torch.log2(side / canonical + 1e-8)).clamp(2, 5).long()


def roi_align(features: torch.Tensor, boxes: torch.Tensor, output_size: int = 7, stride: float = 1.0,
              sampling: int = 2) -> torch.Tensor:
    """Average of bilinear samples on a regular grid inside each bin.

    ``features`` is ``(1, C, H, W)``; ``boxes`` ``(K, 4)`` in image pixels.
    Pixel centres sit at ``(i + 0.5) * stride``; sample coordinates are
    clamped to the map so borders replicate. Returns ``(K, C, S, S)``.
    """
    if features.dim() != 4 or features.shape[0] != 1:
        raise ShapeError(f"roi_align expects a single (1, C, H, W) map, got {tuple(features.shape)}")
    k = boxes.shape[0]
    c, h, w = features.shape[1:]
    if k == 0:
        return features.new_zeros((0, c, output_size, output_size))
    outside = (boxes[:, 2] <= 0) | (boxes[:, 3] <= 0) | (boxes[:, 0] >= w * stride) | (boxes[:, 1] >= h * stride)
    if outside.any():
        i = int(outside.nonzero()[0])
        raise ShapeError(f"box {i} {boxes[i].tolist()} lies entirely outside the feature map")
    n = output_size * sampling
    t = (torch.arange(n, dtype=features.dtype) + 0.5) / n  # fractional positions in the box
    x1 = boxes[:, 0:1] / stride - 0.5
    y1 = boxes[:, 1:2] / stride - 0.5
    bw = (boxes[:, 2:3] - boxes[:, 0:1]) / stride
    bh = (boxes[:, 3:4] - boxes[:, 1:2]) / stride
    px = (x1 + t * bw).clamp(0, w - 1)  # (K, n)
    py = (y1 + t * bh).clamp(0, h - 1)
    gy = py[:, :, None].expand(k, n, n)
    gx = px[:, None, :].expand(k, n, n)
    samples = bilinear_sample(features, gy.reshape(1, k, n, n), gx.reshape(1, k, n, n))[0]  # (C, K, n, n)
    samples = samples.permute(1, 0, 2, 3)
    return F.avg_pool2d(samples, sampling)


# ----------------------------------------------------------------- detector

def _image_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    x = torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)
    return (x / 255.0 - 0.5) / 0.25


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, layout: ClassifierLayout):
        super().__init__()
        self.cfg = cfg
        self.layout = layout
        self.backbone = Backbone(cfg.backbone_widths)
        s = cfg.image_size
        sizes = {n: (s // 2 ** n, s // 2 ** n) for n in (2, 3, 4, 5)}
        in_ch = dict(zip((2, 3, 4, 5), cfg.backbone_widths))
        self.neck = CFPAN(in_ch, sizes, cfg.neck)
        self.rpn = MRRPN(cfg.neck.width, cfg.rpn)
        flat = cfg.neck.width * cfg.roi_size ** 2
        self.fc1 = nn.Linear(flat, cfg.head_hidden)
        self.fc2 = nn.Linear(cfg.head_hidden, cfg.head_hidden)
        self.cls_weight = nn.Parameter(torch.empty(layout.num_nodes, cfg.head_hidden))
        self.box_head = nn.Linear(cfg.head_hidden, 4)
        # cosine logits are scale-free in w; unit-scale rows keep the gradient 1/|w| moderate
        nn.init.normal_(self.cls_weight, std=cfg.head_hidden ** -0.5)
        nn.init.normal_(self.box_head.weight, std=0.001)
        nn.init.zeros_(self.box_head.bias)
        if cfg.zero_init_heads:
            self._zero_heads()

    def _zero_heads(self):
        with torch.no_grad():
            for st in self.rpn.stages:
                st.delta.weight.zero_()
                st.delta.bias.zero_()
            for head in (self.rpn.final.reg, self.rpn.final.cls):
                head.weight.zero_()
                head.bias.zero_()
            self.cls_weight.zero_()
            self.box_head.weight.zero_()
            self.box_head.bias.zero_()

    @property
    def image_shape(self):
        return (self.cfg.image_size, self.cfg.image_size)

    def pyramid(self, x):
        return self.neck(self.backbone(x))

    def roi_features(self, pyramid, boxes_per_image):
        """Pooled, flattened RoI features in image order."""
        pooled = []
        strides = self.cfg.rpn.anchors.strides
        for b, boxes in enumerate(boxes_per_image):
            if boxes.shape[0] == 0:
                continue
            lv = roi_level(boxes, self.cfg.roi_canonical)
            out = boxes.new_zeros((boxes.shape[0], self.cfg.neck.width, self.cfg.roi_size, self.cfg.roi_size))
            for level in (2, 3, 4, 5):
                sel = lv == level
                if sel.any():
                    out = out.index_put((sel.nonzero().flatten(),),
                                        roi_align(pyramid[level][b:b + 1], boxes[sel], self.cfg.roi_size,
                                                  strides[level], self.cfg.roi_sampling))
            pooled.append(out)
        if not pooled:
            return self.fc1.weight.new_zeros((0, self.cfg.head_hidden))
        x = torch.cat(pooled).flatten(1)
        return torch.relu(self.fc2(torch.relu(self.fc1(x))))

    def head(self, feats):
        logits = cosine_logits(feats, self.cls_weight, self.cfg.gcl.scale)
        return logits, self.box_head(feats)

    # ------------------------------------------------------------ training

    def _sample_rois(self, proposals, gt, gt_nodes, ignore):
        cfg = self.cfg
        boxes = torch.cat([proposals, gt]) if gt.numel() else proposals
        labels = torch.zeros(boxes.shape[0], dtype=torch.long)
        matched = torch.full((boxes.shape[0],), -1, dtype=torch.long)
        keep = torch.ones(boxes.shape[0], dtype=torch.bool)
        if gt.numel():
            iou = box_iou(boxes, gt)
            best, idx = iou.max(dim=1)
            fg = best >= 0.5
            labels[fg] = gt_nodes[idx[fg]]
            matched[fg] = idx[fg]
        else:
            fg = torch.zeros(boxes.shape[0], dtype=torch.bool)
        if ignore is not None and ignore.numel():
            keep &= ~((box_iou(boxes, ignore).max(dim=1).values >= 0.5) & ~fg)
        fg_idx = torch.nonzero(fg & keep).flatten()
        bg_idx = torch.nonzero(~fg & keep).flatten()
        n_fg = min(len(fg_idx), int(cfg.roi_batch * cfg.roi_fg_fraction))
        fg_idx = fg_idx[torch.randperm(len(fg_idx))[:n_fg]]
        bg_idx = bg_idx[torch.randperm(len(bg_idx))[: cfg.roi_batch - n_fg]]
        sel = torch.cat([fg_idx, bg_idx])
        return boxes[sel], labels[sel], matched[sel]

    def forward(self, x, targets, phase: str = "base") -> LossBreakdown:
        return self.losses(x, targets, phase)

    def losses(self, x, targets, phase: str) -> LossBreakdown:
        """Composed loss for a batch; ``targets`` holds (boxes, nodes, ignore) per image."""
        pyramid = self.pyramid(x)
        ins, outs, obj = self.rpn(pyramid, self.image_shape)
        gt_boxes = [t[0] for t in targets]
        ignore = [t[2] for t in targets]
        reg, cls = self.rpn.losses(ins, outs, obj, gt_boxes, ignore)
        rcfg = self.rpn.cfg
        out = LossBreakdown()
        for tau, r in enumerate(reg, start=1):
            out.add(f"rpn_reg_{tau}", r, rcfg.balance * rcfg.reg_weights[tau - 1])
        out.add("rpn_cls", cls)

        props = self.rpn.proposals(outs[-1], obj, nms)
        rois, labels, matched = [], [], []
        for b, (boxes, nodes, ign) in enumerate(targets):
            r, l, m = self._sample_rois(stop_gradient(props[b][0]), boxes, nodes, ign)
            rois.append(r)
            labels.append(l)
            matched.append(m)
        feats = self.roi_features(pyramid, rois)
        logits, deltas = self.head(feats)
        labels_all = torch.cat(labels)
        if phase == "base":
            out.merge(gcl_base_loss(logits, labels_all, self.layout, self.cfg.gcl))
        else:
            out.merge(gcl_finetune_loss(logits, labels_all, self.layout, self.cfg.gcl, self.cls_weight))
        # smooth-L1 on encoded deltas of foreground RoIs, normalised by sampled RoI count
        bbox = deltas.sum() * 0
        offset = 0
        for b, (r, m) in enumerate(zip(rois, matched)):
            fg = m >= 0
            if fg.any():
                tgt = encode_boxes(r[fg], gt_boxes[b][m[fg]], BOX_WEIGHTS)
                bbox = bbox + F.smooth_l1_loss(deltas[offset:offset + len(r)][fg], tgt, beta=1.0, reduction="sum")
            offset += len(r)
        out.add("bbox", bbox / max(offset, 1))
        return out

    # ------------------------------------------------------------ inference

    @torch.no_grad()
    def detect_tensor(self, x, score_thresh=None, nms_thresh=None) -> List[List[Detection]]:
        cfg = self.cfg
        score_thresh = cfg.score_thresh if score_thresh is None else score_thresh
        nms_thresh = cfg.det_nms if nms_thresh is None else nms_thresh
        pyramid = self.pyramid(x)
        _, outs, obj = self.rpn(pyramid, self.image_shape)
        props = self.rpn.proposals(outs[-1], obj, nms)
        boxes = [p[0] for p in props]
        feats = self.roi_features(pyramid, boxes)
        logits, deltas = self.head(feats)
        active = self.layout.active_nodes
        probs = torch.softmax(logits[:, active], dim=1)
        results, offset = [], 0
        for b, bx in enumerate(boxes):
            n = len(bx)
            p = probs[offset:offset + n]
            dec = decode_boxes(bx, deltas[offset:offset + n], self.image_shape, BOX_WEIGHTS)
            offset += n
            dets = []
            for col, node in enumerate(active[1:], start=1):
                s = p[:, col]
                sel = torch.nonzero(s > score_thresh).flatten()
                if len(sel) == 0:
                    continue
                keep = nms(dec[sel], s[sel], nms_thresh)
                name = self.layout.class_of(node)
                for k in keep:
                    i = int(sel[k])
                    dets.append(Detection([float(v) for v in dec[i]], name, float(s[i])))
            dets.sort(key=lambda d: (-d.score, d.label, d.box))
            results.append(dets[: cfg.max_dets])
        return results


def forward_detect(detector: Detector, image: np.ndarray, score_thresh=None, nms_thresh=None,
                   classes: Optional[Sequence[str]] = None) -> List[Detection]:
    """Detections for one ``(H, W, 3)`` uint8 image, sorted by score."""
    if classes is not None:
        known = set(detector.layout.base_classes) | set(detector.layout.novel_classes)
        missing = sorted(set(classes) - known)
        if missing:
            raise ProtocolError(f"checkpoint cannot detect {missing}: not in its classifier layout "
                                f"(novel classes need a fine-tuned checkpoint)")
    if tuple(image.shape[:2]) != detector.image_shape:
        raise ShapeError(f"image is {image.shape[:2]}, detector configured for {detector.image_shape}")
    detector.eval()
    dets = detector.detect_tensor(_image_tensor([image]), score_thresh, nms_thresh)[0]
    if classes is not None:
        dets = [d for d in dets if d.label in set(classes)]
    return dets


@torch.no_grad()
def placeholder_activity(detector: Detector, dataset: Dataset, batch_size: int = 8) -> Dict[str, float]:
    """Mean |logit| of placeholder and base nodes over the proposals of ``dataset``."""
    detector.eval()
    lay = detector.layout
    ph, base = [], []
    for i in range(0, len(dataset), batch_size):
        x = _image_tensor([im.image for im in dataset.images[i:i + batch_size]])
        pyramid = detector.pyramid(x)
        _, outs, obj = detector.rpn(pyramid, detector.image_shape)
        boxes = [p[0] for p in detector.rpn.proposals(outs[-1], obj, nms)]
        logits, _ = detector.head(detector.roi_features(pyramid, boxes))
        ph.append(logits[:, lay.placeholder_nodes].abs().flatten())
        base.append(logits[:, lay.base_nodes].abs().flatten())
    p, b = float(torch.cat(ph).mean()), float(torch.cat(base).mean())
    return {"placeholder": p, "base": b, "ratio": p / b if b > 0 else float("inf")}


def detect_dataset(detector: Detector, dataset: Dataset, batch_size: int = 8, score_thresh=None):
    detector.eval()
    out = []
    for i in range(0, len(dataset), batch_size):
        chunk = dataset.images[i:i + batch_size]
        out.extend(detector.detect_tensor(_image_tensor([im.image for im in chunk]), score_thresh))
    return out


# ---------------------------------------------------------------- protocol

def _targets(images: Sequence[AnnotatedImage], layout: ClassifierLayout, flips: Sequence[bool], size: int):
    out = []
    for im, flip in zip(images, flips):
        boxes = torch.as_tensor(im.boxes, dtype=torch.float32).reshape(-1, 4)
        ign = torch.as_tensor(im.ignore, dtype=torch.float32).reshape(-1, 4)
        if flip:
            boxes = torch.stack([size - boxes[:, 2], boxes[:, 1], size - boxes[:, 0], boxes[:, 3]], dim=1)
            ign = torch.stack([size - ign[:, 2], ign[:, 1], size - ign[:, 0], ign[:, 3]], dim=1)
        nodes = torch.as_tensor([layout.node(c) for c in im.classes], dtype=torch.long)
        out.append((boxes, nodes, ign))
    return out


def _lr_at(step, total, tc: TrainConfig):
    lr = tc.lr
    for frac in tc.decay_at:
        if step >= frac * total:
            lr *= 0.1
    if tc.warmup_iters and step < tc.warmup_iters:
        lr *= 0.1 + 0.9 * step / tc.warmup_iters
    return lr


def _optimizer(params, tc: TrainConfig):
    if tc.optimizer == "adamw":
        # momentum doubles as beta1
        return torch.optim.AdamW(params, lr=tc.lr, betas=(tc.momentum, 0.999), weight_decay=tc.weight_decay)
    return torch.optim.SGD(params, lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)


def _run_training(det: Detector, dataset: Dataset, tc: TrainConfig, phase: str, seed: int,
                  log_path=None, callback: Optional[Callable] = None, params=None):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = [p for p in (params if params is not None else det.parameters()) if p.requires_grad]
    opt = _optimizer(params, tc)
    n = len(dataset)
    per_epoch = math.ceil(n / tc.batch_size)
    total = per_epoch * tc.epochs
    fh = open(log_path, "w") if log_path else None
    history = []
    step = 0
    det.train()
    try:
        for epoch in range(tc.epochs):
            order = rng.permutation(n)
            for i in range(0, n, tc.batch_size):
                batch = [dataset.images[j] for j in order[i:i + tc.batch_size]]
                flips = rng.random(len(batch)) < 0.5 if tc.flip else np.zeros(len(batch), dtype=bool)
                pixels = [im.image[:, ::-1] if f else im.image for im, f in zip(batch, flips)]
                x = _image_tensor(pixels)
                targets = _targets(batch, det.layout, flips, det.cfg.image_size)
                lr = _lr_at(step, total, tc)
                for g in opt.param_groups:
                    g["lr"] = lr
                breakdown = det.losses(x, targets, phase)
                loss = breakdown.total
                opt.zero_grad()
                loss.backward()
                if tc.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
                opt.step()
                rec = breakdown.as_record()
                rec.update(step=step, epoch=epoch, lr=lr, phase=phase, simplex_error=det.neck.simplex_error())
                history.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if callback:
                    callback(det, rec)
                step += 1
    finally:
        if fh:
            fh.close()
    return history


def _dataset_classes(dataset: Dataset):
    return {c for im in dataset.images for c in im.classes}


def build_detector(cfg: DetectorConfig, base_classes: Sequence[str]) -> Detector:
    torch.manual_seed(cfg.seed)
    layout = ClassifierLayout(tuple(base_classes), cfg.gcl.num_placeholders)
    return Detector(cfg, layout)


def train_base(dataset: Dataset, cfg: DetectorConfig, base_classes: Sequence[str], seed: Optional[int] = None,
               log_path=None, callback=None) -> "Checkpoint":
    """Base training on base classes only; returns a ``phase='base'`` checkpoint."""
    foreign = sorted(_dataset_classes(dataset) - set(base_classes))
    if foreign:
        raise ProtocolError(f"base-training data contains non-base (novel) instances: {foreign}")
    seed = cfg.seed if seed is None else seed
    torch.set_num_threads(cfg.threads)
    cfg_used = config_util.from_dict(DetectorConfig, {**cfg.to_dict(), "seed": seed})
    det = build_detector(cfg_used, base_classes)
    history = _run_training(det, dataset, cfg.base, "base", seed, log_path, callback)
    ckpt = Checkpoint.from_detector(det, "base")
    ckpt.history = history
    return ckpt


def fine_tune(ckpt: "Checkpoint", dataset: Dataset, novel_classes: Sequence[str], seed: int = 0,
              cfg: Optional[DetectorConfig] = None, log_path=None, callback=None) -> "Checkpoint":
    """Fine-tune a base checkpoint on a K-shot set with the backbone frozen."""
    if ckpt.phase != "base":
        raise ProtocolError(f"fine-tuning requires a base checkpoint, got phase {ckpt.phase!r}")
    det = ckpt.to_detector()
    if cfg is not None:
        # training-schedule fields may differ from the base run; architecture may not
        det.cfg.finetune = cfg.finetune
        det.cfg.finetune_mode = cfg.finetune_mode
    torch.set_num_threads(det.cfg.threads)
    layout = det.layout
    gcfg = det.cfg.gcl
    if gcfg.mode == "standard" and layout.num_placeholders < len(set(novel_classes)):
        # plain-CE baseline: fresh output nodes for the novel classes
        extra = len(set(novel_classes)) - layout.num_placeholders
        torch.manual_seed(seed)
        new_rows = torch.randn(extra, det.cls_weight.shape[1]) * 0.01
        det.cls_weight = nn.Parameter(torch.cat([det.cls_weight.data, new_rows]))
        layout = ClassifierLayout(layout.base_classes, layout.num_placeholders + extra)
    det.layout = activate_placeholders(layout, novel_classes)
    allowed = set(det.layout.base_classes) | set(det.layout.novel_classes)
    foreign = sorted(_dataset_classes(dataset) - allowed)
    if foreign:
        raise ProtocolError(f"fine-tune data contains classes outside the layout: {foreign}")
    for p in det.backbone.parameters():
        p.requires_grad_(False)
    params = [p for name, p in det.named_parameters() if not name.startswith("backbone.")]
    history = _run_training(det, dataset, det.cfg.finetune, "finetune", seed, log_path, callback, params)
    out = Checkpoint.from_detector(det, "finetuned")
    out.history = history
    return out


# -------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    state: Dict[str, np.ndarray]
    layout: ClassifierLayout
    config: dict
    phase: str
    rng_state: np.ndarray = field(default_factory=lambda: torch.get_rng_state().numpy().copy())
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ProtocolError(f"unknown checkpoint phase {self.phase!r}")

    @classmethod
    def from_detector(cls, det: Detector, phase: str, meta=None):
        state = {k: v.detach().cpu().numpy().copy() for k, v in det.state_dict().items()}
        return cls(state, det.layout, det.cfg.to_dict(), phase, meta=dict(meta or {}))

    def to_detector(self) -> Detector:
        cfg = DetectorConfig.from_dict(self.config)
        det = Detector(cfg, self.layout)
        if self.state["cls_weight"].shape != tuple(det.cls_weight.shape):
            det.cls_weight = nn.Parameter(torch.zeros(self.state["cls_weight"].shape))
        det.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        return det

    def backbone_digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.state):
            if k.startswith("backbone."):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self.state[k]).tobytes())
        return h.hexdigest()

    def save(self, path) -> Path:
        """Zip container: ``manifest.json`` plus one ``.npy`` per tensor, fixed timestamps."""
        path = Path(path)
        manifest = {
            "version": CHECKPOINT_VERSION, "phase": self.phase, "layout": self.layout.to_dict(),
            "config": self.config, "meta": self.meta, "tensors": sorted(self.state),
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            def put(name, data):
                info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = 0o644 << 16
                zf.writestr(info, data)
            put("manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
            for k in sorted(self.state):
                buf = io.BytesIO()
                np.save(buf, self.state[k], allow_pickle=False)
                put(f"tensors/{k}.npy", buf.getvalue())
            buf = io.BytesIO()
            np.save(buf, np.asarray(self.rng_state, dtype=np.uint8), allow_pickle=False)
            put("rng_state.npy", buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(f"unsupported checkpoint version {manifest.get('version')!r}")
            state = {k: np.load(io.BytesIO(zf.read(f"tensors/{k}.npy")), allow_pickle=False)
                     for k in manifest["tensors"]}
            rng = np.load(io.BytesIO(zf.read("rng_state.npy")), allow_pickle=False)
        return cls(state, ClassifierLayout.from_dict(manifest["layout"]), manifest["config"],
                   manifest["phase"], rng, manifest.get("meta", {}))
