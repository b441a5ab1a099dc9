"""IoU, NMS, average precision and mAP reports.

AP uses all-points interpolation (area under the monotone precision
envelope, VOC2010 style) at IoU 0.5. Detections are matched greedily in
descending score order; each detection takes the unmatched ground truth of
highest IoU in its image, so no ground truth is ever counted twice.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)

REPORT_VERSION = 1
INTERPOLATION = "all-points"


def iou(a, b) -> float:
    """IoU of two ``(x1, y1, x2, y2)`` boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, scores, threshold: float, max_keep: Optional[int] = None) -> List[int]:
    """Greedy NMS; equal scores are visited in ascending index order.

    IoU rows are computed only for kept boxes; ``max_keep`` stops early.
    """
    # numpy per-row work is several times cheaper than torch for these small arrays
    boxes = torch.as_tensor(boxes).detach().reshape(-1, 4).double().numpy()
    scores = torch.as_tensor(scores).detach().reshape(-1).double().numpy()
    if len(scores) == 0:
        return []
    # stable sort on -score gives descending score, lower index first on ties
    order = np.argsort(-scores, kind="stable")
    boxes = boxes[order]
    area = np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(int(order[i]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = boxes[i + 1:]
        w = np.clip(np.minimum(rest[:, 2], boxes[i, 2]) - np.maximum(rest[:, 0], boxes[i, 0]), 0, None)
        h = np.clip(np.minimum(rest[:, 3], boxes[i, 3]) - np.maximum(rest[:, 1], boxes[i, 1]), 0, None)
        inter = w * h
        ious = inter / np.maximum(area[i] + area[i + 1:] - inter, 1e-12)
        alive[i + 1:] &= ~(ious > threshold)
    return keep


def match_detections(detections: Sequence, ground_truths: Mapping, iou_threshold: float = 0.5) -> np.ndarray:
    """True-positive flags for ``detections`` in descending score order.

    ``detections`` holds ``(image_id, score, box)`` triples, ``ground_truths``
    maps image id to a list of boxes.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    used = {k: np.zeros(len(v), dtype=bool) for k, v in ground_truths.items()}
    flags = np.zeros(len(detections), dtype=bool)
    for rank, i in enumerate(order):
        img, _, box = detections[i]
        gts = ground_truths.get(img, [])
        best, best_j = iou_threshold, -1
        for j, g in enumerate(gts):
            if used[img][j]:
                continue
            o = iou(box, g)
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            flags[rank] = True
    return flags


def ap_from_flags(tp_flags, n_gt: int) -> float:
    """All-points interpolated AP from score-ordered TP flags."""
    if n_gt == 0:
        return math.nan
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    rec = tp / n_gt
    prec = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(detections, ground_truths, iou_threshold: float = 0.5) -> float:
    n_gt = sum(len(v) for v in ground_truths.values())
    return ap_from_flags(match_detections(detections, ground_truths, iou_threshold), n_gt)


def precision_recall(detections, ground_truths, iou_threshold: float = 0.5):
    n_gt = sum(len(v) for v in ground_truths.values())
    flags = match_detections(detections, ground_truths, iou_threshold)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    return tp / max(n_gt, 1), tp / np.maximum(tp + fp, 1)


@dataclass
class EvalReport:
    per_class_ap: Dict[str, Optional[float]]
    novel_classes: List[str]
    base_classes: List[str]
    shot: Optional[int]
    seed: Optional[int]
    counts: Dict[str, int]
    iou_threshold: float = 0.5
    interpolation: str = INTERPOLATION
    version: int = REPORT_VERSION
    config: dict = field(default_factory=dict)

    @staticmethod
    def _mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def novel_map(self) -> Optional[float]:
        return self._mean(self.per_class_ap.get(c) for c in self.novel_classes)

    @property
    def base_map(self) -> Optional[float]:
        return self._mean(self.per_class_ap.get(c) for c in self.base_classes)

    def to_dict(self):
        d = asdict(self)
        d["novel_map"] = self.novel_map
        d["base_map"] = self.base_map
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d.pop("novel_map", None)
        d.pop("base_map", None)
        return cls(**d)


def score_dataset(predictions, annotations, classes: Sequence[str], iou_threshold: float = 0.5):
    """Per-class AP from per-image predictions and annotations.

    ``predictions[i]`` is a list of ``(class_name, score, box)``;
    ``annotations[i]`` a list of ``(class_name, box)``. Classes without any
    ground truth get ``None`` (excluded from means).
    """
    out = {}
    for cls in classes:
        dets = [(i, s, b) for i, preds in enumerate(predictions) for c, s, b in preds if c == cls]
        gts = {i: [b for c, b in ann if c == cls] for i, ann in enumerate(annotations)}
        if sum(len(v) for v in gts.values()) == 0:
            log.info("class %s has no ground truth; excluded from mAP", cls)
            out[cls] = None
            continue
        out[cls] = average_precision(dets, gts, iou_threshold)
    return out


def evaluate(detector, dataset, split, shot: Optional[int] = None, seed: Optional[int] = None,
             score_thresh: float = 0.05, config: Optional[dict] = None) -> EvalReport:
    """Score a detector on an annotated dataset, separating base and novel classes."""
    from .detector import detect_dataset
    from .errors import ProtocolError

    layout = detector.layout
    if set(split.base) != set(layout.base_classes):
        raise ProtocolError(f"split base classes {sorted(split.base)} differ from checkpoint layout "
                            f"{sorted(layout.base_classes)}")
    known = set(layout.novel_classes)
    if known and not known <= set(split.novel):
        raise ProtocolError(f"checkpoint novel classes {sorted(known)} are not in the split")
    classes = list(split.base) + list(split.novel)
    preds = detect_dataset(detector, dataset, score_thresh=score_thresh)
    predictions = [[(d.label, d.score, d.box) for d in dets] for dets in preds]
    annotations = [list(zip(im.classes, im.boxes.tolist())) for im in dataset.images]
    ap = score_dataset(predictions, annotations, classes)
    # a class the detector cannot emit scores 0, not "undefined"
    counts = {"images": len(dataset), "gt": sum(len(a) for a in annotations),
              "detections": sum(len(p) for p in predictions)}
    return EvalReport(ap, list(split.novel), list(split.base), shot, seed, counts, config=config or {})
