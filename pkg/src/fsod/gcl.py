"""Cosine classifier with placeholder nodes and its two-phase loss.

Node layout: index 0 is background, ``1..B`` the base classes, and
``B+1..B+R`` the placeholder nodes reserved for novel classes. During base
training placeholders are masked out of the softmax and only an L1 penalty
on their logits touches them. Fine-tuning binds novel classes to
placeholder slots (sorted by class name) and trains the joint softmax over
background, base and bound nodes, with an L2 penalty on classifier weights.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigError, ProtocolError

NORM_EPS = 1e-8

# incremented whenever a zero-norm vector hits the epsilon floor
debug_counters: Counter = Counter()


@dataclass
class GCLConfig:
    placeholder_weight: float = 0.1
    regularization_weight: float = 1e-4
    scale: float = 20.0
    num_placeholders: int = 8
    mode: str = "gcl"  # "gcl" | "standard"

    def __post_init__(self):
        if self.mode not in ("gcl", "standard"):
            raise ConfigError(f"gcl.mode must be 'gcl' or 'standard', got {self.mode!r}")
        if self.placeholder_weight < 0 or self.regularization_weight < 0 or self.scale <= 0:
            raise ConfigError("GCL coefficients must be non-negative and the scale positive")
        if self.num_placeholders < 0:
            raise ConfigError("num_placeholders must be >= 0")

    @classmethod
    def standard(cls, **kw):
        """Plain cross-entropy baseline: no placeholders, no penalties."""
        return cls(placeholder_weight=0.0, regularization_weight=0.0, num_placeholders=0, mode="standard", **kw)


@dataclass(frozen=True)
class ClassifierLayout:
    base_classes: Tuple[str, ...]
    num_placeholders: int
    bindings: Tuple[Tuple[str, int], ...] = ()  # (novel class, placeholder slot)

    @property
    def background(self) -> int:
        return 0

    @property
    def num_base(self) -> int:
        return len(self.base_classes)

    @property
    def num_nodes(self) -> int:
        return 1 + self.num_base + self.num_placeholders

    @property
    def base_nodes(self) -> List[int]:
        return list(range(1, 1 + self.num_base))

    @property
    def placeholder_nodes(self) -> List[int]:
        return list(range(1 + self.num_base, self.num_nodes))

    @property
    def novel_classes(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.bindings)

    @property
    def bound_nodes(self) -> List[int]:
        return [1 + self.num_base + slot for _, slot in self.bindings]

    @property
    def unbound_nodes(self) -> List[int]:
        bound = set(self.bound_nodes)
        return [n for n in self.placeholder_nodes if n not in bound]

    @property
    def active_nodes(self) -> List[int]:
        return [0] + self.base_nodes + self.bound_nodes

    @property
    def activated(self) -> bool:
        return bool(self.bindings)

    def node(self, name: str) -> int:
        if name in self.base_classes:
            return 1 + self.base_classes.index(name)
        for novel, slot in self.bindings:
            if novel == name:
                return 1 + self.num_base + slot
        raise ProtocolError(f"class {name!r} has no active classifier node")

    def class_of(self, node: int) -> str:
        if node == 0:
            return "__background__"
        if node <= self.num_base:
            return self.base_classes[node - 1]
        for novel, slot in self.bindings:
            if node == 1 + self.num_base + slot:
                return novel
        raise ProtocolError(f"node {node} is an unbound placeholder")

    def to_dict(self):
        return {"base_classes": list(self.base_classes), "num_placeholders": self.num_placeholders,
                "bindings": [[n, s] for n, s in self.bindings]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["base_classes"]), int(d["num_placeholders"]),
                   tuple((n, int(s)) for n, s in d.get("bindings", ())))


def activate_placeholders(layout: ClassifierLayout, novel_classes: Iterable[str]) -> ClassifierLayout:
    """Bind sorted novel class names to placeholder slots 0, 1, ..."""
    names = sorted(set(novel_classes))
    overlap = set(names) & set(layout.base_classes)
    if overlap:
        raise ProtocolError(f"novel classes overlap base classes: {sorted(overlap)}")
    if len(names) > layout.num_placeholders:
        raise ProtocolError(
            f"{len(names)} novel classes but only {layout.num_placeholders} placeholder nodes; "
            f"increase gcl.num_placeholders to at least {len(names)}"
        )
    return replace(layout, bindings=tuple((n, i) for i, n in enumerate(names)))


@dataclass
class LossBreakdown:
    """Named loss components and the weights that combine them into ``total``."""

    components: Dict[str, torch.Tensor] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: torch.Tensor, weight: float = 1.0):
        self.components[name] = value
        self.weights[name] = float(weight)
        return self

    def merge(self, other: "LossBreakdown") -> "LossBreakdown":
        for k, v in other.components.items():
            self.add(k, v, other.weights[k])
        return self

    @property
    def total(self) -> torch.Tensor:
        terms = [self.weights[k] * v for k, v in self.components.items()]
        return sum(terms[1:], terms[0]) if terms else torch.zeros(())

    def reconstruct(self) -> float:
        """Total recomputed in float64 from the logged component values."""
        return sum(self.weights[k] * float(v.detach()) for k, v in self.components.items())

    def as_record(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "components": {k: float(v.detach()) for k, v in self.components.items()},
            "weights": dict(self.weights),
        }


def cosine_logits(features: torch.Tensor, class_weights: torch.Tensor, scale: float) -> torch.Tensor:
    """``scale * cos(f_i, w_j)`` with norms floored at ``NORM_EPS``."""
    fn = features.norm(dim=1, keepdim=True)
    wn = class_weights.norm(dim=1, keepdim=True)
    n_small = int((fn < NORM_EPS).sum()) + int((wn < NORM_EPS).sum())
    if n_small:
        debug_counters["zero_norm"] += n_small
    f = features / fn.clamp(min=NORM_EPS)
    w = class_weights / wn.clamp(min=NORM_EPS)
    return scale * f @ w.t()


def _mean_abs(logits, nodes):
    if not nodes or logits.shape[0] == 0:
        return logits.sum() * 0
    return logits[:, nodes].abs().mean()


def _ce(logits, labels):
    if labels.numel() == 0:
        return logits.sum() * 0
    return F.cross_entropy(logits, labels)


def gcl_base_loss(logits, labels, layout: ClassifierLayout, cfg: GCLConfig) -> LossBreakdown:
    """Cross-entropy over background+base nodes plus L1 on placeholder logits."""
    n_closed = 1 + layout.num_base
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_closed):
        bad = labels[(labels < 0) | (labels >= n_closed)][0].item()
        raise ProtocolError(f"label node {bad} is not background or a base class during base training")
    out = LossBreakdown()
    out.add("base_ce", _ce(logits[:, :n_closed], labels))
    if cfg.mode == "gcl":
        out.add("placeholder_l1", _mean_abs(logits, layout.placeholder_nodes), cfg.placeholder_weight)
    return out


def gcl_finetune_loss(logits, labels, layout: ClassifierLayout, cfg: GCLConfig,
                      classifier_weights: Optional[torch.Tensor] = None) -> LossBreakdown:
    """Joint-softmax CE on base (incl. background) and novel groups plus L2.

    Each group contributes the mean CE over its samples, or 0 if absent.
    Unbound placeholders stay masked and keep their L1 penalty.
    """
    active = layout.active_nodes
    pos = torch.full((layout.num_nodes,), -1, dtype=torch.long)
    pos[active] = torch.arange(len(active))
    mapped = pos[labels] if labels.numel() else labels
    if labels.numel() and (mapped < 0).any():
        bad = labels[mapped < 0][0].item()
        raise ProtocolError(f"label node {bad} refers to a masked placeholder")
    sub = logits[:, active]
    out = LossBreakdown()
    if cfg.mode == "standard":
        out.add("ce", _ce(sub, mapped))
        return out
    is_base = labels <= layout.num_base
    out.add("base_ce", _ce(sub[is_base], mapped[is_base]))
    out.add("novel_ce", _ce(sub[~is_base], mapped[~is_base]))
    out.add("placeholder_l1", _mean_abs(logits, layout.unbound_nodes), cfg.placeholder_weight)
    l2 = (classifier_weights ** 2).sum() if classifier_weights is not None else logits.sum() * 0
    out.add("l2_reg", l2, cfg.regularization_weight)
    return out
