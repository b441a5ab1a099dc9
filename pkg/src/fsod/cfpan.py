"""Cross-level fusion pyramid attention neck.

The top level C5 is passed through CBAM (channel gate, then spatial gate);
levels 4, 3 and 2 are then produced top-down as a pointwise convex
combination of the upsampled previous output, the upsampled lateral of the
next-coarser backbone map, and the lateral of the current backbone map::

    P_n = a * U(P_{n+1}) + b * U(lat(C_{n+1})) + g * lat(C_n)

with ``(a, b, g) = softmax(logits)`` evaluated per location at level-n
resolution. Holding the weights at the fine resolution (rather than
weighting before upsampling) makes ``a + b + g == 1`` hold exactly at every
output location; since upsampling is linear the two forms coincide for
spatially constant weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .nn_primitives import bilinear_upsample, conv2d, global_avg_pool, global_max_pool

LEVELS = (2, 3, 4, 5)

# frozen (alpha, beta, gamma) used when the neck runs as a plain FPN baseline
STATIC_FUSION = (0.5, 0.0, 0.5)


@dataclass
class NeckConfig:
    width: int = 64
    cbam: bool = True
    reduction: int = 4
    fusion: str = "adaptive"  # "adaptive" | "static"
    logit_jitter: float = 0.0

    def __post_init__(self):
        if self.fusion not in ("adaptive", "static"):
            raise ConfigError(f"neck.fusion must be 'adaptive' or 'static', got {self.fusion!r}")
        if self.width < 1 or self.reduction < 1:
            raise ConfigError("neck.width and neck.reduction must be positive")


def _mlp(v, w1, b1, w2, b2):
    return torch.relu(v @ w1.t() + b1) @ w2.t() + b2


def channel_attention(x, w1, b1, w2, b2):
    """Channel gate ``sigmoid(MLP(avgpool x) + MLP(maxpool x))`` as (B, C, 1, 1)."""
    if w1.shape[1] != x.shape[1] or w2.shape[0] != x.shape[1]:
        raise ShapeError(
            f"CBAM MLP expects {w1.shape[1]} input / {w2.shape[0]} output channels, feature has {x.shape[1]}"
        )
    logits = _mlp(global_avg_pool(x), w1, b1, w2, b2) + _mlp(global_max_pool(x), w1, b1, w2, b2)
    return torch.sigmoid(logits)[:, :, None, None]


def spatial_attention(x, weight, bias):
    """Spatial gate from a 7x7 conv over the channel-mean and channel-max maps."""
    pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
    pad = (weight.shape[-1] - 1) // 2
    return torch.sigmoid(conv2d(pooled, weight, bias, padding=pad))


class CBAM(nn.Module):
    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def channel_map(self, x):
        return channel_attention(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)

    def spatial_map(self, x):
        return spatial_attention(x, self.spatial.weight, self.spatial.bias)

    def forward(self, x):
        x = self.channel_map(x) * x
        return self.spatial_map(x) * x


def apply_cbam(c5: torch.Tensor, cbam: CBAM) -> torch.Tensor:
    return cbam(c5)


def fusion_weights(logits: torch.Tensor):
    """Split ``(3, H, W)`` logits into pointwise-softmax (alpha, beta, gamma)."""
    w = torch.softmax(logits, dim=0)
    return w[0], w[1], w[2]


def fuse_level(
    p_next: torch.Tensor,
    c_next: torch.Tensor,
    c_cur: torch.Tensor,
    logits: torch.Tensor,
    lateral_next: Callable = lambda t: t,
    lateral_cur: Callable = lambda t: t,
) -> torch.Tensor:
    if p_next.shape[2:] != c_next.shape[2:]:
        raise ShapeError(f"P_next {tuple(p_next.shape[2:])} and C_next {tuple(c_next.shape[2:])} differ in size")
    h, w = c_cur.shape[2:]
    if (h, w) != (2 * p_next.shape[2], 2 * p_next.shape[3]):
        raise ShapeError(
            f"C_cur must be exactly 2x the coarser level: got {(h, w)} vs {tuple(p_next.shape[2:])}"
        )
    if tuple(logits.shape) != (3, h, w):
        raise ShapeError(f"fusion logits must have shape (3, {h}, {w}), got {tuple(logits.shape)}")
    a, b, g = fusion_weights(logits)
    return a * bilinear_upsample(p_next, 2) + b * bilinear_upsample(lateral_next(c_next), 2) + g * lateral_cur(c_cur)


class FusionLevel(nn.Module):
    """Learnable (or frozen) fusion logits for one pyramid level."""

    def __init__(self, size, static: bool = False, jitter: float = 0.0, generator=None):
        super().__init__()
        h, w = size
        if static:
            probs = torch.tensor(STATIC_FUSION).view(3, 1, 1).expand(3, h, w)
            # log(0) = -inf, so the frozen beta is exactly 0 after softmax
            self.register_buffer("logits", torch.log(probs).clone())
        else:
            init = torch.zeros(3, h, w)
            if jitter > 0:
                init += jitter * torch.randn(3, h, w, generator=generator)
            self.logits = nn.Parameter(init)

    def weights(self):
        return fusion_weights(self.logits)


class CFPAN(nn.Module):
    """Neck mapping backbone levels ``{2..5}`` to equal-width pyramid maps."""

    def __init__(self, in_channels: Dict[int, int], sizes: Dict[int, tuple], cfg: Optional[NeckConfig] = None,
                 generator=None):
        super().__init__()
        cfg = cfg or NeckConfig()
        self.cfg = cfg
        for n in LEVELS[:-1]:
            hs, ws = sizes[n]
            hn, wn = sizes[n + 1]
            if (hs, ws) != (2 * hn, 2 * wn):
                raise ShapeError(f"level {n} size {sizes[n]} is not twice level {n + 1} size {sizes[n + 1]}")
        self.sizes = {n: tuple(sizes[n]) for n in LEVELS}
        self.lateral = nn.ModuleDict({str(n): nn.Conv2d(in_channels[n], cfg.width, 1) for n in LEVELS})
        self.cbam = CBAM(cfg.width, cfg.reduction) if cfg.cbam else None
        self.fusion = nn.ModuleDict({
            str(n): FusionLevel(sizes[n], static=cfg.fusion == "static", jitter=cfg.logit_jitter, generator=generator)
            for n in LEVELS[:-1]
        })

    def forward(self, feats: Dict[int, torch.Tensor]) -> Dict[int, torch.Tensor]:
        missing = [n for n in LEVELS if n not in feats]
        if missing:
            raise ShapeError(f"pyramid is missing levels {missing}")
        for n in LEVELS:
            if tuple(feats[n].shape[2:]) != self.sizes[n]:
                raise ShapeError(f"level {n} has size {tuple(feats[n].shape[2:])}, neck built for {self.sizes[n]}")
        p5 = self.lateral["5"](feats[5])
        out = {5: self.cbam(p5) if self.cbam is not None else p5}
        for n in (4, 3, 2):
            out[n] = fuse_level(
                out[n + 1], feats[n + 1], feats[n], self.fusion[str(n)].logits,
                self.lateral[str(n + 1)], self.lateral[str(n)],
            )
        return out

    def simplex_error(self) -> float:
        """Largest ``|alpha + beta + gamma - 1|`` over all levels and locations."""
        err = 0.0
        with torch.no_grad():
            for lvl in self.fusion.values():
                a, b, g = lvl.weights()
                err = max(err, float((a + b + g - 1).abs().max()))
        return err
