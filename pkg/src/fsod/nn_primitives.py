"""Differentiable kernels used by the neck and the proposal head.

All functions operate on ``(batch, channels, height, width)`` tensors and are
pure. Dilated convolution is delegated to ``torch.nn.functional.conv2d``;
deformable convolution, bilinear sampling and upsampling are implemented
here on top of gather operations so that autograd provides gradients with
respect to inputs, weights and sampling offsets alike.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import GradcheckError, ShapeError

__all__ = [
    "ConvSpec",
    "conv2d",
    "bilinear_sample",
    "deformable_conv2d",
    "bilinear_upsample",
    "global_avg_pool",
    "global_max_pool",
    "gradcheck",
    "GradcheckResult",
    "StopGradientTape",
    "stop_gradient",
]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.dilation < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeError("dilation and stride must be >= 1 and padding >= 0")

    @property
    def receptive_field(self) -> int:
        return (self.kernel_size - 1) * self.dilation + 1

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.receptive_field) // self.stride + 1
        if out < 1:
            raise ShapeError(f"input extent {size} too small for receptive field {self.receptive_field}")
        return out

    @classmethod
    def same(cls, in_channels, out_channels, kernel_size=3, dilation=1):
        """Stride-1 spec whose zero padding preserves spatial resolution."""
        return cls(in_channels, out_channels, kernel_size, 1, dilation * (kernel_size - 1) // 2, dilation)


def _check_input(x: torch.Tensor, name: str = "input") -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channels, height, width), got shape {tuple(x.shape)}")


def _check_weight(x, weight, stride, padding, dilation):
    _check_input(x)
    if weight.dim() != 4:
        raise ShapeError(f"weight must be 4-D (out, in, kh, kw), got shape {tuple(weight.shape)}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"in_channels mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"kernel must be square, got {tuple(weight.shape[2:])}")
    spec = ConvSpec(weight.shape[1], weight.shape[0], weight.shape[2], stride, padding, dilation)
    return spec, spec.output_size(x.shape[2]), spec.output_size(x.shape[3])


def conv2d(x, weight, bias=None, *, stride=1, padding=0, dilation=1):
    """Zero-padded (optionally dilated) 2-D cross-correlation."""
    _check_weight(x, weight, stride, padding, dilation)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},), got {tuple(bias.shape)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, dilation=dilation)


def bilinear_sample(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at fractional pixel coordinates.

    ``py`` and ``px`` have shape ``(batch, *S)`` and index pixel centres
    (integer coordinates hit pixels exactly). Each of the four interpolation
    corners that falls outside the image reads zero. Returns
    ``(batch, channels, *S)``.
    """
    _check_input(x)
    b, c, h, w = x.shape
    if py.shape != px.shape or py.shape[0] != b:
        raise ShapeError(f"coordinate shapes {tuple(py.shape)} / {tuple(px.shape)} do not match batch {b}")
    sample_shape = py.shape[1:]
    py = py.reshape(b, -1)
    px = px.reshape(b, -1)
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.long()
    x0 = x0.long()
    flat = x.reshape(b, c, h * w)
    out = None
    for dy, wy in ((0, 1 - ly), (1, ly)):
        for dx, wx in ((0, 1 - lx), (1, lx)):
            yc = y0 + dy
            xc = x0 + dx
            valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
            idx = (yc.clamp(0, h - 1) * w + xc.clamp(0, w - 1)).unsqueeze(1).expand(b, c, -1)
            term = torch.gather(flat, 2, idx) * (wy * wx * valid.to(x.dtype)).unsqueeze(1)
            out = term if out is None else out + term
    return out.reshape(b, c, *sample_shape)


def deformable_conv2d(x, weight, offsets, bias=None, *, stride=1, padding=0, dilation=1):
    """Offset-only deformable convolution.

    ``offsets`` has shape ``(batch, 2*k*k, out_h, out_w)``; channel ``2*t``
    is the row displacement and ``2*t+1`` the column displacement of kernel
    tap ``t`` (taps enumerated row-major). With all offsets zero the result
    equals :func:`conv2d`.
    """
    spec, oh, ow = _check_weight(x, weight, stride, padding, dilation)
    k = spec.kernel_size
    taps = k * k
    b, c = x.shape[:2]
    if offsets.dim() != 4 or offsets.shape[1] != 2 * taps:
        raise ShapeError(f"offsets need {2 * taps} channels for a {k}x{k} kernel, got shape {tuple(offsets.shape)}")
    if offsets.shape[0] != b or tuple(offsets.shape[2:]) != (oh, ow):
        raise ShapeError(f"offset grid {tuple(offsets.shape[2:])} does not match output grid {(oh, ow)}")

    dev, dt = x.device, x.dtype
    ky, kx = torch.meshgrid(torch.arange(k, device=dev), torch.arange(k, device=dev), indexing="ij")
    base_y = (torch.arange(oh, device=dev) * stride - padding).to(dt)
    base_x = (torch.arange(ow, device=dev) * stride - padding).to(dt)
    # (taps, oh, ow) nominal sampling grid
    grid_y = base_y.view(1, oh, 1) + (ky.reshape(taps, 1, 1) * dilation).to(dt)
    grid_x = base_x.view(1, 1, ow) + (kx.reshape(taps, 1, 1) * dilation).to(dt)
    off = offsets.view(b, taps, 2, oh, ow)
    py = grid_y.unsqueeze(0) + off[:, :, 0]
    px = grid_x.unsqueeze(0) + off[:, :, 1]
    cols = bilinear_sample(x, py, px)  # (b, c, taps, oh, ow)
    cols = cols.reshape(b, c * taps, oh * ow)
    out = torch.matmul(weight.reshape(weight.shape[0], c * taps), cols)
    out = out.view(b, weight.shape[0], oh, ow)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


def _upsample_axis(n_in: int, factor: int, device, dtype):
    # half-pixel centres, sources clamped at the border
    src = (torch.arange(n_in * factor, device=device, dtype=dtype) + 0.5) / factor - 0.5
    src = src.clamp(min=0)
    lo = torch.floor(src).long().clamp(max=n_in - 1)
    hi = (lo + 1).clamp(max=n_in - 1)
    frac = src - lo.to(dtype)
    return lo, hi, frac


def bilinear_upsample(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Bilinear upsampling with half-pixel centres (``align_corners=False``)."""
    _check_input(x)
    if factor < 2:
        raise ShapeError(f"upsampling factor must be >= 2, got {factor}")
    h, w = x.shape[2:]
    lo, hi, fr = _upsample_axis(h, factor, x.device, x.dtype)
    rows = x[:, :, lo, :] * (1 - fr).view(1, 1, -1, 1) + x[:, :, hi, :] * fr.view(1, 1, -1, 1)
    lo, hi, fr = _upsample_axis(w, factor, x.device, x.dtype)
    return rows[:, :, :, lo] * (1 - fr) + rows[:, :, :, hi] * fr


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    _check_input(x)
    return x.mean(dim=(2, 3))


def global_max_pool(x: torch.Tensor) -> torch.Tensor:
    _check_input(x)
    return x.amax(dim=(2, 3))


_TAPE = None


def stop_gradient(t: torch.Tensor) -> torch.Tensor:
    """``t.detach()``, or the taped value while a :class:`StopGradientTape` replays."""
    return t.detach() if _TAPE is None else _TAPE(t)


class StopGradientTape:
    """Freezes every :func:`stop_gradient` value at its first-pass result.

    Autograd treats detached tensors as constants, finite differences do not.
    Evaluating a function under one tape (first call records, later calls
    replay) makes both see the same function.
    """

    def __init__(self):
        self.values = None
        self._pos = 0
        self._recorded = []

    def __call__(self, t):
        if self.values is None:
            self._recorded.append(t.detach().clone())
            return t.detach()
        v = self.values[self._pos]
        self._pos += 1
        return v

    @contextmanager
    def active(self):
        global _TAPE
        prev, _TAPE, self._pos = _TAPE, self, 0
        try:
            yield self
        finally:
            _TAPE = prev
            if self.values is None:
                self.values = self._recorded


@dataclass
class GradcheckResult:
    """Outcome of :func:`gradcheck`; ``error`` is the worst relative error."""

    error: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int

    def __float__(self):
        return self.error

    def passed(self, tol: float) -> bool:
        return self.error < tol


def gradcheck(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    wrt: Sequence[int] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradcheckResult:
    """Compare autograd against central finite differences.

    ``fn(*inputs)`` must return a scalar. Inputs should be float64. For each
    checked coordinate the relative error is
    ``|a - n| / max(|a|, |n|, floor * max|a|)`` where ``a`` is the analytic
    and ``n`` the numeric derivative; the floor keeps coordinates whose true
    derivative is ~0 from dominating through round-off. With ``max_coords``
    a seeded random subset of coordinates per input is checked.
    """
    inputs = [t.detach().clone() for t in inputs]
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    leaves = [t.requires_grad_(i in wrt) for i, t in enumerate(inputs)]
    out = fn(*leaves)
    if out.numel() != 1:
        raise ShapeError(f"gradcheck needs a scalar output, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, [leaves[i] for i in wrt], allow_unused=True)
    analytic = [torch.zeros_like(leaves[i]) if g is None else g.detach() for i, g in zip(wrt, grads)]
    for i, g in zip(wrt, analytic):
        bad = (~torch.isfinite(g)).nonzero()
        if len(bad):
            raise GradcheckError(f"non-finite analytic gradient for input {i} at {tuple(bad[0].tolist())}")

    scale = max(float(g.abs().max()) if g.numel() else 0.0 for g in analytic)
    denom_floor = max(floor * scale, 1e-12)
    rng = np.random.default_rng(seed)
    values = [t.detach().clone() for t in inputs]
    best = GradcheckResult(0.0, -1, (), 0.0, 0.0, 0)
    n_checked = 0
    with torch.no_grad():
        for i, g in zip(wrt, analytic):
            flat = values[i].view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and len(coords) > max_coords:
                coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
            for j in coords:
                orig = float(flat[j])
                flat[j] = orig + eps
                f_plus = float(fn(*values))
                flat[j] = orig - eps
                f_minus = float(fn(*values))
                flat[j] = orig
                num = (f_plus - f_minus) / (2 * eps)
                ana = float(g.reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), denom_floor)
                n_checked += 1
                if err >= best.error:
                    idx = tuple(int(v) for v in np.unravel_index(j, values[i].shape))
                    best = GradcheckResult(err, i, idx, ana, num, 0)
    best.n_checked = n_checked
    if not math.isfinite(best.error):
        raise GradcheckError(f"non-finite numeric gradient at input {best.worst_input} {best.worst_index}")
    return best
