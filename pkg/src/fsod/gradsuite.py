"""Registered finite-difference checks for every differentiable building block.

Each entry builds small double-precision inputs from a fixed seed and
returns a :class:`GradcheckResult`. ``run_suite`` times the whole list;
the CLI prints it as a table.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np
import torch
from torch.func import functional_call

from .cfpan import CBAM, fuse_level
from .gcl import ClassifierLayout, GCLConfig, activate_placeholders, cosine_logits, gcl_base_loss, gcl_finetune_loss
from .mrrpn import iou_loss
from .nn_primitives import (GradcheckResult, StopGradientTape, bilinear_upsample, conv2d, deformable_conv2d,
                            gradcheck)

D = torch.float64
OP_TOL = 1e-4
COMPOSED_TOL = 1e-3


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=D)


def check_conv2d() -> GradcheckResult:
    g = _gen(1)
    x, w, b = _randn(g, 1, 2, 7, 7), _randn(g, 3, 2, 3, 3), _randn(g, 3)
    wts = _randn(g, 1, 3, 7, 7)
    return gradcheck(lambda x, w, b: (conv2d(x, w, b, padding=2, dilation=2) * wts).sum(), [x, w, b])


def check_deformable() -> GradcheckResult:
    g = _gen(2)
    x, w = _randn(g, 1, 2, 5, 5), _randn(g, 2, 2, 3, 3)
    # fractional offsets away from integer grid points, where bilinear weights kink
    off = 0.3 + 0.4 * torch.rand(1, 18, 5, 5, generator=g, dtype=D)
    wts = _randn(g, 1, 2, 5, 5)
    return gradcheck(lambda x, w, o: (deformable_conv2d(x, w, o, padding=1) * wts).sum(), [x, w, off])


def check_upsample() -> GradcheckResult:
    g = _gen(3)
    x = _randn(g, 1, 2, 4, 5)
    wts = _randn(g, 1, 2, 8, 10)
    return gradcheck(lambda x: (bilinear_upsample(x, 2) * wts).sum(), [x])


def check_cbam() -> GradcheckResult:
    g = _gen(4)
    cbam = CBAM(4, reduction=2).double()
    with torch.no_grad():
        for p in cbam.parameters():
            p.copy_(0.5 * _randn(g, *p.shape))
    x = _randn(g, 1, 4, 5, 5)
    wts = _randn(g, 1, 4, 5, 5)
    names = [n for n, _ in cbam.named_parameters()]

    def fn(x, *params):
        return (functional_call(cbam, dict(zip(names, params)), (x,)) * wts).sum()

    return gradcheck(fn, [x] + [p.detach() for p in cbam.parameters()])


def check_fuse_level() -> GradcheckResult:
    g = _gen(5)
    p_next, c_next, c_cur = _randn(g, 1, 2, 3, 3), _randn(g, 1, 2, 3, 3), _randn(g, 1, 2, 6, 6)
    logits = _randn(g, 3, 6, 6)
    wts = _randn(g, 1, 2, 6, 6)
    return gradcheck(lambda a, b, c, lg: (fuse_level(a, b, c, lg) * wts).sum(), [p_next, c_next, c_cur, logits])


def check_roi_align() -> GradcheckResult:
    from .detector import roi_align
    g = _gen(6)
    f = _randn(g, 1, 2, 6, 6)
    boxes = torch.tensor([[1.3, 2.2, 17.9, 20.4], [6.1, 0.7, 23.3, 11.6]], dtype=D)
    wts = _randn(g, 2, 2, 3, 3)
    return gradcheck(lambda x: (roi_align(x, boxes, 3, stride=4.0, sampling=2) * wts).sum(), [f])


def check_iou_loss() -> GradcheckResult:
    pred = torch.tensor([[0.5, 0.2, 10.3, 8.1], [3.0, 4.0, 12.5, 15.2], [1.0, 1.0, 6.0, 7.0]], dtype=D)
    gt = torch.tensor([[1.0, 0.0, 11.0, 9.0], [2.0, 5.0, 13.0, 14.0], [2.0, 2.5, 8.0, 6.0]], dtype=D)
    return gradcheck(lambda p: iou_loss(p, gt).sum(), [pred])


def _gcl_inputs():
    g = _gen(7)
    return _randn(g, 5, 6), _randn(g, 6, 6)


def check_gcl_base() -> GradcheckResult:
    lay = ClassifierLayout(("a", "b"), 3)
    labels = torch.tensor([0, 1, 2, 0, 1])
    f, w = _gcl_inputs()
    return gradcheck(lambda f, w: gcl_base_loss(cosine_logits(f, w, 20), labels, lay, GCLConfig()).total, [f, w])


def check_gcl_finetune() -> GradcheckResult:
    act = activate_placeholders(ClassifierLayout(("a", "b"), 3), ["n"])
    labels = torch.tensor([0, 1, 3, 3, 2])
    cfg = GCLConfig(regularization_weight=0.01)
    f, w = _gcl_inputs()
    return gradcheck(lambda f, w: gcl_finetune_loss(cosine_logits(f, w, 20), labels, act, cfg, w).total, [f, w])


def check_composed_loss() -> GradcheckResult:
    """Full training loss of a tiny detector w.r.t. a parameter from every component.

    Stop-gradient values (refined boxes between stages, proposals) are taped
    on the first evaluation so finite differences see the function autograd
    differentiates.
    """
    from .datasets import AnnotatedImage
    from .detector import DetectorConfig, _image_tensor, _targets, build_detector

    cfg = DetectorConfig.from_dict({
        "image_size": 64, "backbone_widths": [2, 2, 2, 2], "neck": {"width": 2, "reduction": 1},
        "rpn": {"pre_nms": 50, "post_nms": 8, "cls_samples": 16}, "roi_size": 2, "head_hidden": 4, "roi_batch": 8,
    })
    det = build_detector(cfg, ["a", "b", "c"]).double()
    g = _gen(8)
    with torch.no_grad():
        for f in det.neck.fusion.values():
            f.logits.copy_(0.5 * _randn(g, *f.logits.shape))
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    pixels[12:36, 8:40] = (200, 60, 60)
    im = AnnotatedImage(pixels, np.array([[8.0, 12.0, 40.0, 36.0]]), ["b"], "one")
    x = _image_tensor([im.image], D)
    targets = [(b.double(), n, i.double()) for b, n, i in _targets([im], det.layout, [False], 64)]
    names = ["neck.fusion.2.logits", "neck.cbam.fc1.weight", "rpn.stages.0.conv.weight", "rpn.final.weight",
             "rpn.final.cls.weight", "fc1.weight", "cls_weight", "box_head.weight"]
    params = dict(det.named_parameters())
    tape = StopGradientTape()

    def fn(*tensors):
        torch.manual_seed(0)  # RoI and objectness sampling
        with tape.active():
            return functional_call(det, {**params, **dict(zip(names, tensors))}, (x, targets, "base"),
                                   strict=False).total

    return gradcheck(fn, [params[n].detach() for n in names], max_coords=20, seed=1)


@dataclass
class SuiteEntry:
    op: str
    check: Callable[[], GradcheckResult]
    tol: float = OP_TOL


SUITE: List[SuiteEntry] = [
    SuiteEntry("conv2d (dilated)", check_conv2d),
    SuiteEntry("deformable_conv2d", check_deformable),
    SuiteEntry("bilinear_upsample", check_upsample),
    SuiteEntry("cbam", check_cbam),
    SuiteEntry("fuse_level", check_fuse_level),
    SuiteEntry("roi_align", check_roi_align),
    SuiteEntry("iou_loss", check_iou_loss),
    SuiteEntry("gcl_base_loss", check_gcl_base),
    SuiteEntry("gcl_finetune_loss", check_gcl_finetune),
    SuiteEntry("composed training loss", check_composed_loss, COMPOSED_TOL),
]


@dataclass
class SuiteRow:
    op: str
    error: float
    tol: float
    worst_input: int
    worst_index: tuple
    n_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def run_suite(entries=None) -> List[SuiteRow]:
    rows = []
    for e in entries or SUITE:
        t0 = time.perf_counter()
        r = e.check()
        rows.append(SuiteRow(e.op, r.error, e.tol, r.worst_input, tuple(r.worst_index), r.n_checked,
                             time.perf_counter() - t0))
    return rows


def format_table(rows: List[SuiteRow]) -> str:
    head = f"{'op':<24} {'rel. error':>11} {'tol':>7} {'worst coord':<20} {'coords':>6} {'status':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        coord = f"in{r.worst_input}{list(r.worst_index)}"
        lines.append(f"{r.op:<24} {r.error:>11.3e} {r.tol:>7.0e} {coord:<20} {r.n_checked:>6} "
                     f"{'PASS' if r.passed else 'FAIL':>6}")
    return "\n".join(lines)
