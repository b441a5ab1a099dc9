import io
import json
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from fsod.boxes import box_iou, clip_boxes, decode_boxes, encode_boxes, generate_anchors
from fsod.errors import ConfigError, ShapeError
from fsod.evaluation import nms
from fsod.mrrpn import (IGNORE, MRRPN, NEGATIVE, POSITIVE, AnchorConfig, MRRPNConfig, assign_targets,
                        dump_proposals, iou_loss, mrrpn_loss, param_count)
from fsod.nn_primitives import conv2d, gradcheck

D = torch.float64


def test_anchor_cell_zero():
    a = generate_anchors(16, [32.0], [1.0], (1, 1), D)
    assert a.tolist() == [[-8.0, -8.0, 24.0, 24.0]]


def test_anchor_count_and_order():
    a = generate_anchors(8, [10.0, 20.0], [0.5, 1.0, 2.0], (4, 4))
    assert a.shape == (96, 4)
    # first six anchors share cell (0, 0); the seventh moves one cell right
    c = 0.5 * (a[:, :2] + a[:, 2:])
    assert torch.all(c[:6] == 4.0)
    assert c[6].tolist() == [12.0, 4.0]
    # scale-major inside a cell
    assert (a[2, 2] - a[2, 0]).item() < (a[3, 2] - a[3, 0]).item()


def test_anchor_ratio_is_height_over_width():
    a = generate_anchors(16, [32.0], [2.0], (1, 1), D)[0]
    w, h = a[2] - a[0], a[3] - a[1]
    assert w.item() == pytest.approx(32 / math.sqrt(2), abs=1e-9)
    assert h.item() == pytest.approx(32 * math.sqrt(2), abs=1e-9)
    assert (w * h).item() == pytest.approx(1024.0, abs=1e-6)


def test_anchor_empty_config():
    with pytest.raises(ConfigError):
        generate_anchors(8, [], [1.0], (2, 2))
    with pytest.raises(ConfigError):
        AnchorConfig(ratios=[])


def test_decode_zero_deltas_identity_and_shift():
    a = torch.tensor([[0.0, 0.0, 16.0, 16.0]], dtype=D)
    assert torch.equal(decode_boxes(a, torch.zeros(1, 4, dtype=D)), a)
    out = decode_boxes(a, torch.tensor([[0.5, 0.0, 0.0, 0.0]], dtype=D))
    assert out.tolist() == [[8.0, 0.0, 24.0, 16.0]]


def test_encode_decode_round_trip():
    g = torch.Generator().manual_seed(0)
    xy = torch.rand(100, 2, generator=g, dtype=D) * 100
    wh = torch.rand(100, 2, generator=g, dtype=D) * 60 + 4
    anchors = torch.cat([xy, xy + wh], 1)
    xy2 = xy + torch.randn(100, 2, generator=g, dtype=D) * 10
    wh2 = wh * torch.exp(torch.randn(100, 2, generator=g, dtype=D) * 0.5)
    targets = torch.cat([xy2, xy2 + wh2], 1)
    back = decode_boxes(anchors, encode_boxes(anchors, targets, (10, 10, 5, 5)), weights=(10, 10, 5, 5))
    assert (back - targets).abs().max() < 1e-4


def test_encode_rejects_degenerate_target():
    with pytest.raises(ShapeError):
        encode_boxes(torch.tensor([[0.0, 0, 4, 4]]), torch.tensor([[1.0, 1, 1, 5]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-200, 300, allow_nan=False), min_size=4, max_size=4))
def test_clip_always_valid(coords):
    b = clip_boxes(torch.tensor([coords], dtype=D), (128, 128))[0]
    assert b[2] > b[0] and b[3] > b[1]
    assert b[0] >= 0 and b[1] >= 0 and b[2] <= 128 and b[3] <= 128


def test_iou_loss_values():
    assert iou_loss(torch.tensor([0.0, 0, 2, 2]), torch.tensor([0.0, 0, 2, 2])).item() == 0.0
    assert iou_loss(torch.tensor([0.0, 0, 1, 1]), torch.tensor([2.0, 2, 3, 3])).item() == 1.0
    v = iou_loss(torch.tensor([0.0, 0, 2, 2], dtype=D), torch.tensor([1.0, 0, 3, 2], dtype=D)).item()
    assert v == pytest.approx(2 / 3, abs=1e-12)


def test_iou_loss_degenerate_guard():
    pred = torch.tensor([[1.0, 1.0, 1.0, 3.0]], dtype=D, requires_grad=True)
    loss = iou_loss(pred, torch.tensor([[0.0, 0, 2, 2]], dtype=D)).sum()
    loss.backward()
    assert loss.item() == 1.0
    assert torch.all(pred.grad == 0)


def test_iou_loss_gradcheck():
    pred = torch.tensor([[0.2, 0.1, 2.3, 2.2], [1.0, 1.5, 4.0, 3.1]], dtype=D)
    gt = torch.tensor([[0.5, 0.0, 3.0, 2.0], [0.0, 1.0, 3.0, 4.0]], dtype=D)
    assert gradcheck(lambda p: iou_loss(p, gt).sum(), [pred]).error < 1e-4


def test_mrrpn_loss_constants():
    cfg = MRRPNConfig()
    assert cfg.reg_weights == [7.0, 7.0, 7.0] and cfg.balance == 1.4
    assert abs(mrrpn_loss([0.1, 0.1, 0.1], 0.2, cfg) - 3.14) < 1e-9
    assert mrrpn_loss([0.0, 0.0, 0.0], 0.2, cfg) == 0.2


def test_mrrpn_loss_linear_and_length_check():
    cfg = MRRPNConfig()
    base = mrrpn_loss([0.1, 0.2, 0.3], 0.0, cfg)
    assert mrrpn_loss([0.3, 0.6, 0.9], 0.0, cfg) == pytest.approx(3 * base, rel=1e-12)
    with pytest.raises(ShapeError):
        mrrpn_loss([0.1], 0.2, cfg)


def test_config_defaults_and_validation():
    cfg = MRRPNConfig()
    assert cfg.iou_thresholds == [0.5, 0.6, 0.7]
    assert cfg.dilations == [2, 2]
    assert MRRPNConfig(num_stages=5).iou_thresholds == [0.5, 0.6, 0.7, 0.7, 0.7]
    for bad in (dict(num_stages=0), dict(balance=0), dict(reg_weights=[1, 1]),
                dict(iou_thresholds=[0.7, 0.6, 0.5])):
        with pytest.raises(ConfigError):
            MRRPNConfig(**bad)


def test_assign_targets_walk():
    cfg = MRRPNConfig()
    gt = torch.tensor([[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0]])
    # boxes: identical to gt 0, disjoint from gt 0 (weak overlap with gt 1), IoU 0.55 with gt 0
    w55 = 10 / 0.55
    boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0], [55.0, 55.0, 65.0, 65.0], [0.0, 0.0, w55, 10.0]])
    iou = box_iou(boxes, gt[:1])[2, 0].item()
    assert iou == pytest.approx(0.55, abs=1e-6)
    # keep the argmax rule out of the way: gt 0's best box is the identical one
    l1, m1 = assign_targets(boxes, gt[:1], 1, cfg)
    l2, _ = assign_targets(boxes, gt[:1], 2, cfg)
    l3, _ = assign_targets(boxes, gt[:1], 3, cfg)
    assert l1.tolist() == [POSITIVE, NEGATIVE, POSITIVE]
    assert m1.tolist() == [0, -1, 0]
    assert l2.tolist() == [POSITIVE, NEGATIVE, IGNORE]
    assert l3.tolist() == [POSITIVE, NEGATIVE, IGNORE]  # 0.55 >= 0.7 - 0.2
    # second gt has no good box: its argmax box becomes positive
    l, m = assign_targets(boxes, gt, 3, cfg)
    assert l[1] == POSITIVE and m[1] == 1


def test_assign_targets_no_gt_and_ignore_regions():
    cfg = MRRPNConfig()
    boxes = torch.tensor([[0.0, 0, 10, 10], [40.0, 40, 50, 50]])
    labels, _ = assign_targets(boxes, torch.zeros(0, 4), 1, cfg)
    assert labels.tolist() == [NEGATIVE, NEGATIVE]
    labels, _ = assign_targets(boxes, torch.zeros(0, 4), 1, cfg, ignore_boxes=torch.tensor([[40.0, 40, 50, 50]]))
    assert labels.tolist() == [NEGATIVE, IGNORE]
    with pytest.raises(ShapeError):
        assign_targets(boxes, torch.zeros(0, 4), 4, cfg)


def _small_rpn(n=3, width=4, seed=0):
    torch.manual_seed(seed)
    cfg = MRRPNConfig(num_stages=n, anchors=AnchorConfig(strides={4: 16, 5: 32}, scales={4: [24.0], 5: [48.0]}))
    return MRRPN(width, cfg).double(), cfg


def _feats(width=4, seed=1):
    g = torch.Generator().manual_seed(seed)
    return {4: torch.randn(1, width, 4, 4, generator=g, dtype=D), 5: torch.randn(1, width, 2, 2, generator=g, dtype=D)}


def test_refine_stage_zero_head_fixed_point_and_shape():
    rpn, _ = _small_rpn()
    st0 = rpn.stages[0]
    with torch.no_grad():
        st0.delta.weight.zero_()
        st0.delta.bias.zero_()
    f = _feats()[4]
    anchors = rpn.anchors(4, (4, 4), D).unsqueeze(0)
    anchors = decode_boxes(anchors, torch.zeros_like(anchors), (64, 64))
    out = rpn.refine_stage(f, anchors, 1, 16, (64, 64))
    assert (out.boxes - anchors).abs().max() < 1e-12
    assert out.features.shape == f.shape
    with pytest.raises(ShapeError):
        rpn.refine_stage(f, anchors, 3, 16, (64, 64))


def test_refine_stage_constant_head_shifts_uniformly():
    rpn, _ = _small_rpn()
    st0 = rpn.stages[0]
    delta = torch.tensor([0.1, -0.2, 0.05, 0.1], dtype=D)
    with torch.no_grad():
        st0.delta.weight.zero_()
        st0.delta.bias.copy_(delta.repeat(3))
    anchors = rpn.anchors(4, (4, 4), D).unsqueeze(0)
    out = rpn.refine_stage(_feats()[4], anchors, 1, 16, None)
    expected = decode_boxes(anchors, delta.expand_as(anchors))
    assert (out.boxes - expected).abs().max() < 1e-12


def test_final_stage_zero_offsets_is_plain_conv():
    rpn, _ = _small_rpn()
    fin = rpn.final
    f = _feats()[4]
    boxes = rpn.anchors(4, (4, 4), D).unsqueeze(0)
    out = fin(f, boxes, 16, None)
    plain = torch.relu(fin.norm(conv2d(f, fin.weight, fin.bias, padding=1)))
    assert (out.features - plain).abs().max() < 1e-12


def test_final_stage_zero_objectness():
    rpn, _ = _small_rpn()
    with torch.no_grad():
        rpn.final.cls.weight.zero_()
        rpn.final.cls.bias.zero_()
    _, _, obj = rpn(_feats(), (64, 64))
    assert torch.all(obj == 0)
    assert torch.all(torch.sigmoid(obj) == 0.5)


def test_final_stage_gradcheck():
    rpn, _ = _small_rpn(width=3)
    with torch.no_grad():
        rpn.final.offset.weight.normal_(std=0.3)
        rpn.final.offset.bias.normal_(std=0.7)
    f = _feats(width=3)[4]
    boxes = rpn.anchors(4, (4, 4), D).unsqueeze(0)

    def fn(x):
        out = rpn.final(x, boxes, 16, None)
        return (out.objectness ** 2).sum() + (out.deltas ** 2).sum()

    assert gradcheck(fn, [f]).error < 1e-4


def test_objectness_read_on_anchor_grid():
    rpn, _ = _small_rpn()
    fin = rpn.final
    f = _feats()[4]
    anchors = rpn.anchors(4, (4, 4), D).unsqueeze(0)
    shifted = anchors.clone()
    shifted[..., 0::2] = shifted[..., 0::2] + 20.0  # refined boxes drift to other cells
    a = fin(f, anchors, 16, None).objectness
    b = fin(f, shifted, 16, None).objectness
    assert torch.equal(a, b)
    feats = fin(f, anchors, 16, None).features
    cls_map = conv2d(feats, fin.cls.weight, fin.cls.bias, padding=1)  # (1, A, 4, 4)
    per = fin.per_cell
    for m in (0, 5, 13, 47):
        cell, slot = divmod(m, per)
        i, j = divmod(cell, 4)
        assert a[0, m] == cls_map[0, slot, i, j]


def test_forward_boxes_valid_and_counts():
    rpn, cfg = _small_rpn()
    ins, outs, obj = rpn(_feats(), (64, 64))
    assert len(ins) == len(outs) == 3
    m = 16 * 3 + 4 * 3
    assert obj.shape == (1, m)
    for b in outs:
        assert b.shape == (1, m, 4)
        assert torch.all(b[..., 2] > b[..., 0]) and torch.all(b[..., 3] > b[..., 1])
        assert torch.all(b >= 0) and torch.all(b <= 64)


def test_proposals_cap_and_determinism():
    rpn, cfg = _small_rpn()
    cfg.post_nms = 5
    _, outs, obj = rpn(_feats(), (64, 64))
    p1 = rpn.proposals(outs[-1], obj, nms)
    _, outs2, obj2 = rpn(_feats(), (64, 64))
    p2 = rpn.proposals(outs2[-1], obj2, nms)
    assert len(p1[0][0]) <= 5
    assert torch.equal(p1[0][0], p2[0][0]) and torch.equal(p1[0][2], p2[0][2])


def test_losses_shapes_and_finite():
    rpn, _ = _small_rpn()
    ins, outs, obj = rpn(_feats(), (64, 64))
    gt = [torch.tensor([[10.0, 12.0, 40.0, 36.0]], dtype=D)]
    reg, cls = rpn.losses(ins, outs, obj, gt)
    assert len(reg) == 3
    assert all(0 <= r.item() <= 1 for r in reg)
    assert math.isfinite(float(cls.detach()))


def test_param_count_strictly_increases_with_stages():
    counts = [param_count(MRRPN(16, MRRPNConfig(num_stages=n))) for n in (1, 2, 3, 4)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_single_stage_is_deformable_only():
    rpn = MRRPN(8, MRRPNConfig(num_stages=1))
    assert len(rpn.stages) == 0


def test_dump_proposals_jsonl():
    rpn, _ = _small_rpn()
    _, outs, obj = rpn(_feats(), (64, 64))
    props = rpn.proposals(outs[-1], obj, nms)
    fh = io.StringIO()
    dump_proposals(fh, "img0", props[0], outs)
    rows = [json.loads(line) for line in fh.getvalue().splitlines()]
    assert len(rows) == len(props[0][0])
    assert set(rows[0]) == {"image_id", "box", "score", "stages"}
    assert len(rows[0]["stages"]) == 3
