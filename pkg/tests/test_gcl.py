import math

import pytest
import torch

from fsod import gcl
from fsod.errors import ConfigError, ProtocolError
from fsod.gcl import (ClassifierLayout, GCLConfig, LossBreakdown, activate_placeholders, cosine_logits,
                      gcl_base_loss, gcl_finetune_loss)
from fsod.nn_primitives import gradcheck

D = torch.float64


def _layout(nb=2, r=3):
    return ClassifierLayout(tuple(f"b{i}" for i in range(nb)), r)


def test_layout_indices_disjoint_and_contiguous():
    lay = _layout(3, 4)
    assert lay.background == 0
    assert lay.base_nodes == [1, 2, 3]
    assert lay.placeholder_nodes == [4, 5, 6, 7]
    assert lay.num_nodes == 8
    assert lay.active_nodes == [0, 1, 2, 3]


def test_activation_binds_sorted_names():
    lay = ClassifierLayout(tuple("abc"), 8)
    act = activate_placeholders(lay, ["zeta", "eta", "iota", "kappa", "delta"])
    assert act.bindings == (("delta", 0), ("eta", 1), ("iota", 2), ("kappa", 3), ("zeta", 4))
    assert act.bound_nodes == [4, 5, 6, 7, 8]
    assert act.unbound_nodes == [9, 10, 11]
    assert act.node("eta") == 5 and act.class_of(5) == "eta"
    assert activate_placeholders(lay, ["zeta", "eta", "iota", "kappa", "delta"]) == act
    assert activate_placeholders(lay, ["delta", "eta", "iota", "kappa", "zeta"]) == act


def test_activation_errors():
    lay = ClassifierLayout(("a",), 2)
    with pytest.raises(ProtocolError, match="num_placeholders"):
        activate_placeholders(lay, ["x", "y", "z"])
    with pytest.raises(ProtocolError, match="overlap"):
        activate_placeholders(lay, ["a"])
    with pytest.raises(ProtocolError):
        lay.node("x")
    with pytest.raises(ProtocolError):
        lay.class_of(2)


def test_layout_round_trip():
    act = activate_placeholders(_layout(), ["n1"])
    assert ClassifierLayout.from_dict(act.to_dict()) == act


def test_cosine_hand_values():
    w = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=D)
    out = cosine_logits(torch.tensor([[1.0, 1.0], [3.0, 0.0]], dtype=D), w, 20.0)
    assert out[0, 0].item() == pytest.approx(20 / math.sqrt(2), abs=1e-12)
    assert out[0, 0].item() == pytest.approx(14.1421, abs=1e-4)
    assert out[1, 0].item() == pytest.approx(20.0, abs=1e-12)
    assert out[1, 1].item() == 0.0


def test_cosine_scale_invariance():
    g = torch.Generator().manual_seed(0)
    f, w = torch.randn(5, 7, generator=g, dtype=D), torch.randn(4, 7, generator=g, dtype=D)
    ref = cosine_logits(f, w, 20)
    assert (cosine_logits(3.7 * f, w, 20) - ref).abs().max() < 1e-6
    assert (cosine_logits(f, 0.01 * w, 20) - ref).abs().max() < 1e-6


def test_cosine_zero_norm_flagged():
    before = gcl.debug_counters["zero_norm"]
    out = cosine_logits(torch.ones(2, 3), torch.zeros(4, 3), 20)
    assert torch.all(out == 0) and torch.all(torch.isfinite(out))
    assert gcl.debug_counters["zero_norm"] == before + 4


def test_base_loss_two_node_ln2():
    lay = ClassifierLayout(("a",), 0)
    out = gcl_base_loss(torch.zeros(1, 2, dtype=D), torch.tensor([0]), lay, GCLConfig(num_placeholders=0))
    assert float(out.total) == pytest.approx(math.log(2), abs=1e-12)
    assert float(out.total) == pytest.approx(0.693147, abs=1e-6)


def test_base_loss_zero_placeholders_equals_ce():
    lay = _layout(2, 3)
    logits = torch.zeros(2, 6, dtype=D)
    logits[:, :3] = torch.tensor([[1.0, 2.0, -1.0], [0.5, 0.0, 0.3]], dtype=D)
    labels = torch.tensor([1, 0])
    out = gcl_base_loss(logits, labels, lay, GCLConfig())
    ce = torch.nn.functional.cross_entropy(logits[:, :3], labels)
    assert float(out.total) == float(ce)


def test_base_loss_placeholder_l1_value():
    lay = _layout(1, 2)
    logits = torch.tensor([[0.0, 0.0, 0.3, -0.5]], dtype=D)
    out = gcl_base_loss(logits, torch.tensor([0]), lay, GCLConfig())
    l1 = out.weights["placeholder_l1"] * float(out.components["placeholder_l1"])
    assert l1 == pytest.approx(0.04, abs=1e-12)
    assert float(out.total) == pytest.approx(math.log(2) + 0.04, abs=1e-12)


def test_base_loss_rejects_non_base_labels():
    lay = _layout(2, 3)
    with pytest.raises(ProtocolError, match="node 4"):
        gcl_base_loss(torch.zeros(1, 6), torch.tensor([4]), lay, GCLConfig())


def test_placeholder_gradient_only_from_l1():
    lay = _layout(2, 3)
    logits = torch.randn(4, 6, dtype=D, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 1])
    gcl_base_loss(logits, labels, lay, GCLConfig(placeholder_weight=0.0)).total.backward()
    assert torch.all(logits.grad[:, 3:] == 0)
    logits.grad = None
    gcl_base_loss(logits, labels, lay, GCLConfig()).total.backward()
    assert torch.all(logits.grad[:, 3:] != 0)


def test_standard_mode_is_plain_ce():
    lay = ClassifierLayout(("a", "b"), 0)
    cfg = GCLConfig.standard()
    logits = torch.randn(3, 3, dtype=D)
    labels = torch.tensor([0, 2, 1])
    out = gcl_base_loss(logits, labels, lay, cfg)
    assert list(out.components) == ["base_ce"]
    assert float(out.total) == float(torch.nn.functional.cross_entropy(logits, labels))


def test_finetune_three_node_example():
    lay = activate_placeholders(ClassifierLayout(("a",), 1), ["n"])
    cfg = GCLConfig(regularization_weight=0.0, num_placeholders=1)
    out = gcl_finetune_loss(torch.zeros(2, 3, dtype=D), torch.tensor([1, 2]), lay, cfg, torch.ones(3, 4))
    assert float(out.components["base_ce"]) == pytest.approx(math.log(3), abs=1e-12)
    assert float(out.components["novel_ce"]) == pytest.approx(math.log(3), abs=1e-12)
    assert float(out.total) == pytest.approx(2.197225, abs=1e-6)


def test_finetune_absent_group_contributes_zero():
    lay = activate_placeholders(_layout(2, 3), ["n"])
    out = gcl_finetune_loss(torch.randn(2, 6, dtype=D), torch.tensor([3, 3]), lay, GCLConfig())
    assert float(out.components["base_ce"]) == 0.0


def test_finetune_l2_and_masked_labels():
    lay = activate_placeholders(_layout(2, 3), ["n"])
    w = torch.zeros(6, 4, dtype=D)
    out = gcl_finetune_loss(cosine_logits(torch.ones(1, 4, dtype=D), w, 20), torch.tensor([0]), lay, GCLConfig(), w)
    assert float(out.components["l2_reg"]) == 0.0
    w = torch.ones(6, 4, dtype=D)
    out = gcl_finetune_loss(torch.zeros(1, 6, dtype=D), torch.tensor([0]), lay, GCLConfig(), w)
    assert float(out.components["l2_reg"]) == 24.0
    assert out.weights["l2_reg"] == 1e-4
    with pytest.raises(ProtocolError, match="masked placeholder"):
        gcl_finetune_loss(torch.zeros(1, 6), torch.tensor([4]), lay, GCLConfig())


def test_finetune_unbound_placeholders_stay_out_of_softmax():
    lay = activate_placeholders(_layout(1, 3), ["n"])  # nodes: 0 bg, 1 base, 2 bound, 3-4 unbound
    logits = torch.zeros(1, 5, dtype=D)
    logits[0, 3:] = 50.0
    out = gcl_finetune_loss(logits, torch.tensor([2]), lay, GCLConfig(placeholder_weight=0.0,
                                                                      regularization_weight=0.0))
    assert float(out.total) == pytest.approx(math.log(3), abs=1e-12)


def test_breakdown_reconstructs_total():
    b = LossBreakdown().add("x", torch.tensor(0.3, dtype=D), 1.4 * 7).add("y", torch.tensor(0.2, dtype=D))
    assert abs(b.reconstruct() - float(b.total)) < 1e-9
    rec = b.as_record()
    assert abs(sum(rec["weights"][k] * v for k, v in rec["components"].items()) - rec["total"]) < 1e-9


def test_config_validation():
    with pytest.raises(ConfigError):
        GCLConfig(mode="focal")
    with pytest.raises(ConfigError):
        GCLConfig(placeholder_weight=-1)


def test_gcl_losses_gradcheck():
    g = torch.Generator().manual_seed(0)
    lay = _layout(2, 3)
    act = activate_placeholders(lay, ["n"])
    feats = torch.randn(5, 6, generator=g, dtype=D)
    w = torch.randn(6, 6, generator=g, dtype=D)
    labels_b = torch.tensor([0, 1, 2, 0, 1])
    labels_f = torch.tensor([0, 1, 3, 3, 2])
    cfg = GCLConfig(regularization_weight=0.01)
    fb = lambda f, ww: gcl_base_loss(cosine_logits(f, ww, 20), labels_b, lay, cfg).total
    ff = lambda f, ww: gcl_finetune_loss(cosine_logits(f, ww, 20), labels_f, act, cfg, ww).total
    assert gradcheck(fb, [feats, w]).error < 1e-4
    assert gradcheck(ff, [feats, w]).error < 1e-4
