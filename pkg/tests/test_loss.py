import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from roimatch.geometry import Polygon, PolygonSet
from roimatch.labelgen import generate_targets
from roimatch.loss import (LossConfig, agg_loss, dice_loss, dis_loss, ohem_select, total_loss)
from roimatch.model import SegOutput

from oracles import central_difference


def toy_targets(size=16):
    ps = PolygonSet([Polygon.rectangle(1, 1, 8, 9, id=1), Polygon.rectangle(7, 6, 15, 15, id=2)])
    return generate_targets(ps, size, size, 0.4)


def random_output(seed, size=16, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    region = torch.rand(1, size, size, generator=g, dtype=dtype).clamp(0.02, 0.98)
    kernel = torch.rand(1, size, size, generator=g, dtype=dtype).clamp(0.02, 0.98)
    sim = torch.randn(1, 4, size, size, generator=g, dtype=dtype) * 2
    return [t.requires_grad_() for t in (region, kernel, sim)]


# -- dice --------------------------------------------------------------------

def test_dice_identical():
    gt = torch.zeros(8, 8)
    gt[2:5, 3:7] = 1
    assert dice_loss(gt, gt).item() == pytest.approx(0, abs=1e-9)


def test_dice_disjoint():
    a, b = torch.zeros(8, 8), torch.zeros(8, 8)
    a[:4], b[4:] = 1, 1
    assert dice_loss(a, b).item() == pytest.approx(1, abs=1e-6)


def test_dice_hand_value():
    val = dice_loss(torch.full((2, 2), 0.5, dtype=torch.float64), torch.ones(2, 2)).item()
    assert val == pytest.approx(0.2, abs=1e-6)


def test_dice_valid_mask_restricts():
    pred = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    gt = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    valid = torch.tensor([[True, True], [False, False]])
    assert dice_loss(pred, gt, valid).item() == pytest.approx(0, abs=1e-6)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(2, 2), torch.zeros(3, 2))


# -- OHEM --------------------------------------------------------------------

def test_ohem_counts():
    gt = torch.zeros(101, 100)
    gt[0] = 1                                  # 100 positives, 10000 negatives
    score = torch.rand(101, 100, generator=torch.Generator().manual_seed(0))
    keep = ohem_select(score, gt, 3)
    assert keep.sum() == 400
    assert keep[gt > 0].all()
    neg = score[(gt == 0)]
    kept_neg = score[keep & (gt == 0)]
    assert kept_neg.min() >= torch.topk(neg, 300).values.min()


def test_ohem_all_positive():
    assert ohem_select(torch.rand(10, 10), torch.ones(10, 10)).all()


def test_ohem_no_positive():
    keep = ohem_select(torch.rand(100, 100), torch.zeros(100, 100))
    assert keep.sum() == 100


# -- aggregation / discrimination -------------------------------------------

def single_ring_targets():
    t = generate_targets(PolygonSet([Polygon.rectangle(0, 0, 3, 3, id=1)]), 3, 3, 0.4)
    # keep the ring to exactly one pixel for a hand-checkable value
    t.per_instance_kernel[0][:] = False
    t.per_instance_kernel[0][1, 1] = True
    t.per_instance_region[0][:] = False
    t.per_instance_region[0][1, 1] = t.per_instance_region[0][1, 2] = True
    return t


def test_agg_hand_value():
    t = single_ring_targets()
    sim = torch.zeros(4, 3, 3, dtype=torch.float64)
    sim[0, 1, 2] = 1.5
    assert agg_loss(sim, t, 0.5).item() == pytest.approx(math.log(2), abs=1e-9)


def test_agg_inside_margin_is_zero():
    t = toy_targets()
    sim = torch.zeros(4, 16, 16, dtype=torch.float64)
    sim[0][t.per_instance_region[1]] = 0.3
    assert agg_loss(sim, t, 0.5).item() == 0


def test_agg_no_instances():
    t = generate_targets(PolygonSet([]), 8, 8)
    assert agg_loss(torch.randn(4, 8, 8), t).item() == 0


def test_dis_far_apart_is_zero():
    t = toy_targets()
    sim = torch.zeros(4, 16, 16, dtype=torch.float64)
    sim[0][t.per_instance_kernel[1]] = 5.0
    assert dis_loss(sim, t, 3.0).item() == 0


def test_dis_identical_centroids():
    t = toy_targets()
    sim = torch.zeros(4, 16, 16, dtype=torch.float64)
    assert dis_loss(sim, t, 3.0).item() == pytest.approx(math.log(10), abs=1e-9)


def test_dis_single_instance():
    t = generate_targets(PolygonSet([Polygon.rectangle(1, 1, 9, 9, id=1)]), 12, 12)
    assert dis_loss(torch.zeros(4, 12, 12), t).item() == 0


@pytest.mark.parametrize("seed", range(5))
def test_translation_invariance(seed):
    t = toy_targets()
    _, _, sim = random_output(seed)
    shift = torch.randn(4, 1, 1, dtype=torch.float64) * 10
    s = sim[0].detach()
    assert agg_loss(s + shift, t).item() == pytest.approx(agg_loss(s, t).item(), abs=1e-9)
    assert dis_loss(s + shift, t).item() == pytest.approx(dis_loss(s, t).item(), abs=1e-9)


# -- total -------------------------------------------------------------------

def test_perfect_prediction_zero():
    t = toy_targets()
    sim = torch.zeros(1, 4, 16, 16, dtype=torch.float64)
    sim[0, 0][t.per_instance_region[1]] = 4.0       # later instance owns the overlap in the map
    sim[0, 0][t.per_instance_region[0] & ~t.per_instance_region[1]] = 0.0
    # overlap pixels belong to both regions, so drop them from instance 0's ring
    t.per_instance_region[0] &= ~t.per_instance_region[1]
    out = SegOutput(torch.as_tensor(t.region, dtype=torch.float64)[None],
                    torch.as_tensor(t.kernel, dtype=torch.float64)[None], sim)
    rep = total_loss(out, t)
    assert rep.total.item() == pytest.approx(0, abs=1e-6)


@pytest.mark.parametrize("mode", ["pan", "ce_dice"])
def test_component_bookkeeping(mode):
    cfg = LossConfig(loss_mode=mode)
    out = SegOutput(*random_output(0))
    rep = total_loss(out, [toy_targets()], cfg)
    expected = rep.region + cfg.alpha * rep.kernel + cfg.beta * (rep.agg + rep.dis)
    assert rep.total.item() == pytest.approx(expected.item(), abs=1e-6)
    if mode == "ce_dice":
        assert rep.agg.item() == rep.dis.item() == 0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(delta_agg=3.0, delta_dis=0.5)
    with pytest.raises(ValueError):
        LossConfig(loss_mode="focal")


def test_total_loss_deterministic():
    out = SegOutput(*random_output(1))
    a = total_loss(out, toy_targets()).as_dict()
    b = total_loss(out, toy_targets()).as_dict()
    assert a == b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_components_nonnegative(seed):
    rep = total_loss(SegOutput(*random_output(seed)), toy_targets())
    for name in ("total", "region", "kernel", "agg", "dis"):
        assert getattr(rep, name).item() >= 0
    assert rep.region.item() <= 1 + 1e-6 and rep.kernel.item() <= 1 + 1e-6


def component_fns(region, kernel, sim, targets, cfg):
    """Each loss component as a closure over the (fixed) OHEM selection."""
    region_gt = torch.as_tensor(targets.region, dtype=torch.float64)[None]
    kernel_gt = torch.as_tensor(targets.kernel, dtype=torch.float64)[None]
    selected = ohem_select(region.detach(), region_gt, cfg.ohem_ratio)
    return {
        "region": lambda: dice_loss(region, region_gt, selected).mean(),
        "kernel": lambda: dice_loss(kernel, kernel_gt, region_gt > 0.5).mean(),
        "agg": lambda: agg_loss(sim[0], targets, cfg.delta_agg),
        "dis": lambda: dis_loss(sim[0], targets, cfg.delta_dis),
    }


@pytest.mark.parametrize("seed", range(3))
def test_component_gradients_finite_differences(seed):
    cfg = LossConfig()
    targets = toy_targets()
    region, kernel, sim = random_output(seed)
    rng = np.random.default_rng(seed)
    for name, fn in component_fns(region, kernel, sim, targets, cfg).items():
        inputs = {"region": region, "kernel": kernel, "agg": sim, "dis": sim}[name]
        inputs.grad = None
        fn().backward()
        for _ in range(6):
            idx = tuple(int(rng.integers(s)) for s in inputs.shape)
            fd = central_difference(fn, inputs.data, idx)
            assert abs(inputs.grad[idx].item() - fd) <= 1e-4 * max(abs(fd), 1e-3), name
