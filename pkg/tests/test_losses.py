import math

import numpy as np
import pytest

from endocaver.losses import FIXED_WEIGHT, LocosSchedule, combine, dice_loss, mse_loss, total_loss, w_seg
from endocaver.model import ModelOutputs
from endocaver.tensor import Tensor

from conftest import leaf


def test_schedule_endpoints_and_midpoint():
    s = LocosSchedule(0.2, 100)
    assert w_seg(0, s) == 1.0
    assert w_seg(100, s) == pytest.approx(0.2, abs=1e-15)
    assert w_seg(50, s) == pytest.approx(0.6, abs=1e-12)


def test_schedule_matches_formula_at_every_step():
    s = LocosSchedule(0.3, 257)
    for t in range(258):
        assert w_seg(t, s) == 0.3 + 0.5 * 0.7 * (1 + math.cos(math.pi * t / 257))


@pytest.mark.parametrize("direction,sign", [("as-written", -1), ("inverted", 1)])
def test_schedule_monotone_and_bounded(direction, sign):
    s = LocosSchedule(0.25, 1000, direction)
    w = np.array([w_seg(t, s) for t in range(1001)])
    assert np.all(sign * np.diff(w) >= 0)
    assert w.min() >= 0.25 - 1e-15 and w.max() <= 1.0 + 1e-15


def test_inverted_swaps_endpoints():
    s = LocosSchedule(0.2, 10, "inverted")
    assert w_seg(0, s) == pytest.approx(0.2) and w_seg(10, s) == pytest.approx(1.0)


def test_clamp_past_horizon_counts():
    s = LocosSchedule(0.2, 10)
    assert w_seg(15, s) == w_seg(10, s)
    assert s.clamped == 1
    with pytest.raises(ValueError):
        w_seg(-1, s)


@pytest.mark.parametrize("kw", [{"w_min": 1.0}, {"w_min": -0.1}, {"total_steps": 0}, {"direction": "up"}])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        LocosSchedule(**kw)


def test_dice_examples():
    m = np.array([[1.0, 1.0, 0.0, 0.0]])
    assert dice_loss(Tensor(np.array([[1.0, 0.0, 0.0, 0.0]])), m, smooth=0.0).item() == pytest.approx(1 / 3)
    assert dice_loss(Tensor(m), m, smooth=0.0).item() == 0.0
    assert dice_loss(Tensor(1 - m), m, smooth=0.0).item() == 1.0
    # empty mask and empty prediction stay finite thanks to the smoothing term
    assert dice_loss(Tensor(np.zeros((1, 4))), np.zeros((1, 4))).item() == 0.0


def test_dice_is_per_image_mean():
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    m = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert dice_loss(Tensor(p), m, smooth=0.0).item() == pytest.approx(0.5)


def test_dice_permutation_symmetric(rng):
    p = rng.random((2, 1, 8, 8))
    m = (rng.random((2, 1, 8, 8)) > 0.5).astype(float)
    perm = rng.permutation(64)
    pp = p.reshape(2, 1, 64)[..., perm].reshape(p.shape)
    mp = m.reshape(2, 1, 64)[..., perm].reshape(m.shape)
    assert dice_loss(Tensor(pp), mp).item() == pytest.approx(dice_loss(Tensor(p), m).item(), abs=1e-12)


def test_dice_gradient_fd(f64, rng):
    p0 = rng.uniform(0.05, 0.95, (2, 1, 4, 4))
    m = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
    p = leaf(p0)
    dice_loss(p, m).backward()
    h = 1e-6
    for _ in range(20):
        idx = tuple(rng.integers(0, s) for s in p0.shape)
        a, b = p0.copy(), p0.copy()
        a[idx] += h
        b[idx] -= h
        fd = (dice_loss(Tensor(a), m).item() - dice_loss(Tensor(b), m).item()) / (2 * h)
        assert abs(p.grad[idx] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_mse_examples():
    i = np.zeros((1, 3, 4, 4))
    assert mse_loss(Tensor(i), i).item() == 0.0
    assert mse_loss(Tensor(i + 0.1), i).item() == pytest.approx(0.01)
    assert mse_loss(Tensor(i + 1.0), i).item() == 1.0
    with pytest.raises(ValueError):
        mse_loss(Tensor(i), np.zeros((1, 3, 4, 5)))


def test_combine_arithmetic(f64):
    assert combine(Tensor(0.04), Tensor(0.3), 0.6).item() == pytest.approx(0.196, abs=1e-15)
    assert combine(Tensor(0.04), Tensor(0.3), 1.0).item() == 0.3
    assert combine(Tensor(0.04), Tensor(0.3), 0.0).item() == 0.04
    assert combine(None, Tensor(0.3), 0.2).item() == 0.3


def _outputs(rng, restored=True):
    r = Tensor(rng.random((2, 3, 8, 8))) if restored else None
    return ModelOutputs(r, Tensor(rng.random((2, 1, 8, 8))))


def test_total_loss_uses_schedule(f64, rng):
    out = _outputs(rng)
    img, mask = rng.random((2, 3, 8, 8)), (rng.random((2, 1, 8, 8)) > 0.5).astype(float)
    s = LocosSchedule(0.2, 100)
    rep = total_loss(out, img, mask, 50, s)
    assert rep.weight == w_seg(50, s)
    assert rep.total.item() == pytest.approx((1 - rep.weight) * rep.deb + rep.weight * rep.seg, rel=1e-12)
    assert 0 <= rep.seg <= 1 and rep.deb >= 0


def test_total_loss_fixed_weight_and_seg_only(rng):
    img, mask = rng.random((2, 3, 8, 8)), np.ones((2, 1, 8, 8))
    rep = total_loss(_outputs(rng), img, mask, 0, None)
    assert rep.weight == FIXED_WEIGHT == 0.5
    seg_only = total_loss(_outputs(rng, restored=False), img, mask, 0, LocosSchedule())
    assert seg_only.total.item() == seg_only.seg and seg_only.deb == 0.0
