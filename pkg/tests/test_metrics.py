import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from girnet.autodiff import Tensor, finite_diff_check
from girnet.metrics import (
    charbonnier_loss,
    evaluate_frames,
    gaussian_window,
    psnr,
    ssim,
    ssim_map,
    to_luma,
)

from .oracles import naive_ssim


def _frames(diff, shape=(1, 3, 4, 4), n=2):
    target = [np.full(shape, 0.4) for _ in range(n)]
    pred = [Tensor(t + diff) for t in target]
    return pred, target


def test_charbonnier_identical_is_eps():
    pred, target = _frames(0.0)
    assert charbonnier_loss(pred, target).data[0] == pytest.approx(1e-3, abs=1e-12)


def test_charbonnier_small_diff():
    pred, target = _frames(3e-3)
    assert charbonnier_loss(pred, target).data[0] == pytest.approx(math.sqrt(1e-5), rel=1e-6)
    assert math.sqrt(1e-5) == pytest.approx(3.16228e-3, rel=1e-5)


def test_charbonnier_unit_diff():
    pred, target = _frames(1.0)
    assert charbonnier_loss(pred, target).data[0] == pytest.approx(1.0000005, abs=1e-9)


def test_charbonnier_mismatch_rejected():
    pred, target = _frames(0.0)
    with pytest.raises(ValueError):
        charbonnier_loss(pred, target[:1])
    with pytest.raises(ValueError):
        charbonnier_loss(pred, [np.zeros((1, 3, 4, 5))] * 2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), amp=st.floats(0.0, 1.0))
def test_charbonnier_lower_bound(seed, amp):
    rng = np.random.default_rng(seed)
    t = rng.uniform(size=(1, 3, 3, 3))
    d = amp * rng.normal(size=t.shape)
    val = charbonnier_loss([Tensor(t + d)], [t]).data[0]
    assert val >= 1e-3 - 1e-15
    if amp > 0.01:
        assert val > 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_charbonnier_gradient_is_smooth(seed):
    rng = np.random.default_rng(seed)
    target = [rng.uniform(size=(1, 3, 3, 3))]
    x = rng.uniform(-1, 1, size=(1, 3, 3, 3))
    assert finite_diff_check(lambda t: charbonnier_loss([t], target), x) < 1e-6


def test_psnr_cap_and_values():
    t = np.full((3, 8, 8), 0.5)
    assert psnr(t, t) == 99.0
    assert psnr(t + 0.1, t) == pytest.approx(20.0, abs=1e-6)
    assert psnr(t + 0.5, t) == pytest.approx(10 * math.log10(4), abs=1e-9)
    assert psnr(t + 0.5, t) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(0)
    t = rng.uniform(0.3, 0.7, size=(3, 16, 16))
    noise = rng.choice([-1.0, 1.0], size=t.shape)
    values = [psnr(t + a * noise, t) for a in np.linspace(0.01, 0.3, 12)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_luma_weights():
    white = np.ones((3, 1, 1))
    assert to_luma(white)[0, 0] == pytest.approx((16 + 65.481 + 128.553 + 24.966) / 255)


def test_ssim_identical_is_one():
    x = np.random.default_rng(1).uniform(size=(3, 16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_window_is_normalised():
    g = gaussian_window()
    assert g.shape == (11, 11) and g.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("case", ["offset", "random"])
def test_ssim_matches_sliding_window_oracle(case):
    rng = np.random.default_rng(2)
    if case == "offset":
        target = np.clip(0.5 + 0.05 * rng.normal(size=(3, 16, 18)), 0, 1)
        pred = target + 0.1
    else:
        target = rng.uniform(size=(3, 15, 13))
        pred = np.clip(target + 0.2 * rng.normal(size=target.shape), 0, 1)
    assert abs(ssim(pred, target) - naive_ssim(pred, target)) < 1e-6


def test_ssim_inverted_is_low():
    x = np.random.default_rng(3).uniform(size=(3, 20, 20))
    assert ssim(1 - x, x) < 0.5


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 3, 12, 12))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9


def test_ssim_rejects_small_image():
    with pytest.raises(ValueError):
        ssim_map(np.zeros((3, 10, 12)), np.zeros((3, 10, 12)))


def test_evaluate_frames_report():
    rng = np.random.default_rng(4)
    gt = [rng.uniform(size=(3, 12, 12)) for _ in range(3)]
    rep = evaluate_frames([g.copy() for g in gt], gt)
    assert rep.psnr_db == [99.0] * 3 and rep.mean_ssim == 1.0
    luma = evaluate_frames([np.clip(g + 0.1, 0, 1) for g in gt], gt, luma_only=True)
    assert len(luma.ssim) == 3 and luma.mean_psnr < 99
