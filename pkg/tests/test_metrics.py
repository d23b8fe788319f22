import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from endocaver.metrics import MetricReport, MetricRow, gaussian_window, psnr, seg_metrics, ssim


def confusion_loop(pred, mask):
    tp = fp = fn = 0
    for p, m in zip(pred.ravel(), mask.ravel()):
        tp += p and m
        fp += p and not m
        fn += (not p) and m
    return tp, fp, fn


def test_seg_metrics_match_confusion_loop(rng):
    for _ in range(100):
        m = rng.random((16, 16)) > rng.random()
        p = rng.random((16, 16))
        tp, fp, fn = confusion_loop(p >= 0.5, m)
        d, j, r = seg_metrics(p, m.astype(float))
        if tp + fn == 0:
            continue
        assert (d, j, r) == (2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn), tp / (tp + fn))
        assert d >= j


def test_seg_metrics_examples():
    m = np.array([1.0, 1.0, 0.0, 0.0])
    assert seg_metrics(m, m) == (1.0, 1.0, 1.0)
    d, j, r = seg_metrics(np.array([1.0, 0.0, 0.0, 0.0]), m)
    assert (d, j, r) == (pytest.approx(2 / 3), 0.5, 0.5)
    z = np.zeros(4)
    assert seg_metrics(z, z) == (1.0, 1.0, 1.0)
    assert seg_metrics(np.array([1.0, 0, 0, 0]), z) == (0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        seg_metrics(z, np.zeros(5))


def test_dice_iou_identity(rng):
    for _ in range(20):
        m = (rng.random((8, 8)) > 0.5).astype(float)
        d, j, _ = seg_metrics(rng.random((8, 8)), m)
        assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)


def test_threshold_flag():
    p = np.array([0.3, 0.6])
    m = np.array([1.0, 1.0])
    assert seg_metrics(p, m, threshold=0.25)[2] == 1.0
    assert seg_metrics(p, m)[2] == 0.5


def test_psnr_examples():
    a = np.full((3, 8, 8), 0.5)
    assert psnr(a, a) == 100.0
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(np.ones((3, 8, 8)), np.zeros((3, 8, 8))) == 0.0


def ssim_window_loop(a, b):
    g = gaussian_window()
    w = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - 10):
            for j in range(a.shape[2] - 10):
                x, y = a[ch, i:i + 11, j:j + 11], b[ch, i:i + 11, j:j + 11]
                mx, my = (w * x).sum(), (w * y).sum()
                vx = (w * x * x).sum() - mx * mx
                vy = (w * y * y).sum() - my * my
                cxy = (w * x * y).sum() - mx * my
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_window_loop(rng):
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert ssim(a, b) == pytest.approx(ssim_window_loop(a, b), abs=1e-10)


def test_ssim_matches_reference_library(rng):
    a = rng.random((32, 32))
    b = np.clip(a + 0.1 * rng.standard_normal((32, 32)), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    # the library crops the same 5px border, so the two definitions coincide
    assert ssim(a, b) == pytest.approx(ref, abs=1e-12)


def test_ssim_properties(rng):
    a = rng.random((3, 24, 24))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c = np.full((12, 12), 0.3)
    assert ssim(c, c) == 1.0
    b = rng.random((3, 24, 24))
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9
    stripes = np.tile([0.0, 1.0], (12, 6))
    assert ssim(1 - stripes, stripes) < 0
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_report_mean_and_csv(tmp_path):
    rep = MetricReport([MetricRow("a.png", 1.0, 1.0, 1.0), MetricRow("b.png", 0.5, 1 / 3, 0.5)])
    mean = rep.mean()
    assert mean.dice == 0.75 and mean.psnr is None
    rep.write_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["filename", "dice", "iou", "recall"]
    assert rows[-1][0] == "MEAN" and float(rows[-1][1]) == 0.75
    assert len(rows) == 4


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 1.0))
def test_metric_identities_property(seed, density):
    r = np.random.default_rng(seed)
    m = (r.random((12, 12)) < density).astype(float)
    d, j, rec = seg_metrics(r.random((12, 12)), m)
    assert 0 <= j <= d <= 1 and 0 <= rec <= 1
    if 0 < j < 1:
        assert d > j
