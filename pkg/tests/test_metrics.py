import numpy as np
import pytest

from freefix.errors import ShapeMismatchError
from freefix.images import AttributeImage
from freefix.metrics import (PSNR_SENTINEL, MetricReport, markdown_table, psnr, sign_test, ssim, ssim_with_grad,
                             write_csv)
from freefix.seeding import make_rng


def _img(seed, shape=(24, 24, 3)):
    return AttributeImage(make_rng(seed).uniform(0.0, 1.0, shape))


def test_psnr_known_value():
    a = AttributeImage(np.zeros((4, 4, 1)))
    b = AttributeImage(np.full((4, 4, 1), 0.1))
    assert psnr(a, b) == pytest.approx(20.0)


def test_identical_images_hit_the_sentinels():
    a = _img(0)
    assert psnr(a, a) == PSNR_SENTINEL
    assert ssim(a, a) == pytest.approx(1.0)


def test_metric_shape_checks():
    with pytest.raises(ShapeMismatchError):
        psnr(_img(0), _img(1, (24, 24, 1)))
    with pytest.raises(ShapeMismatchError):
        ssim(_img(0, (8, 8, 3)), _img(1, (8, 8, 3)))


def test_ssim_is_symmetric_and_bounded():
    a, b = _img(2), _img(3)
    value = ssim(a, b)
    assert value == pytest.approx(ssim(b, a))
    assert -1.0 <= value < 1.0


def test_ssim_gradient_matches_finite_differences():
    pred, target = _img(4, (14, 13, 2)), _img(5, (14, 13, 2))
    value, grad = ssim_with_grad(pred, target)
    assert value == pytest.approx(ssim(pred, target))
    rng = make_rng(6)
    h = 1e-6
    for _ in range(25):
        i, j, c = rng.integers(14), rng.integers(13), rng.integers(2)
        plus, minus = pred.data.copy(), pred.data.copy()
        plus[i, j, c] += h
        minus[i, j, c] -= h
        numeric = (ssim(AttributeImage(plus), target) - ssim(AttributeImage(minus), target)) / (2 * h)
        assert grad[i, j, c] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_report_aggregates_and_tables(tmp_path):
    report = MetricReport(meta={"scene": "wall"})
    report.add("a", 20.0, 0.5)
    report.add("b", 30.0, 0.7)
    report.add("c", 25.0, 0.9)
    assert report.mean_psnr == pytest.approx(25.0)
    assert report.median_ssim == pytest.approx(0.7)
    assert report.summary()["views"] == 3
    assert report.rows()[0] == {"scene": "wall", "view": "a", "psnr": 20.0, "ssim": 0.5}

    path = write_csv(report.rows(), tmp_path / "r.csv", ["view", "psnr"])
    assert path.read_text().splitlines() == ["view,psnr", "a,20.0000", "b,30.0000", "c,25.0000"]
    assert markdown_table(report.rows(), ["view"]).splitlines()[2] == "| a |"


def test_report_rejects_out_of_range_ssim():
    with pytest.raises(ValueError):
        MetricReport().add("a", 10.0, 1.5)


def test_sign_test():
    better = [1.0] * 10
    worse = [0.0] * 10
    assert sign_test(better, worse) == pytest.approx(0.5 ** 10)
    assert sign_test(worse, better) == pytest.approx(1.0)
    assert sign_test(better, better) == 1.0
