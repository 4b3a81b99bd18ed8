import numpy as np
import pytest

from maskfill.engine import ContractViolation
from maskfill.metrics import PSNR_CAP_DB, QualityReport, QualityRow, psnr, ssim

from conftest import natural


class TestPsnr:
    def test_identical_images_hit_cap(self, rng):
        img = rng.random((32, 32, 3))
        assert psnr(img, img) == PSNR_CAP_DB

    def test_uniform_difference_anchor(self):
        a = np.zeros((64, 64, 3))
        b = np.full((64, 64, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_symmetry(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-9)

    def test_strictly_decreasing_in_uniform_error(self, rng):
        a = rng.random((16, 16, 3))
        values = [psnr(a, a + delta) for delta in (0.01, 0.05, 0.1, 0.3)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_peak_parameter(self):
        a = np.zeros((8, 8))
        b = np.full((8, 8), 25.5)
        assert psnr(a, b, peak=255.0) == pytest.approx(20.0, abs=1e-9)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ContractViolation):
            psnr(rng.random((4, 4)), rng.random((4, 5)))


class TestSsim:
    def test_identical_images_score_one(self):
        img = natural("chelsea", 0, 0, 64)
        assert ssim(img, img) == 1.0

    def test_constant_images_closed_form(self):
        a = np.full((32, 32, 1), 0.2)
        b = np.full((32, 32, 1), 0.8)
        c1 = (0.01 * 1.0) ** 2
        expect = (2 * 0.2 * 0.8 + c1) / (0.2 ** 2 + 0.8 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(expect, abs=1e-6)

    def test_monotone_decrease_with_noise_level(self):
        img = natural("chelsea", 10, 10, 96)
        rng = np.random.default_rng(0)
        scores = []
        for sigma in (0.02, 0.05, 0.1):
            noisy = img + sigma * rng.standard_normal(img.shape)
            scores.append(ssim(img, noisy))
        assert scores[0] > scores[1] > scores[2]

    def test_symmetry(self, rng):
        a = rng.random((32, 32, 3))
        b = rng.random((32, 32, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_bounded(self, rng):
        a = rng.random((24, 24))
        b = -a + 0.5
        val = ssim(a, b)
        assert -1.0 <= val <= 1.0

    def test_window_larger_than_image_rejected(self, rng):
        with pytest.raises(ContractViolation):
            ssim(rng.random((8, 8)), rng.random((8, 8)))

    def test_matches_reference_implementation(self):
        skimage_metrics = pytest.importorskip("skimage.metrics")
        img = natural("astronaut", 50, 50, 96)
        rng = np.random.default_rng(4)
        noisy = (img + 0.08 * rng.standard_normal(img.shape)).astype(np.float64)
        ours = ssim(img.astype(np.float64), noisy)
        theirs = skimage_metrics.structural_similarity(
            img.astype(np.float64), noisy, channel_axis=2, data_range=1.0,
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        assert ours == pytest.approx(theirs, abs=1e-5)

    def test_accepts_nchw_singleton_batch(self, rng):
        a = rng.random((1, 3, 32, 32))
        b = rng.random((1, 3, 32, 32))
        hwc = ssim(a[0].transpose(1, 2, 0), b[0].transpose(1, 2, 0))
        assert ssim(a, b) == pytest.approx(hwc, abs=1e-12)


class TestQualityReport:
    def test_csv_layout_and_mean_row(self):
        report = QualityReport(rows=[
            QualityRow("b", 30.0, 0.9, "gaussian", 0.1),
            QualityRow("a", 20.0, 0.7, "gaussian", 0.1),
        ])
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "path,noise_kind,param,psnr,ssim"
        assert lines[1].startswith("a,")          # sorted by name
        assert lines[-1].startswith("mean,")
        assert f"{report.mean_psnr:.4f}" in lines[-1]
        assert report.mean_psnr == pytest.approx(25.0)

    def test_empty_report(self):
        assert np.isnan(QualityReport().mean_psnr)
