"""PSNR and SSIM on unit-peak float images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ContractViolation

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over all samples; identical images hit the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(peak * peak / mse)))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _windowed_mean(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a 2-d plane with kernel k (x) k."""
    from numpy.lib.stride_tricks import sliding_window_view
    a = sliding_window_view(x, k.size, axis=0) @ k
    return sliding_window_view(a, k.size, axis=1) @ k


def _ssim_plane(a: np.ndarray, b: np.ndarray, k: np.ndarray, peak: float) -> float:
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a = _windowed_mean(a, k)
    mu_b = _windowed_mean(b, k)
    var_a = _windowed_mean(a * a, k) - mu_a * mu_a
    var_b = _windowed_mean(b * b, k) - mu_b * mu_b
    cov = _windowed_mean(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Color images are scored per channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim == 4:   # accept NCHW with N == 1
        if a.shape[0] != 1:
            raise ContractViolation("ssim: batched input not supported")
        a = a[0].transpose(1, 2, 0)
        b = b[0].transpose(1, 2, 0)
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractViolation(f"ssim: image {h}x{w} smaller than the {SSIM_WINDOW}-tap window")
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    return float(np.mean([_ssim_plane(a[:, :, c], b[:, :, c], k, peak)
                          for c in range(a.shape[2])]))


@dataclass
class QualityRow:
    name: str
    psnr: float
    ssim: float
    noise_kind: str = ""
    noise_param: float | None = None


@dataclass
class QualityReport:
    rows: list[QualityRow] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else float("nan")

    def to_csv(self) -> str:
        lines = ["path,noise_kind,param,psnr,ssim"]
        for r in sorted(self.rows, key=lambda r: r.name):
            param = "" if r.noise_param is None else f"{r.noise_param:.6g}"
            lines.append(f"{r.name},{r.noise_kind},{param},{r.psnr:.4f},{r.ssim:.6f}")
        if self.rows:
            lines.append(f"mean,,,{self.mean_psnr:.4f},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"
