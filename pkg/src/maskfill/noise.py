"""Synthesizers for five noise families, on unit-interval HWC images.

Every synthesizer is seeded and identity at its zero parameter. Outputs are
deliberately not clipped to [0, 1]: clipping would bias zero-mean noise, and
clamping happens only when an image is encoded to disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("gaussian", "poisson", "nlf", "speckle", "salt_pepper")

# parameter ranges for the mixed-noise generalization suite, one uniform draw
# per image (gaussian/speckle on the 0-1 intensity scale)
PARAM_RANGES = {
    "gaussian": (10.0 / 255.0, 50.0 / 255.0),
    "poisson": (10.0, 50.0),
    "nlf": (0.01, 0.012),
    "speckle": (10.0 / 255.0, 50.0 / 255.0),
    "salt_pepper": (0.02, 0.05),
}


@dataclass
class NoiseSpec:
    """One noise family plus its single free parameter.

    kind        parameter meaning
    gaussian    sigma, std of the additive noise on the [0,1] scale
    poisson     lambda, event rate (draws are P(I*lambda)/lambda)
    nlf         sigma_s, signal coefficient; the read term derives from it
    speckle     v, std of the zero-mean uniform multiplier
    salt_pepper d, per-polarity density (2d of pixels affected in total)
    """
    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.param < 0:
            raise ValueError(f"noise parameter must be >= 0, got {self.param}")
        if self.kind == "salt_pepper" and 2 * self.param > 1:
            raise ValueError(f"salt_pepper density {self.param} exceeds 0.5")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(kind=d["kind"], param=float(d["param"]), seed=int(d.get("seed", 0)))


def add_gaussian(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return img.copy()
    return (img + sigma * rng.standard_normal(img.shape)).astype(np.float32)


def add_poisson(img: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    if lam <= 0:
        raise ValueError(f"poisson rate must be positive, got {lam}")
    rate = np.maximum(img, 0.0) * lam
    return (rng.poisson(rate) / lam).astype(np.float32)


def nlf_read_noise(sigma_s: float) -> float:
    """Read-noise term of the noise level function: log-linear in sigma_s."""
    return math.exp(2.18 * math.log(sigma_s) + 1.2)


def add_nlf(img: np.ndarray, sigma_s: float, rng: np.random.Generator) -> np.ndarray:
    if sigma_s == 0:
        return img.copy()
    sigma_r = nlf_read_noise(sigma_s)
    variance = sigma_r + sigma_s * np.maximum(img, 0.0)
    return (img + np.sqrt(variance) * rng.standard_normal(img.shape)).astype(np.float32)


def add_speckle(img: np.ndarray, v: float, rng: np.random.Generator) -> np.ndarray:
    if v == 0:
        return img.copy()
    half = v * math.sqrt(3.0)   # uniform on +-v*sqrt(3) has std exactly v
    u = rng.uniform(-half, half, size=img.shape)
    return (img + img * u).astype(np.float32)


def add_salt_pepper(img: np.ndarray, d: float, rng: np.random.Generator) -> np.ndarray:
    """Replace pixels with 1.0 (prob d) or 0.0 (prob d), all channels jointly."""
    if d == 0:
        return img.copy()
    if img.ndim not in (2, 3):
        raise ValueError("salt_pepper expects HxW or HxWxC images")
    u = rng.random(img.shape[:2])
    salt = u < d
    pepper = (u >= d) & (u < 2 * d)
    if img.ndim == 3:
        salt = salt[:, :, None]
        pepper = pepper[:, :, None]
    out = np.where(salt, 1.0, img)
    out = np.where(pepper, 0.0, out)
    return out.astype(np.float32)


def synthesize(img: np.ndarray, spec: NoiseSpec,
               rng: np.random.Generator | None = None) -> np.ndarray:
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian":
        return add_gaussian(img, spec.param, rng)
    if spec.kind == "poisson":
        return add_poisson(img, spec.param, rng)
    if spec.kind == "nlf":
        return add_nlf(img, spec.param, rng)
    if spec.kind == "speckle":
        return add_speckle(img, spec.param, rng)
    return add_salt_pepper(img, spec.param, rng)


def draw_spec(kind: str, rng: np.random.Generator, seed: int = 0) -> NoiseSpec:
    """Spec with its parameter drawn uniformly from the generalization range."""
    lo, hi = PARAM_RANGES[kind]
    return NoiseSpec(kind, float(rng.uniform(lo, hi)), seed=seed)
