"""Bernoulli pixel masks and the masked reconstruction loss.

Masks are float arrays of exactly {0, 1}: 0 hides a site, 1 keeps it visible.
The hidden value (mask token) is the literal intensity 0, so masking an image
is a plain elementwise product. Arrays follow the (..., C, H, W) layout used
by the training stack; `shared_channels` draws one H x W plane and repeats it
over the channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ContractViolation, Tensor, mul, square, sub


@dataclass
class MaskSpec:
    """Sampling knobs: hide each site with probability `ratio`."""
    ratio: float
    shared_channels: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ContractViolation(f"mask ratio {self.ratio} outside [0, 1]")


def sample_mask(shape: tuple[int, ...], spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw a {0,1} mask for `shape`; sites are hidden independently.

    `shape` must carry a channel axis at -3 and spatial axes at -2, -1.
    """
    if len(shape) < 3:
        raise ContractViolation(f"mask shape {shape} needs (..., C, H, W)")
    if spec.shared_channels:
        plane_shape = shape[:-3] + (1,) + shape[-2:]
        plane = (rng.random(plane_shape) >= spec.ratio).astype(np.float32)
        reps = (1,) * (len(shape) - 3) + (shape[-3], 1, 1)
        return np.tile(plane, reps)
    return (rng.random(shape) >= spec.ratio).astype(np.float32)


def negate(mask: np.ndarray) -> np.ndarray:
    return 1.0 - mask


def apply_mask(mask: np.ndarray, img: np.ndarray) -> np.ndarray:
    if mask.shape != img.shape:
        raise ContractViolation(f"mask shape {mask.shape} != image shape {img.shape}")
    return mask * img


def masked_mse(pred: Tensor | np.ndarray, target: np.ndarray, mask_neg: np.ndarray,
               per_sample: bool = False) -> Tensor:
    """Mean squared error over the sites where mask_neg == 1.

    mask_neg is the negated mask: 1 marks a hidden (supervised) site. Sites
    with mask_neg == 0 contribute exactly zero to the value and the gradient.
    An all-zero mask_neg yields loss 0. With `per_sample`, the mean is taken
    per leading-axis element first and then across elements, so the loss is
    invariant to batch permutation even when mask counts differ.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    mask_neg = np.asarray(mask_neg, dtype=pred.dtype)
    if target.shape != pred.data.shape or mask_neg.shape != pred.data.shape:
        raise ContractViolation("masked_mse: pred, target and mask_neg must be congruent")

    if per_sample:
        b = mask_neg.shape[0]
        counts = mask_neg.reshape(b, -1).sum(axis=1)
        scale = 1.0 / (b * np.maximum(counts, 1.0))
        weights = mask_neg * scale.reshape((b,) + (1,) * (mask_neg.ndim - 1))
    else:
        count = mask_neg.sum()
        weights = mask_neg * (1.0 / max(count, 1.0))

    diff = sub(pred, target)
    return mul(square(diff), weights.astype(pred.dtype, copy=False)).sum()
