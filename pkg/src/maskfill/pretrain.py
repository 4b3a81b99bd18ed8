"""Masked pre-training over a clean natural-image corpus.

Random crops are hidden with Bernoulli masks and the network is trained to
reconstruct the hidden sites only, with Adam under a cosine-annealed learning
rate. No noise is ever added to the corpus.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .engine import AdamState, ContractViolation, Tape, adam_step, backward, collect_grads, Tensor
from .masking import MaskSpec, apply_mask, masked_mse, negate, sample_mask
from .model import Hourglass, HourglassConfig, save_weights


class ConfigError(ValueError):
    """Run configuration cannot be satisfied (bad paths, empty corpus, ...)."""


@dataclass
class PretrainConfig:
    corpus_dir: str
    out_weights: str
    crop_size: int = 256          # desk scale: 64
    batch_size: int = 64          # desk scale: 8
    total_steps: int = 80_000     # desk scale: 2000
    lr0: float = 2e-3
    lr_min: float = 1e-5
    mask_ratio: float = 0.3       # 0.8-0.95 for the correlated-noise checkpoint
    shared_channels: bool = False
    model: HourglassConfig = field(default_factory=HourglassConfig)
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.lr_min > self.lr0:
            raise ConfigError("lr_min must not exceed lr0")


def cosine_lr(step: int, total: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from lr0 at step 0 down to lr_min at step == total."""
    if not 0 <= step <= total:
        raise ContractViolation(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))


class CorpusSampler:
    """Uniform random crops from a directory of images.

    Images smaller than the crop are skipped. Decoded images are cached, so
    keep the corpus desk-sized or accept the memory cost. Channel counts are
    adapted to `channels`: gray planes are replicated, color is averaged down.
    """

    def __init__(self, corpus_dir, crop_size: int, channels: int = 3):
        self.crop_size = crop_size
        self.channels = channels
        root = Path(corpus_dir)
        if not root.is_dir():
            raise ConfigError(f"corpus dir {corpus_dir} does not exist")
        self.paths = sorted(p for p in root.iterdir()
                            if p.suffix.lower() in imageio.SUPPORTED_SUFFIXES)
        self._cache: dict[Path, np.ndarray] = {}
        self._usable: list[Path] = []
        for p in self.paths:
            buf = imageio.load_image(p)
            if buf.data.shape[0] >= crop_size and buf.data.shape[1] >= crop_size:
                self._usable.append(p)
                self._cache[p] = self._adapt(buf.data)
        if not self._usable:
            raise ConfigError(
                f"corpus {corpus_dir} has no images of at least {crop_size}x{crop_size}")

    def __len__(self):
        return len(self._usable)

    def _adapt(self, img: np.ndarray) -> np.ndarray:
        c = img.shape[2]
        if c == self.channels:
            return img
        if c == 1:
            return np.repeat(img, self.channels, axis=2)
        if self.channels == 1:
            return img.mean(axis=2, keepdims=True).astype(img.dtype)
        raise ConfigError(f"cannot adapt {c}-channel image to {self.channels} channels")

    def sample_crop(self, rng: np.random.Generator) -> np.ndarray:
        """One crop_size x crop_size x C crop, fully inside its source image."""
        path = self._usable[int(rng.integers(len(self._usable)))]
        img = self._cache[path]
        h, w = img.shape[:2]
        size = self.crop_size
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
        return img[top:top + size, left:left + size]

    def sample_batch(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Stack of `batch` crops in NCHW order."""
        crops = [self.sample_crop(rng) for _ in range(batch)]
        return np.stack(crops).transpose(0, 3, 1, 2).copy()


def pretrain_step(model: Hourglass, batch: np.ndarray, p: float, lr: float,
                  rng: np.random.Generator, state: AdamState,
                  shared_channels: bool = False) -> float:
    """One masked-reconstruction step on an NCHW batch; returns the loss."""
    if batch.size == 0:
        raise ContractViolation("pretrain_step: empty batch")
    spec = MaskSpec(p, shared_channels=shared_channels)
    mask = sample_mask(batch.shape, spec, rng)
    with Tape() as tape:
        pred = model(Tensor(apply_mask(mask, batch)))
        loss = masked_mse(pred, batch, negate(mask), per_sample=True)
    grads = collect_grads(backward(loss, tape), model.params)
    adam_step(model.params, grads, state, lr)
    return loss.item()


@dataclass
class PretrainResult:
    weights_path: str
    digest: str
    log_rows: list[tuple[int, float, float]]   # (step, lr, loss)
    seconds: float


def run_pretrain(config: PretrainConfig) -> PretrainResult:
    t_start = time.perf_counter()
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    crop_rng = np.random.default_rng(seeds[1])
    mask_rng = np.random.default_rng(seeds[2])

    sampler = CorpusSampler(config.corpus_dir, config.crop_size,
                            channels=config.model.in_channels)
    model = Hourglass(config.model, init_rng)
    state = AdamState()

    log_rows = []
    log_fh = open(config.log_path, "a") if config.log_path else None
    try:
        if log_fh is not None and log_fh.tell() == 0:
            log_fh.write("step,lr,loss\n")
        for step in range(config.total_steps):
            lr = cosine_lr(step, config.total_steps, config.lr0, config.lr_min)
            batch = sampler.sample_batch(config.batch_size, crop_rng)
            loss = pretrain_step(model, batch, config.mask_ratio, lr, mask_rng,
                                 state, shared_channels=config.shared_channels)
            log_rows.append((step, lr, loss))
            if log_fh is not None:
                log_fh.write(f"{step},{lr:.8g},{loss:.8g}\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    digest = save_weights(model, config.out_weights)
    return PretrainResult(str(config.out_weights), digest, log_rows,
                          time.perf_counter() - t_start)
