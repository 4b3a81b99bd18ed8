"""Per-image iterative filling from (optionally) pre-trained weights.

Each iteration hides a random pixel subset, reconstructs it, takes a masked
loss step, and folds the hidden-site predictions into a running per-pixel
ensemble. Visible-site predictions are never used: they carry no
reconstruction supervision. A pixel-shuffle down/up-sampling pair breaks
short-range noise correlation for real-world noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import (AdamState, ContractViolation, NumericError, Tape, Tensor,
                     adam_step, backward, collect_grads)
from .masking import MaskSpec, apply_mask, masked_mse, negate, sample_mask
from .metrics import psnr
from .model import Hourglass, HourglassConfig, load_weights

ENSEMBLE_MODES = ("ema", "average", "last", "avg_after")


@dataclass
class DenoiseConfig:
    mask_ratio: float = 0.3
    beta: float = 0.99
    iters: int = 1000
    lr: float = 2e-3
    pd_factor: int = 1
    ensemble_mode: str = "ema"
    avg_after_start: int = 0          # first iteration included by avg_after
    mask_loss: bool = True
    shared_channels: bool = False
    init_weights: str = "scratch"     # weight-file path or "scratch"
    model: HourglassConfig | None = None
    seed: int = 0
    plateau_window: int = 0           # 0 disables the plateau stop
    plateau_rel: float = 1e-3

    def __post_init__(self):
        if self.ensemble_mode not in ENSEMBLE_MODES:
            raise ContractViolation(f"unknown ensemble mode {self.ensemble_mode!r}")
        if self.ensemble_mode == "ema" and not 0.0 < self.beta < 1.0:
            raise ContractViolation(f"ema needs 0 < beta < 1, got {self.beta}")
        if self.pd_factor < 1:
            raise ContractViolation(f"pd_factor {self.pd_factor} < 1")


# ---------------------------------------------------------------------------
# Pixel-shuffle down/up-sampling
# ---------------------------------------------------------------------------

def pd_down(img: np.ndarray, d: int) -> np.ndarray:
    """Split (1,C,H,W) into the d*d interleaved sub-images (d^2,C,H/d,W/d).

    Sub-image k = i*d + j holds the pixels at positions congruent to (i, j)
    mod d. Requires divisibility; see pad_to_multiple for the general case.
    """
    if img.ndim != 4 or img.shape[0] != 1:
        raise ContractViolation(f"pd_down expects (1,C,H,W), got {img.shape}")
    if d == 1:
        return img.copy()
    _, c, h, w = img.shape
    if h % d or w % d:
        raise ContractViolation(f"pd_down: {h}x{w} not divisible by {d}")
    r = img[0].reshape(c, h // d, d, w // d, d)
    return r.transpose(2, 4, 0, 1, 3).reshape(d * d, c, h // d, w // d).copy()


def pd_up(stack: np.ndarray, d: int) -> np.ndarray:
    """Exact inverse of pd_down."""
    if stack.ndim != 4:
        raise ContractViolation(f"pd_up expects a 4-d stack, got {stack.shape}")
    if d == 1:
        return stack.copy()
    n, c, h, w = stack.shape
    if n != d * d:
        raise ContractViolation(f"pd_up: batch {n} != d^2 = {d * d}")
    r = stack.reshape(d, d, c, h, w)
    return r.transpose(2, 3, 0, 4, 1).reshape(1, c, h * d, w * d).copy()


def pad_to_multiple(img: np.ndarray, d: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad (1,C,H,W) on the bottom/right so H and W divide by d."""
    _, _, h, w = img.shape
    ph, pw = (-h) % d, (-w) % d
    if ph == 0 and pw == 0:
        return img, (0, 0)
    return np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect"), (ph, pw)


def crop_pad(img: np.ndarray, pads: tuple[int, int]) -> np.ndarray:
    ph, pw = pads
    if ph == 0 and pw == 0:
        return img
    return img[:, :, :img.shape[2] - ph, :img.shape[3] - pw].copy()


# ---------------------------------------------------------------------------
# Prediction ensembles
# ---------------------------------------------------------------------------

def ema_update(ybar: np.ndarray, y: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """Fold a prediction into the running image at its hidden sites only:
    where mask == 0, ybar <- beta*ybar + (1-beta)*y; elsewhere unchanged."""
    if ybar.shape != y.shape or y.shape != mask.shape:
        raise ContractViolation("ema_update: shapes must be congruent")
    mask_neg = 1.0 - mask
    return mask_neg * (beta * ybar + (1.0 - beta) * y) + mask * ybar


class EmaEnsemble:
    """Running image plus a per-pixel count of hidden-site updates."""

    def __init__(self, init: np.ndarray, beta: float):
        self.value_arr = init.astype(np.float32).copy()
        self.beta = beta
        self.counter = np.zeros(init.shape, dtype=np.int32)
        self.t = 0

    def update(self, y: np.ndarray, mask: np.ndarray):
        self.t += 1
        self.value_arr = ema_update(self.value_arr, y, mask, self.beta)
        self.counter += (mask == 0)

    def value(self) -> np.ndarray:
        return self.value_arr.copy()


class AverageEnsemble:
    """Uniform per-pixel mean over hidden-site predictions (optionally from a
    start iteration on, for the avg_after mode). Unvisited pixels fall back
    to the initial image."""

    def __init__(self, init: np.ndarray, start: int = 0):
        self.fallback = init.astype(np.float32).copy()
        self.start = start
        self.total = np.zeros(init.shape, dtype=np.float64)
        self.counter = np.zeros(init.shape, dtype=np.int32)
        self.t = 0

    def update(self, y: np.ndarray, mask: np.ndarray):
        self.t += 1
        if self.t < self.start:
            return
        hidden = mask == 0
        self.total += np.where(hidden, y, 0.0)
        self.counter += hidden

    def value(self) -> np.ndarray:
        seen = self.counter > 0
        out = np.where(seen, self.total / np.maximum(self.counter, 1), self.fallback)
        return out.astype(np.float32)


class LastEnsemble:
    """Keep each pixel's most recent hidden-site prediction."""

    def __init__(self, init: np.ndarray):
        self.value_arr = init.astype(np.float32).copy()
        self.counter = np.zeros(init.shape, dtype=np.int32)
        self.t = 0

    def update(self, y: np.ndarray, mask: np.ndarray):
        self.t += 1
        hidden = mask == 0
        self.value_arr = np.where(hidden, y, self.value_arr).astype(np.float32)
        self.counter += hidden

    def value(self) -> np.ndarray:
        return self.value_arr.copy()


def make_ensemble(cfg: DenoiseConfig, init: np.ndarray):
    if cfg.ensemble_mode == "ema":
        return EmaEnsemble(init, cfg.beta)
    if cfg.ensemble_mode == "average":
        return AverageEnsemble(init)
    if cfg.ensemble_mode == "avg_after":
        return AverageEnsemble(init, start=cfg.avg_after_start)
    return LastEnsemble(init)


# ---------------------------------------------------------------------------
# Iterative filling
# ---------------------------------------------------------------------------

@dataclass
class FillResult:
    output: np.ndarray
    trace: list[dict]
    never_hidden: int          # pixels the ensemble never updated
    iterations_run: int
    seconds: float


def _full_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    return masked_mse(pred, target, np.ones_like(target))


def iterative_fill(model: Hourglass, x: np.ndarray, cfg: DenoiseConfig,
                   rng: np.random.Generator, reference: np.ndarray | None = None,
                   record: list | None = None) -> FillResult:
    """Run the masked fill-in loop on an NCHW stack and return the ensemble.

    `record`, when given, collects (prediction, mask) pairs per iteration for
    replay-style verification. `reference` adds a per-iteration psnr column
    to the trace.
    """
    if cfg.iters < 1:
        raise ContractViolation(f"iterative_fill: iters = {cfg.iters} must be >= 1")
    t0 = time.perf_counter()
    x = x.astype(np.float32, copy=False)
    spec = MaskSpec(cfg.mask_ratio, shared_channels=cfg.shared_channels)
    ens = make_ensemble(cfg, x)
    state = AdamState()
    trace: list[dict] = []
    losses: list[float] = []

    ran = 0
    for t in range(1, cfg.iters + 1):
        mask = sample_mask(x.shape, spec, rng)
        with Tape() as tape:
            pred = model(Tensor(apply_mask(mask, x)))
            loss = masked_mse(pred, x, negate(mask)) if cfg.mask_loss else _full_mse(pred, x)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite loss {loss_val} at iteration {t}")
        grads = collect_grads(backward(loss, tape), model.params)
        adam_step(model.params, grads, state, cfg.lr)

        ens_mask = mask if cfg.mask_loss else np.zeros_like(mask)
        ens.update(pred.data, ens_mask)
        if record is not None:
            record.append((pred.data.copy(), ens_mask.copy()))

        losses.append(loss_val)
        row = {"t": t, "loss": loss_val, "lr": cfg.lr}
        if reference is not None:
            row["psnr"] = psnr(reference, ens.value())
        trace.append(row)
        ran = t

        w = cfg.plateau_window
        if w and t >= 2 * w:
            recent = float(np.mean(losses[-w:]))
            previous = float(np.mean(losses[-2 * w:-w]))
            if recent >= previous * (1.0 - cfg.plateau_rel):
                break

    return FillResult(ens.value(), trace, int(np.sum(ens.counter == 0)), ran,
                      time.perf_counter() - t0)


def direct_ensemble(model, x: np.ndarray, p: float, passes: int,
                    rng: np.random.Generator, shared_channels: bool = False) -> np.ndarray:
    """Average hidden-site predictions over `passes` random masks with the
    model weights held fixed; pixels never hidden fall back to x."""
    if passes < 1:
        raise ContractViolation(f"direct_ensemble: passes = {passes} must be >= 1")
    x = x.astype(np.float32, copy=False)
    spec = MaskSpec(p, shared_channels=shared_channels)
    total = np.zeros(x.shape, dtype=np.float64)
    count = np.zeros(x.shape, dtype=np.int32)
    for _ in range(passes):
        mask = sample_mask(x.shape, spec, rng)
        pred = model(Tensor(apply_mask(mask, x)))
        hidden = mask == 0
        total += np.where(hidden, pred.data, 0.0)
        count += hidden
    seen = count > 0
    return np.where(seen, total / np.maximum(count, 1), x).astype(np.float32)


def _build_model(cfg: DenoiseConfig, channels: int, rng: np.random.Generator) -> Hourglass:
    if cfg.init_weights == "scratch":
        mcfg = cfg.model if cfg.model is not None else HourglassConfig(in_channels=channels)
        if mcfg.in_channels != channels:
            raise ContractViolation(
                f"model expects {mcfg.in_channels} channels, image has {channels}")
        return Hourglass(mcfg, rng)
    weights = load_weights(cfg.init_weights)
    if weights.config.in_channels != channels:
        raise ContractViolation(
            f"weights expect {weights.config.in_channels} channels, image has {channels}")
    model = Hourglass.from_weights(weights)
    return model


def denoise(cfg: DenoiseConfig, x: np.ndarray, rng: np.random.Generator | None = None,
            reference: np.ndarray | None = None) -> FillResult:
    """Denoise one (1,C,H,W) image per the config; unclipped float output.

    With pd_factor > 1 the image is reflect-padded to divisibility, split into
    the d^2 sub-image stack, filled jointly, reassembled and cropped.
    """
    if x.ndim != 4 or x.shape[0] != 1:
        raise ContractViolation(f"denoise expects (1,C,H,W), got {x.shape}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    init_rng = np.random.default_rng(rng.integers(2 ** 63))
    model = _build_model(cfg, x.shape[1], init_rng)

    d = cfg.pd_factor
    if d == 1:
        return iterative_fill(model, x, cfg, rng, reference=reference)
    padded, pads = pad_to_multiple(x, d)
    stack = pd_down(padded, d)
    result = iterative_fill(model, stack, cfg, rng)
    out = crop_pad(pd_up(result.output, d), pads)
    return FillResult(out, result.trace, result.never_hidden,
                      result.iterations_run, result.seconds)
