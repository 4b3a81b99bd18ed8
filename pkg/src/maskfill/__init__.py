"""Zero-shot image denoising: masked pre-training plus per-image iterative filling."""

from .engine import (AdamState, ContractViolation, NumericError, Tape, Tensor,
                     adam_step, backward, collect_grads, conv2d, gradient_check,
                     leaky_relu, upsample_nearest)
from .masking import MaskSpec, apply_mask, masked_mse, negate, sample_mask
from .metrics import psnr, ssim
from .model import Hourglass, HourglassConfig, ModelWeights, load_weights, save_weights
from .noise import NoiseSpec, synthesize
from .pretrain import CorpusSampler, PretrainConfig, cosine_lr, pretrain_step, run_pretrain
from .zeroshot import (DenoiseConfig, FillResult, denoise, direct_ensemble,
                       ema_update, iterative_fill, pd_down, pd_up)

__version__ = "0.1.0"
