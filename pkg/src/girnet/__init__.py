"""Space-time video super-resolution on a small numpy autodiff engine."""

from .autodiff import Tensor, finite_diff_check, no_grad, reverse_accumulate
from .data import DataError, VideoClip, bicubic_resize, degrade_clip, load_clip, save_clip
from .estimator import GIRNetRegressor
from .kernels import conv2d, deformable_conv2d, pixel_shuffle
from .metrics import charbonnier_loss, psnr, ssim
from .model import ModelConfig, girnet_forward, init_weights
from .optim import lr_schedule

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "GIRNetRegressor",
    "ModelConfig",
    "Tensor",
    "VideoClip",
    "bicubic_resize",
    "charbonnier_loss",
    "conv2d",
    "deformable_conv2d",
    "degrade_clip",
    "finite_diff_check",
    "girnet_forward",
    "init_weights",
    "load_clip",
    "lr_schedule",
    "no_grad",
    "pixel_shuffle",
    "psnr",
    "reverse_accumulate",
    "save_clip",
    "ssim",
]
