"""Joint endoscopic image deblurring and polyp segmentation on a small numpy autodiff engine."""
from .complexity import ComplexityReport, count_model
from .config import LocosConfig, TrainConfig, load_config
from .losses import LocosSchedule, dice_loss, mse_loss, total_loss, w_seg
from .metrics import psnr, seg_metrics, ssim
from .model import VARIANTS, EndoCaver, ModelConfig, ModelOutputs
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ComplexityReport", "EndoCaver", "LocosConfig", "LocosSchedule", "ModelConfig", "ModelOutputs",
    "Tensor", "TrainConfig", "VARIANTS", "count_model", "dice_loss", "load_config", "mse_loss",
    "no_grad", "precision", "psnr", "seg_metrics", "ssim", "total_loss", "w_seg",
]
