"""EDPN: enhanced deep pyramid network for blurry image restoration.

Public entry points are re-exported here; see the submodules for details.
"""

from edpn.config import RunConfig, load_config, parse_config
from edpn.degradation import DegradeSpec, degrade, jpeg_artifacts, make_kernel
from edpn.deform import BACKEND
from edpn.errors import ConfigError, EDPNError, FormatError, ShapeError, TrainingError
from edpn.inference import EnsembleSpec, infer, model_ensemble, self_ensemble, tiled_infer
from edpn.losses import LossWeights, charbonnier, evaluate, psnr, ssim, total_loss
from edpn.model import EDPN, ModelConfig, build_model
from edpn.training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DegradeSpec",
    "EDPN",
    "EDPNError",
    "EnsembleSpec",
    "FormatError",
    "LossWeights",
    "ModelConfig",
    "RunConfig",
    "ShapeError",
    "TrainConfig",
    "TrainingError",
    "build_model",
    "charbonnier",
    "degrade",
    "evaluate",
    "infer",
    "jpeg_artifacts",
    "load_config",
    "make_kernel",
    "model_ensemble",
    "parse_config",
    "psnr",
    "self_ensemble",
    "ssim",
    "tiled_infer",
    "total_loss",
    "train",
]
