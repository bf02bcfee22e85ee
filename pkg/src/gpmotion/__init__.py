"""Motion model with a Gaussian-process prior over a latent motion matrix.

Submodules: ``autodiff`` (tape-based reverse mode), ``gp`` (kernel, KL,
sampling), ``deformation`` (smoothing, exponentiation, warping),
``model`` (encoder, TCN, decoder, training), ``synthdata`` (synthetic
sequences), ``metrics`` and ``cli``.
"""
from . import autodiff, deformation, gp, metrics, model, synthdata
from .deformation import GridSpec, SmoothingSpec
from .gp import KernelSpec, MotionMatrix
from .model import ModelConfig, MotionModel, TrainConfig, load_checkpoint, save_checkpoint, train
from .synthdata import SyntheticSpec, generate_dataset, read_dataset, write_dataset

__version__ = "0.1.0"

__all__ = ["autodiff", "deformation", "gp", "metrics", "model", "synthdata", "GridSpec",
           "SmoothingSpec", "KernelSpec", "MotionMatrix", "ModelConfig", "MotionModel",
           "TrainConfig", "load_checkpoint", "save_checkpoint", "train", "SyntheticSpec",
           "generate_dataset", "read_dataset", "write_dataset"]
