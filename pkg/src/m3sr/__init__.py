"""RGB to hyperspectral reconstruction with multi-perceptual selective state-space blocks."""
from .data import HsiCube, Pair, read_cube, synth_pair, write_cube
from .kernels import available_backends, set_backend
from .metrics import MetricReport, mssim, psnr, rmse, sam
from .network import M3SR, ModelConfig, build_model, build_variant, load_checkpoint, save_checkpoint
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "HsiCube", "Pair", "read_cube", "write_cube", "synth_pair",
    "available_backends", "set_backend",
    "MetricReport", "rmse", "psnr", "sam", "mssim",
    "M3SR", "ModelConfig", "build_model", "build_variant", "save_checkpoint", "load_checkpoint",
    "TrainConfig", "train_loop",
]
