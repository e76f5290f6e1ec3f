"""Grayscale-plus-color-grid image compression with a learned colorizer."""

from .color_space import LabImage, Rgb8Image, lab_to_rgb, rgb_to_lab
from .crayon_net import CrayonModel, build_crayon, load_checkpoint, save_checkpoint
from .grid_codec import CgcFile, GridSpec, decode_to_inputs, encode, naive_fill_decode, relative_size_bound
from .metrics import csim, evaluate_model, psnr
from .training import TrainConfig, train, train_samples

__all__ = [
    "Rgb8Image",
    "LabImage",
    "rgb_to_lab",
    "lab_to_rgb",
    "GridSpec",
    "CgcFile",
    "encode",
    "decode_to_inputs",
    "naive_fill_decode",
    "relative_size_bound",
    "CrayonModel",
    "build_crayon",
    "save_checkpoint",
    "load_checkpoint",
    "psnr",
    "csim",
    "evaluate_model",
    "TrainConfig",
    "train",
    "train_samples",
]
__version__ = "0.1.0"
