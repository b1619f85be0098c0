"""Rate-distortion optimized codec for anchor-predicted Gaussian splat scenes."""

from . import _backend
from .bitstream import read_scene, write_scene
from .core import AnchorPrimitive, Camera, CoupledPrimitive, RenderableGaussian, Scene
from .optimizer import CodecState, TrainConfig, encode_state, evaluate, init_codec, train
from .renderer import psnr, render, ssim

__version__ = "0.1.0"
BACKEND = _backend.NAME

__all__ = [
    "AnchorPrimitive", "BACKEND", "Camera", "CodecState", "CoupledPrimitive", "RenderableGaussian",
    "Scene", "TrainConfig", "encode_state", "evaluate", "init_codec", "psnr", "read_scene", "render",
    "ssim", "train", "write_scene",
]
