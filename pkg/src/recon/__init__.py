"""Layout-controlled toy diffusion with region-guided rectification."""
from .denoiser import Conditioning, ExactDenoiser, Mode, denoise
from .diffusion import NoiseSchedule, linear_schedule, noise_to_t, predict_z0, sample_loop
from .kernels import BACKEND
from .perception import detect, exclusive_dilate, iou, match_by_iou
from .raca import build_conditioning, build_embeddings
from .rgr import RectificationConfig, TargetMode, run_recon
from .toyworld import Box, Layout, LayoutObject, Palette, default_palette, random_layout, sample_scene

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Box", "Conditioning", "ExactDenoiser", "Layout", "LayoutObject", "Mode",
    "NoiseSchedule", "Palette", "RectificationConfig", "TargetMode", "build_conditioning",
    "build_embeddings", "default_palette", "denoise", "detect", "exclusive_dilate", "iou",
    "linear_schedule", "match_by_iou", "noise_to_t", "predict_z0", "random_layout", "run_recon",
    "sample_loop", "sample_scene",
]
