"""
FreeFix desk engine

Fixes extrapolated views of a 3D Gaussian-splat scene: per-Gaussian
Fisher-information confidence, confidence-guided denoising of extrapolated
renders, and interleaved 3D refinement against the fixed images.

Usage:
    from freefix import make_synthetic_scene, corrupt_scene, run_freefix, SyntheticSpec

    gt, train, extrapolated = make_synthetic_scene(SyntheticSpec(seed=3))
"""

from .config import (CorruptionSpec, GuidanceConfig, PipelineConfig, RasterSettings, RefineConfig, RunConfig,
                     SyntheticSpec)
from .confidence import FisherAccumulator, accumulate_training_fisher, build_confidence_maps
from .errors import FreeFixError
from .guidance import denoise_with_guidance, external_denoiser_bridge, provider_from_name
from .images import AttributeImage
from .metrics import psnr, ssim
from .pipeline import evaluate_views, run_ablation, run_freefix
from .refine import fit_scene, refine_3d
from .render import backprop, render_attribute, render_color
from .scene import CameraView, GaussianScene, ViewSet, load_scene, load_views, save_scene, save_views
from .synthetic import corrupt_scene, make_synthetic_scene

__all__ = [
    "AttributeImage", "CameraView", "CorruptionSpec", "FisherAccumulator", "FreeFixError", "GaussianScene",
    "GuidanceConfig", "PipelineConfig", "RasterSettings", "RefineConfig", "RunConfig", "SyntheticSpec", "ViewSet",
    "accumulate_training_fisher", "backprop", "build_confidence_maps", "corrupt_scene", "denoise_with_guidance",
    "evaluate_views", "external_denoiser_bridge", "fit_scene", "load_scene", "load_views", "make_synthetic_scene",
    "provider_from_name", "psnr", "refine_3d", "render_attribute", "render_color", "run_ablation", "run_freefix",
    "save_scene", "save_views", "ssim",
]

__version__ = "0.1.0"
