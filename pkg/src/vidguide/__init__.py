"""Deterministic desk-scale video translation with spatial-temporal
correspondence guidance: flow warping and occlusion masks, guided
attention, feature optimization, a DDPM sandbox with a toy denoiser,
keyframe/batch orchestration, and a reproducible CLI."""

__version__ = "0.1.0"

from .config import TranslationConfig, default_config, load_config
from .pipeline import pixel_mse, plan_batches, select_keyframes, translate_video

__all__ = [
    "TranslationConfig",
    "default_config",
    "load_config",
    "pixel_mse",
    "plan_batches",
    "select_keyframes",
    "translate_video",
    "__version__",
]
