"""Pixel-aligned captioning on a synthetic shapes world.

A small vision-language model that emits a caption and a per-token pixel
location in one pass, with prompt-conditioned feature extraction, LoRA
adapters, and task heads for referring localization, location-conditioned
captioning, and dense captioning.
"""

__version__ = "0.1.0"

from .model import PixelAlignConfig, PixelAlignModel, build_model

__all__ = ["PixelAlignConfig", "PixelAlignModel", "build_model", "__version__"]
