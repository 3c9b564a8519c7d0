"""Full model assembly and its flat configuration record.

The composed model wires: image encoder -> prompt-conditioned feature
extractor -> decoder LM, with a per-token localization MLP reading the decoder
hidden states and an optional detection head reading the raw image features.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoder import EncoderConfig, ImageEncoder
from .extractor import ExtractorConfig, TwoWayExtractor
from .langmodel import DecoderLM, LMConfig
from .lochead import LocationHead
from .prompt import PromptEncoder
from .tasks import ProposalHead

PARAM_GROUPS = ("encoder", "prompt", "extractor", "langmodel", "lochead", "proposal")

# attribute name on PixelAlignModel -> public parameter-group name
_ATTR_TO_GROUP = {
    "encoder": "encoder",
    "prompt": "prompt",
    "extractor": "extractor",
    "lm": "langmodel",
    "lochead": "lochead",
    "proposal": "proposal",
}


@dataclass
class PixelAlignConfig:
    """Flat scalar config; round-trips through `key = value` text."""

    image_size: int = 64
    patch_size: int = 8
    width: int = 128
    enc_depth: int = 4
    enc_heads: int = 4
    frozen_branch: bool = False
    fourier_bands: int = 8
    ext_layers: int = 2
    ext_tokens: int = 32
    ext_heads: int = 4
    lm_depth: int = 4
    lm_heads: int = 4
    max_len: int = 24
    lora_rank: int = 4
    lora_alpha: float = 8.0
    frozen_base: bool = False
    vocab_size: int = 19
    with_proposal: bool = False
    prop_threshold: float = 0.3
    prop_topk: int = 8

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_flat(self) -> dict[str, str]:
        out = {}
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                out[key] = "true" if value else "false"
            else:
                out[key] = repr(value)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "PixelAlignConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "PixelAlignConfig":
        return cls.from_dict(
            {k: coerce_value(k, v, cls) for k, v in values.items()}
        )


def coerce_value(key: str, raw: str, cls=PixelAlignConfig):
    """Parses a flat-text config value using the declared field type."""
    types = {f.name: f.default for f in dataclasses.fields(cls)}
    if key not in types:
        raise ValueError(f"unknown config key: {key!r}")
    target = type(types[key])
    raw = raw.strip()
    if target is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {target.__name__}")
    return raw


class PixelAlignModel(nn.Module):
    def __init__(self, cfg: PixelAlignConfig):
        super().__init__()
        self.cfg = cfg
        enc_cfg = EncoderConfig(
            image_size=cfg.image_size,
            patch_size=cfg.patch_size,
            width=cfg.width,
            depth=cfg.enc_depth,
            heads=cfg.enc_heads,
            frozen_branch=cfg.frozen_branch,
        )
        self.encoder = ImageEncoder(enc_cfg)
        feat_width = self.encoder.out_width
        self.prompt = PromptEncoder(feat_width, bands=cfg.fourier_bands)
        self.extractor = TwoWayExtractor(
            ExtractorConfig(
                layers=cfg.ext_layers,
                tokens=cfg.ext_tokens,
                width=feat_width,
                heads=cfg.ext_heads,
            )
        )
        max_positions = cfg.ext_tokens + 16 + cfg.max_len + 1
        self.lm = DecoderLM(
            LMConfig(
                vocab_size=cfg.vocab_size,
                width=feat_width,
                depth=cfg.lm_depth,
                heads=cfg.lm_heads,
                max_len=cfg.max_len,
                max_positions=max_positions,
                lora_rank=cfg.lora_rank,
                lora_alpha=cfg.lora_alpha,
                frozen_base=cfg.frozen_base,
            )
        )
        self.lochead = LocationHead(feat_width)
        self.proposal = ProposalHead(feat_width) if cfg.with_proposal else None

    @property
    def feat_width(self) -> int:
        return self.encoder.out_width

    @property
    def grid(self) -> int:
        return self.encoder.cfg.grid

    def image_features(self, images) -> torch.Tensor:
        """(B, H, W, 3) or (H, W, 3) float images in [0, 1] -> (B, N, C)."""
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(np.ascontiguousarray(images))
        images = images.to(self.prompt.proj.weight.dtype)
        if images.ndim == 3:
            images = images.unsqueeze(0)
        return self.encoder(images)

    def prefix_from_boxes(self, feats: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """(B, N, C) features + (B, 4) normalized prompt boxes -> (B, Q, C)."""
        return self.extractor(feats, self.prompt.embed_boxes(boxes))

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameters keyed by module group; empty groups stay present."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {g: [] for g in PARAM_GROUPS}
        for name, param in self.named_parameters():
            attr = name.split(".", 1)[0]
            groups[_ATTR_TO_GROUP[attr]].append((name, param))
        return groups


def build_model(cfg: PixelAlignConfig, seed: int = 0) -> PixelAlignModel:
    """Deterministic construction: same config + seed gives identical weights."""
    torch.manual_seed(seed)
    return PixelAlignModel(cfg)
