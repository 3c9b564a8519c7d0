"""Patch-based image encoder producing a grid of visual feature vectors.

The encoder is a small ViT: non-overlapping patches are linearly projected,
a learned position embedding is added, and a stack of pre-norm self-attention
blocks refines the tokens. An optional frozen twin trunk (independently
initialized, never trained) can be concatenated feature-wise, doubling the
output width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .blocks import NumericError, SelfAttentionBlock


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 128
    depth: int = 4
    heads: int = 4
    frozen_branch: bool = False

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def out_width(self) -> int:
        """Feature width seen by downstream modules (doubled by the frozen twin)."""
        return self.width * 2 if self.frozen_branch else self.width


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut an (H, W, 3) image into row-major patches, each flattened channel-last.

    Returns an array of shape (num_patches, patch_size * patch_size * 3).
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    h, w, _ = image.shape
    if h != w:
        raise ValueError(f"expected a square image, got {h}x{w}")
    if h % patch_size != 0:
        raise ValueError(f"image size {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    x = image.reshape(g, patch_size, g, patch_size, 3)
    x = x.transpose(0, 2, 1, 3, 4)  # (gy, gx, py, px, c)
    return np.ascontiguousarray(x.reshape(g * g, patch_size * patch_size * 3))


def _patchify_torch(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    b, h, w, c = images.shape
    g = h // patch_size
    x = images.view(b, g, patch_size, g, patch_size, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch_size * patch_size * c)


def sincos_grid_init(grid: int, width: int) -> torch.Tensor:
    """2D sine-cosine position code over a grid, row-major, shape (grid^2, width).

    Used to initialize the learned position embedding: spatial structure is
    salient from the first step instead of having to emerge from noise.
    """
    if width % 4 != 0:
        raise ValueError("position embedding width must be divisible by 4")
    quarter = width // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys, xs = torch.meshgrid(
        torch.arange(grid, dtype=torch.float64),
        torch.arange(grid, dtype=torch.float64),
        indexing="ij",
    )
    out = []
    for coord in (xs.reshape(-1), ys.reshape(-1)):
        ang = coord[:, None] * omega[None, :]
        out.extend([torch.sin(ang), torch.cos(ang)])
    return torch.cat(out, dim=1).float()


class _Trunk(nn.Module):
    """Projection + position embedding + transformer stack over patch tokens."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        in_dim = cfg.patch_size * cfg.patch_size * 3
        self.proj = nn.Linear(in_dim, cfg.width)
        self.pos = nn.Parameter(sincos_grid_init(cfg.grid, cfg.width))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.width, cfg.heads) for _ in range(cfg.depth)
        )

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        x = self.proj(patches) + self.pos
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after encoder layer {i}")
        return x


class ImageEncoder(nn.Module):
    """Maps a batch of images to (B, num_patches, out_width) feature grids."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = _Trunk(cfg)
        if cfg.frozen_branch:
            self.frozen_trunk = _Trunk(cfg)
            self.frozen_trunk.requires_grad_(False)
        else:
            self.frozen_trunk = None

    @property
    def out_width(self) -> int:
        return self.cfg.out_width

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[3] != 3:
            raise ValueError(f"expected (B, H, W, 3) images, got shape {tuple(images.shape)}")
        if images.shape[1] != self.cfg.image_size or images.shape[2] != self.cfg.image_size:
            raise ValueError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} images,"
                f" got {images.shape[1]}x{images.shape[2]}"
            )
        patches = _patchify_torch(images, self.cfg.patch_size)
        feats = self.trunk(patches)
        if self.frozen_trunk is not None:
            with torch.no_grad():
                frozen = self.frozen_trunk(patches)
            feats = torch.cat([feats, frozen], dim=-1)
        return feats
