"""Location prompts: sinusoidal position features plus a linear projection.

Points and box corners live in normalized [0, 1] image coordinates. A box is
encoded as its two corners with a learned per-corner-type offset added, so the
model can tell top-left from bottom-right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

GLOBAL_BOX = (0.0, 0.0, 1.0, 1.0)


def _check_unit(values, what: str):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{what} must lie in [0, 1], got range [{arr.min()}, {arr.max()}]")


@dataclass(frozen=True)
class LocationPrompt:
    """Either a box prompt (4 floats) or a point-set prompt ((m, 2) array)."""

    kind: str  # "box" or "points"
    box: tuple[float, float, float, float] | None = None
    points: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "box":
            if self.box is None or len(self.box) != 4:
                raise ValueError("box prompt needs 4 coordinates")
            _check_unit(self.box, "box")
            x1, y1, x2, y2 = self.box
            if x1 > x2 or y1 > y2:
                raise ValueError(f"box corners out of order: {self.box}")
        elif self.kind == "points":
            pts = np.asarray(self.points, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
                raise ValueError(f"points prompt needs shape (m, 2), got {pts.shape}")
            _check_unit(pts, "points")
            object.__setattr__(self, "points", pts)
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")

    @classmethod
    def from_box(cls, x1: float, y1: float, x2: float, y2: float) -> "LocationPrompt":
        return cls(kind="box", box=(float(x1), float(y1), float(x2), float(y2)))

    @classmethod
    def from_points(cls, points) -> "LocationPrompt":
        return cls(kind="points", points=np.asarray(points, dtype=np.float64))

    @classmethod
    def whole_image(cls) -> "LocationPrompt":
        return cls.from_box(*GLOBAL_BOX)


def fourier_features(coords: torch.Tensor, bands: int) -> torch.Tensor:
    """Sine-cosine features of 2D coordinates.

    coords has shape (..., 2) in [0, 1]. For each coordinate the features are
    [sin(2 pi f_j u), cos(2 pi f_j u)] over frequencies f_j = 2^j,
    j = 0..bands-1, x block first then y, giving (..., 4 * bands).
    """
    if coords.shape[-1] != 2:
        raise ValueError(f"expected (..., 2) coordinates, got {tuple(coords.shape)}")
    freqs = 2.0 ** torch.arange(bands, dtype=coords.dtype, device=coords.device)
    ang = 2.0 * torch.pi * coords[..., :, None] * freqs  # (..., 2, F)
    feats = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., 2, F, 2)
    return feats.reshape(*coords.shape[:-1], 4 * bands)


class PromptEncoder(nn.Module):
    """Projects normalized points or box corners into the feature width."""

    def __init__(self, width: int, bands: int = 8):
        super().__init__()
        if bands < 1:
            raise ValueError("bands must be >= 1")
        self.bands = bands
        self.proj = nn.Linear(4 * bands, width)
        # one learned offset per corner role: index 0 = top-left, 1 = bottom-right
        self.corner_embed = nn.Parameter(torch.randn(2, width) * 0.02)

    def embed_points(self, points: torch.Tensor) -> torch.Tensor:
        """(B, m, 2) normalized points -> (B, m, width)."""
        return self.proj(fourier_features(points, self.bands))

    def embed_boxes(self, boxes: torch.Tensor) -> torch.Tensor:
        """(B, 4) boxes -> (B, 2, width), one embedding per corner."""
        corners = boxes.view(-1, 2, 2)
        emb = self.proj(fourier_features(corners, self.bands))
        return emb + self.corner_embed

    def encode(self, prompt: LocationPrompt, device=None, dtype=None) -> torch.Tensor:
        """Single prompt -> (1, k, width) embedding batch."""
        dtype = dtype or self.proj.weight.dtype
        device = device or self.proj.weight.device
        if prompt.kind == "box":
            boxes = torch.tensor([prompt.box], dtype=dtype, device=device)
            return self.embed_boxes(boxes)
        pts = torch.as_tensor(prompt.points, dtype=dtype, device=device).unsqueeze(0)
        return self.embed_points(pts)
