"""Per-token localization head.

A two-layer MLP reads each decoder hidden state and regresses four raw
coordinates (two points that bound the word's spatial extent). The head runs
in parallel with the vocabulary projection and never feeds back into token
selection.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .langmodel import DecodeResult
from .textcodec import EOS_ID


class MissingEOSError(RuntimeError):
    """Raised when a box is requested from a decode that never emitted EOS."""


def canonical_box(coords) -> tuple[float, float, float, float]:
    """Orders raw (x1, y1, x2, y2) output so x1 <= x2 and y1 <= y2."""
    x1, y1, x2, y2 = (float(c) for c in coords)
    return (min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


class LocationHead(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(width, 4)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        """(..., width) hidden states -> (..., 4) raw coordinates."""
        return self.fc2(self.act(self.fc1(hidden)))

    def locate(self, hidden: torch.Tensor) -> np.ndarray:
        """Convenience wrapper returning per-token boxes as a numpy array."""
        with torch.no_grad():
            out = self.forward(hidden)
        return out.detach().cpu().numpy()


def eos_box(result: DecodeResult, head: LocationHead) -> tuple[float, float, float, float]:
    """Reads the box regressed at the end-of-sequence position of a decode."""
    if not result.ended_with_eos or not result.tokens or result.tokens[-1] != EOS_ID:
        raise MissingEOSError("decode did not terminate with an end-of-sequence token")
    with torch.no_grad():
        raw = head(result.hidden[-1])
    return canonical_box(raw.tolist())
