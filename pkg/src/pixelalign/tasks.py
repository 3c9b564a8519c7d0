"""Task adapters built on the captioning core.

Covers the three downstream uses of the shared backbone:
  * trace captioning: describe the whole image (or a prompted region) and
    localize every generated word;
  * referring localization: given a noun-phrase query, read the box regressed
    at the end-of-sequence position;
  * dense captioning: propose boxes with a small detection head, then caption
    each proposal through the box-prompt pathway.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .lochead import canonical_box
from .prompt import LocationPrompt
from .textcodec import BOS_ID


@dataclass
class CaptionResult:
    tokens: list[int]
    trace: np.ndarray  # (len(tokens), 4) canonical boxes, one per token
    ended_with_eos: bool


@dataclass
class ProposalConfig:
    threshold: float = 0.3
    topk: int = 8

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("proposal threshold must lie strictly inside (0, 1)")
        if self.topk < 1:
            raise ValueError("proposal topk must be >= 1")


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float


@dataclass
class DenseCaption:
    box: tuple[float, float, float, float]
    score: float
    tokens: list[int]
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.float64))


class ProposalHead(nn.Module):
    """Per-cell detector over the encoder grid: score logit, center offset, size."""

    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, kernel_size=3, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(width, 5, kernel_size=1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, N, C) grid features -> (B, G, G, 5) detection maps."""
        b, n, c = feats.shape
        g = math.isqrt(n)
        if g * g != n:
            raise ValueError(f"feature count {n} is not a square grid")
        x = feats.view(b, g, g, c).permute(0, 3, 1, 2)
        x = self.conv2(self.act(self.conv1(x)))
        return x.permute(0, 2, 3, 1)


def propose(maps: torch.Tensor, cfg: ProposalConfig | None = None) -> list[Detection]:
    """Decodes one (G, G, 5) detection map into scored boxes.

    Keeps strict 3x3 local maxima of the sigmoid score (ties suppress), drops
    cells at or below the threshold, and returns at most topk detections
    sorted by descending score.
    """
    cfg = cfg or ProposalConfig()
    if maps.ndim != 3 or maps.shape[-1] != 5:
        raise ValueError(f"expected a (G, G, 5) map, got {tuple(maps.shape)}")
    arr = maps.detach().cpu().double().numpy()
    g = arr.shape[0]
    scores = 1.0 / (1.0 + np.exp(-arr[:, :, 0]))
    padded = np.full((g + 2, g + 2), -np.inf)
    padded[1:-1, 1:-1] = scores
    keep = np.ones((g, g), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            keep &= scores > padded[1 + di : 1 + di + g, 1 + dj : 1 + dj + g]
    dets: list[Detection] = []
    for i in range(g):
        for j in range(g):
            if not keep[i, j] or scores[i, j] <= cfg.threshold:
                continue
            dx, dy, w, h = arr[i, j, 1:5]
            cx = (j + 0.5 + dx) / g
            cy = (i + 0.5 + dy) / g
            raw = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            box = tuple(min(max(v, 0.0), 1.0) for v in canonical_box(raw))
            dets.append(Detection(box=box, score=float(scores[i, j])))
    dets.sort(key=lambda d: -d.score)
    return dets[: cfg.topk]


def detection_targets(boxes, grid: int):
    """Builds per-cell training targets from ground-truth boxes.

    Returns (score (G, G), offsets (G, G, 2), sizes (G, G, 2), mask (G, G)).
    Each box marks the cell containing its center; the first box to claim a
    cell wins.
    """
    score = np.zeros((grid, grid), dtype=np.float32)
    offsets = np.zeros((grid, grid, 2), dtype=np.float32)
    sizes = np.zeros((grid, grid, 2), dtype=np.float32)
    mask = np.zeros((grid, grid), dtype=bool)
    for box in boxes:
        x1, y1, x2, y2 = (float(v) for v in box)
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        j = min(int(cx * grid), grid - 1)
        i = min(int(cy * grid), grid - 1)
        if mask[i, j]:
            continue
        score[i, j] = 1.0
        offsets[i, j] = (cx * grid - j - 0.5, cy * grid - i - 0.5)
        sizes[i, j] = (x2 - x1, y2 - y1)
        mask[i, j] = True
    return score, offsets, sizes, mask


def detection_loss(maps, score_t, offsets_t, sizes_t, mask_t):
    """(B, G, G, 5) maps vs targets -> (bce, l1) torch scalars.

    Score BCE is averaged over every cell; offset and size L1 only over
    positive cells (zero if the batch has none).
    """
    bce = nn.functional.binary_cross_entropy_with_logits(maps[..., 0], score_t)
    if mask_t.any():
        reg_pred = maps[..., 1:5][mask_t]
        reg_tgt = torch.cat([offsets_t, sizes_t], dim=-1)[mask_t]
        l1 = (reg_pred - reg_tgt).abs().mean()
    else:
        l1 = maps.sum() * 0.0
    return bce, l1


def _canonical_trace(raw: torch.Tensor) -> np.ndarray:
    rows = [canonical_box(r) for r in raw.detach().cpu().numpy()]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


@torch.no_grad()
def caption_with_trace(model, image, prompt: LocationPrompt | None = None,
                       max_len: int | None = None) -> CaptionResult:
    """Generates a caption and a per-token location trace for one image."""
    prompt = prompt or LocationPrompt.whole_image()
    feats = model.image_features(image)
    if prompt.kind == "box":
        boxes = torch.tensor([prompt.box], dtype=feats.dtype)
        prefix = model.prefix_from_boxes(feats, boxes)
    else:
        prefix = model.extractor(feats, model.prompt.encode(prompt, dtype=feats.dtype))
    result = model.lm.decode_greedy(prefix, max_len=max_len)
    trace = _canonical_trace(model.lochead(result.hidden))
    return CaptionResult(tokens=result.tokens, trace=trace,
                         ended_with_eos=result.ended_with_eos)


@torch.no_grad()
def refer(model, image, query_ids) -> tuple[float, float, float, float]:
    """Localizes the object named by a token query.

    The query conditions the decoder as a text prompt over whole-image
    features; the box is read from the localization head at the
    end-of-sequence position.
    """
    query = torch.as_tensor(query_ids, dtype=torch.long).reshape(1, -1)
    if query.shape[1] < 1:
        raise ValueError("empty referring query")
    feats = model.image_features(image)
    boxes = torch.tensor([LocationPrompt.whole_image().box], dtype=feats.dtype)
    prefix = model.prefix_from_boxes(feats, boxes)
    bos = torch.tensor([[BOS_ID]], dtype=torch.long)
    _, hidden = model.lm.forward_features(prefix, query, bos)
    return canonical_box(model.lochead(hidden[0, 0]).tolist())


@torch.no_grad()
def caption_box(model, image, box, max_len: int | None = None) -> CaptionResult:
    """Captions the region under a box prompt (degenerate boxes allowed)."""
    return caption_with_trace(model, image, LocationPrompt.from_box(*box), max_len=max_len)


@torch.no_grad()
def dense_caption(model, image, cfg: ProposalConfig | None = None) -> list[DenseCaption]:
    """Detects objects and captions each detection through the box prompt."""
    if model.proposal is None:
        raise ValueError("model was built without a proposal head")
    cfg = cfg or ProposalConfig(threshold=model.cfg.prop_threshold, topk=model.cfg.prop_topk)
    feats = model.image_features(image)
    maps = model.proposal(feats)[0]
    out: list[DenseCaption] = []
    for det in propose(maps, cfg):
        boxes = torch.tensor([det.box], dtype=feats.dtype)
        prefix = model.prefix_from_boxes(feats, boxes)
        decoded = model.lm.decode_greedy(prefix)
        trace = _canonical_trace(model.lochead(decoded.hidden))
        out.append(DenseCaption(box=det.box, score=det.score,
                                tokens=decoded.tokens, trace=trace))
    return out
