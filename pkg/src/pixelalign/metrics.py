"""Evaluation metrics: box IoU, referring precision, trace alignment, caption match, dense-caption mAP."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

EOS_ID = 2  # fixed special-token id, see textcodec


def iou(a, b) -> float:
    """IoU of two canonical (x1, y1, x2, y2) boxes. Returns 0 when the union has zero area."""
    ax1, ay1, ax2, ay2 = float(a[0]), float(a[1]), float(a[2]), float(a[3])
    bx1, by1, bx2, by2 = float(b[0]), float(b[1]), float(b[2]), float(b[3])
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def precision_at(preds, gts, tau: float = 0.5) -> float:
    """Fraction of paired pred/gt boxes with IoU >= tau.

    Empty input returns 0.0 and emits a warning rather than raising.
    """
    if len(preds) != len(gts):
        raise ValueError(f"precision_at: {len(preds)} predictions vs {len(gts)} ground truths")
    if len(preds) == 0:
        warnings.warn("precision_at called with no pairs; returning 0.0")
        return 0.0
    hits = sum(1 for p, g in zip(preds, gts) if iou(p, g) >= tau)
    return hits / len(preds)


def trace_score(pred, gt, mask, k: int = 0) -> float:
    """Mean midpoint distance between predicted and target trace segments (lower is better).

    For each masked token i the distance is the minimum over gt tokens j in
    [i-k, i+k] (clipped to valid indices) of the L2 distance between segment
    midpoints, in normalized units. k=0 is the pointwise score.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape[0] != mask.shape[0]:
        raise ValueError(f"trace_score: misaligned shapes {pred.shape}, {gt.shape}, {mask.shape}")
    if not mask.any():
        raise ValueError("trace_score undefined: mask selects no tokens")
    pred_mid = (pred[:, :2] + pred[:, 2:]) / 2.0
    gt_mid = (gt[:, :2] + gt[:, 2:]) / 2.0
    n = pred.shape[0]
    dists = []
    for i in np.nonzero(mask)[0]:
        lo, hi = max(0, i - k), min(n - 1, i + k)
        window = gt_mid[lo : hi + 1]
        d = np.sqrt(((window - pred_mid[i]) ** 2).sum(axis=1)).min()
        dists.append(d)
    return float(np.mean(dists))


def _strip_eos(tokens, eos_id: int):
    toks = list(tokens)
    while toks and toks[-1] == eos_id:
        toks.pop()
    return toks


def caption_match(pred, gt, eos_id: int = EOS_ID) -> tuple[int, float]:
    """(exact, token_f1): exact sequence match ignoring trailing EOS, plus bag-of-tokens F1."""
    p = _strip_eos(pred, eos_id)
    g = _strip_eos(gt, eos_id)
    exact = int(p == g)
    if not p and not g:
        return 1, 1.0
    if not p or not g:
        return exact, 0.0
    # multiset overlap
    counts: dict[int, int] = {}
    for t in g:
        counts[t] = counts.get(t, 0) + 1
    overlap = 0
    for t in p:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            overlap += 1
    precision = overlap / len(p)
    recall = overlap / len(g)
    if precision + recall == 0.0:
        return exact, 0.0
    return exact, 2.0 * precision * recall / (precision + recall)


def _average_precision(tp_flags, n_gt: int) -> float:
    """Every-point interpolated AP from true-positive flags in score order."""
    if n_gt == 0 or not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    precisions = tp / ranks
    recalls = tp / n_gt
    mrec = np.concatenate([[0.0], recalls])
    mpre = np.concatenate([[0.0], precisions])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def dense_map(preds, gts, iou_thresholds=(0.3, 0.5, 0.7), eos_id: int = EOS_ID) -> float:
    """Simplified dense-captioning mAP over one image's detections.

    preds: score-descending list of (box, tokens); gts: list of (box, tokens).
    A prediction is a true positive at threshold tau when it has IoU >= tau
    with a still-unmatched gt whose caption it matches exactly. AP per
    threshold (every-point interpolation), averaged over thresholds.
    """
    if len(gts) == 0:
        warnings.warn("dense_map called with no ground truths; returning 0.0")
        return 0.0
    aps = []
    for tau in iou_thresholds:
        matched = [False] * len(gts)
        tp_flags = []
        for box, tokens in preds:
            best_iou, best_j = 0.0, -1
            for j, (gbox, gtokens) in enumerate(gts):
                if matched[j]:
                    continue
                if caption_match(tokens, gtokens, eos_id)[0] != 1:
                    continue
                v = iou(box, gbox)
                if v >= tau and v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0:
                matched[best_j] = True
                tp_flags.append(1)
            else:
                tp_flags.append(0)
        aps.append(_average_precision(tp_flags, len(gts)))
    return float(np.mean(aps))


@dataclass
class EvalReport:
    """Named scalar metrics plus the evaluated sample count and config echo."""

    metrics: dict[str, float]
    sample_count: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {"metrics": self.metrics, "sample_count": self.sample_count, "config": self.config}
        return json.dumps(payload, sort_keys=True)
