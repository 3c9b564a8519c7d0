"""Drawing predictions back onto images for qualitative inspection.

Normalized coordinates map to pixels as round(coord * (size - 1)). Trace
midpoints become 3x3 dots joined by line segments; boxes become one-pixel
outlines. Everything is drawn on a copy of the input.
"""

from __future__ import annotations

import numpy as np

TRACE_COLOR = (0, 255, 255)
BOX_COLOR = (255, 0, 255)


def to_pixel(coord: float, size: int) -> int:
    px = int(round(float(coord) * (size - 1)))
    return min(max(px, 0), size - 1)


def _draw_dot(img: np.ndarray, x: int, y: int, color) -> None:
    h, w, _ = img.shape
    img[max(y - 1, 0) : min(y + 2, h), max(x - 1, 0) : min(x + 2, w)] = color


def _draw_line(img: np.ndarray, x0: int, y0: int, x1: int, y1: int, color) -> None:
    n = max(abs(x1 - x0), abs(y1 - y0)) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    img[ys, xs] = color


def _draw_box(img: np.ndarray, box, color) -> None:
    h, w, _ = img.shape
    x1, y1 = to_pixel(box[0], w), to_pixel(box[1], h)
    x2, y2 = to_pixel(box[2], w), to_pixel(box[3], h)
    img[y1, x1 : x2 + 1] = color
    img[y2, x1 : x2 + 1] = color
    img[y1 : y2 + 1, x1] = color
    img[y1 : y2 + 1, x2] = color


def render_overlay(image: np.ndarray, trace, boxes) -> np.ndarray:
    """uint8 (H, W, 3) image + trace rows ((x1, y1, x2, y2) segments) + boxes
    -> annotated uint8 copy. Empty predictions return an exact copy."""
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w, _ = out.shape
    for box in boxes or []:
        _draw_box(out, box, BOX_COLOR)
    mids = [
        (to_pixel((r[0] + r[2]) / 2.0, w), to_pixel((r[1] + r[3]) / 2.0, h))
        for r in (trace or [])
    ]
    for (x0, y0), (x1, y1) in zip(mids, mids[1:]):
        _draw_line(out, x0, y0, x1, y1, TRACE_COLOR)
    for x, y in mids:
        _draw_dot(out, x, y, TRACE_COLOR)
    return out
