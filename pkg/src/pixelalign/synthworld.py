"""Procedural shape-scene world: images, word-synchronized traces, boxes, referring queries, dataset IO.

Scenes are pure functions of (seed, config). Captions come from a closed
template grammar so the vocabulary is enumerable; every caption word carries a
two-point trace segment straddling its spatial anchor by +/-2 px.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .textcodec import Vocabulary, build_vocab

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
RELATION_WORDS = ("left", "right", "of", "above", "below")
ARTICLES = ("a", "the")
PERIOD = "."

VALID_SIZES = (32, 64, 128)
TRACE_HALF_EXTENT_PX = 2.0

_COLOR_RGB = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
BACKGROUND_U8 = 128  # mid-gray; quantized so PPM roundtrips are bit-exact


class PlacementError(RuntimeError):
    """Raised when rejection sampling cannot place non-overlapping objects."""


class DatasetFormatError(ValueError):
    """Raised for malformed on-disk dataset contents."""


def grammar_words() -> tuple[str, ...]:
    """Every word the caption/query templates can produce."""
    return tuple(ARTICLES) + COLORS + SHAPES + RELATION_WORDS + (PERIOD,)


def build_default_vocab() -> Vocabulary:
    return build_vocab([" ".join(grammar_words())])


@dataclass
class WorldConfig:
    size: int = 64
    min_objects: int = 2
    max_objects: int = 2
    min_size: int = 10
    max_size: int = 20
    gap: int = 2
    max_retries: int = 500

    def __post_init__(self):
        if self.size not in VALID_SIZES:
            raise ValueError(f"image size must be one of {VALID_SIZES}, got {self.size}")
        if not (1 <= self.min_objects <= self.max_objects <= 4):
            raise ValueError(f"object count range ({self.min_objects}, {self.max_objects}) outside [1, 4]")
        if self.min_size < 8:
            raise ValueError(f"min object size must be >= 8 px, got {self.min_size}")
        if self.max_size < self.min_size or self.max_size > self.size:
            raise ValueError(f"bad object size range ({self.min_size}, {self.max_size}) for image size {self.size}")


@dataclass
class SceneObject:
    shape: str
    color: str
    box: tuple[float, float, float, float]  # (x1, y1, x2, y2) pixels
    center: tuple[float, float] = field(init=False)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        self.center = ((x1 + x2) / 2.0, (y1 + y2) / 2.0)


@dataclass
class Scene:
    width: int
    height: int
    objects: list[SceneObject]
    rng_seed: int

    def __post_init__(self):
        if not (1 <= len(self.objects) <= 4):
            raise ValueError(f"scene must hold 1..4 objects, got {len(self.objects)}")
        for o in self.objects:
            x1, y1, x2, y2 = o.box
            if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height:
                raise ValueError(f"object box {o.box} outside {self.width}x{self.height} image")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1 :]:
                if _boxes_intersect(a.box, b.box):
                    raise ValueError(f"overlapping boxes {a.box} and {b.box}")


def _boxes_intersect(a, b, gap: float = 0.0) -> bool:
    iw = min(a[2], b[2]) - max(a[0], b[0]) + gap
    ih = min(a[3], b[3]) - max(a[1], b[1]) + gap
    return iw > 0 and ih > 0


def generate_scene(seed: int, config: WorldConfig) -> Scene:
    """Sample a scene with pairwise non-overlapping objects; deterministic in (seed, config)."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    combo_ids = rng.choice(len(COLORS) * len(SHAPES), size=n, replace=False)
    objects: list[SceneObject] = []
    for combo in combo_ids:
        color = COLORS[int(combo) // len(SHAPES)]
        shape = SHAPES[int(combo) % len(SHAPES)]
        placed = False
        for _ in range(config.max_retries):
            s = int(rng.integers(config.min_size, config.max_size + 1))
            x1 = int(rng.integers(0, config.size - s + 1))
            y1 = int(rng.integers(0, config.size - s + 1))
            box = (float(x1), float(y1), float(x1 + s), float(y1 + s))
            if all(not _boxes_intersect(box, o.box, gap=config.gap) for o in objects):
                objects.append(SceneObject(shape=shape, color=color, box=box))
                placed = True
                break
        if not placed:
            raise PlacementError(
                f"could not place object {len(objects) + 1}/{n} after "
                f"{config.max_retries} retries (seed={seed}, config={config})"
            )
    # canonical narration order (leftmost first, ties top first): the caption
    # is then a deterministic function of the rendered image
    objects.sort(key=lambda o: o.center)
    return Scene(width=config.size, height=config.size, objects=objects, rng_seed=seed)


def render_scene(scene: Scene) -> np.ndarray:
    """Rasterize to an H x W x 3 float32 image in [0, 1] over a mid-gray background."""
    h, w = scene.height, scene.width
    canvas = np.full((h, w, 3), BACKGROUND_U8, dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5  # pixel centers
    for obj in scene.objects:
        x1, y1, x2, y2 = obj.box
        cx, cy = obj.center
        if obj.shape == "square":
            inside = (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
        elif obj.shape == "circle":
            r = (x2 - x1) / 2.0
            inside = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
        else:  # triangle: apex top-center, base on the bottom edge
            t = (py - y1) / (y2 - y1)
            inside = (t >= 0) & (t <= 1) & (np.abs(px - cx) <= t * (x2 - x1) / 2.0)
        canvas[inside] = _COLOR_RGB[obj.color]
    return canvas.astype(np.float32) / np.float32(255.0)


def _relation_words(a: SceneObject, b: SceneObject) -> list[str]:
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    if abs(dx) >= abs(dy):
        return ["left", "of"] if dx < 0 else ["right", "of"]
    return ["above"] if dy < 0 else ["below"]


def _segment(anchor_xy, w: int, h: int) -> list[float]:
    ax, ay = anchor_xy
    e = TRACE_HALF_EXTENT_PX
    return [(ax - e) / w, (ay - e) / h, (ax + e) / w, (ay + e) / h]


def _encode_strict(words, vocab: Vocabulary) -> list[int]:
    for word in words:
        if word not in vocab:
            raise ValueError(f"vocabulary is missing template word {word!r}")
    return vocab.encode(" ".join(words))


def narrate_scene(scene: Scene, vocab: Vocabulary, mode: str = "dense"):
    """Template caption plus per-token trace segments and supervision mask.

    Object words anchor at their object's center, relation words at the
    midpoint of the two object centers, the final period at the image center.
    Dense mode supervises everything but the period; sparse mode only
    color/shape nouns.
    """
    if mode not in ("dense", "sparse"):
        raise ValueError(f"unknown supervision mode {mode!r}")
    if not scene.objects:
        raise ValueError("cannot narrate an empty scene")
    w, h = scene.width, scene.height
    first = scene.objects[0]
    words = ["a", first.color, first.shape]
    anchors = [first.center] * 3
    content = [False, True, True]  # color/shape nouns for the sparse mask
    if len(scene.objects) > 1:
        second = scene.objects[1]
        rel = _relation_words(first, second)
        mid = ((first.center[0] + second.center[0]) / 2.0, (first.center[1] + second.center[1]) / 2.0)
        words += rel + ["a", second.color, second.shape]
        anchors += [mid] * len(rel) + [second.center] * 3
        content += [False] * len(rel) + [False, True, True]
    words.append(PERIOD)
    anchors.append((w / 2.0, h / 2.0))
    content.append(False)

    tokens = _encode_strict(words, vocab)
    trace = np.array([_segment(a, w, h) for a in anchors], dtype=np.float64)
    if mode == "dense":
        mask = np.ones(len(words), dtype=bool)
        mask[-1] = False
    else:
        mask = np.array(content, dtype=bool)
    return tokens, trace, mask


def narrate_object(scene: Scene, index: int, vocab: Vocabulary):
    """Single-object caption ('a red circle .') with traces, for box-conditioned targets."""
    obj = scene.objects[index]
    words = ["a", obj.color, obj.shape, PERIOD]
    anchors = [obj.center] * 3 + [(scene.width / 2.0, scene.height / 2.0)]
    tokens = _encode_strict(words, vocab)
    trace = np.array([_segment(a, scene.width, scene.height) for a in anchors], dtype=np.float64)
    mask = np.array([True, True, True, False])
    return tokens, trace, mask


def make_referring(scene: Scene, vocab: Vocabulary):
    """One uniquely identifying query per object: ('the red circle', object index)."""
    if not scene.objects:
        raise ValueError("cannot build referring queries for an empty scene")
    out = []
    for i, obj in enumerate(scene.objects):
        out.append((_encode_strict(["the", obj.color, obj.shape], vocab), i))
    return out


def object_caption_from_query(query_tokens, vocab: Vocabulary) -> list[int]:
    """Derive the object's caption tokens ('a red circle .') from its referring query."""
    words = vocab.decode(query_tokens).split()
    if len(words) < 2 or words[0] != "the":
        raise ValueError(f"not a referring query: {words}")
    return _encode_strict(["a"] + words[1:] + [PERIOD], vocab)


@dataclass
class AlignedSample:
    """One training example: image, caption ids, per-token traces, boxes, referring queries."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    caption: list[int]
    trace: np.ndarray  # (n, 4) normalized segment endpoints
    trace_mask: np.ndarray  # (n,) bool
    boxes: np.ndarray  # (K, 4) normalized
    referring: list[tuple[list[int], int]]

    def __post_init__(self):
        n = len(self.caption)
        if self.trace.shape != (n, 4) or self.trace_mask.shape != (n,):
            raise ValueError(f"caption/trace/mask misaligned: {n}, {self.trace.shape}, {self.trace_mask.shape}")
        if self.trace.size and (self.trace.min() < 0.0 or self.trace.max() > 1.0):
            raise ValueError("trace coordinates outside [0, 1]")
        if self.boxes.size and (self.boxes.min() < 0.0 or self.boxes.max() > 1.0):
            raise ValueError("box coordinates outside [0, 1]")
        for _, idx in self.referring:
            if not (0 <= idx < len(self.boxes)):
                raise ValueError(f"referring target index {idx} out of range")


def make_sample(scene: Scene, vocab: Vocabulary, mode: str = "dense") -> AlignedSample:
    tokens, trace, mask = narrate_scene(scene, vocab, mode)
    scale = np.array([scene.width, scene.height, scene.width, scene.height], dtype=np.float64)
    boxes = np.array([o.box for o in scene.objects], dtype=np.float64) / scale
    return AlignedSample(
        image=render_scene(scene),
        caption=tokens,
        trace=trace,
        trace_mask=mask,
        boxes=boxes,
        referring=make_referring(scene, vocab),
    )


def sample_mode(sample: AlignedSample) -> str:
    """Supervision mode recovered from the mask (captions start with 'a',
    which dense mode supervises and sparse mode does not)."""
    return "dense" if bool(sample.trace_mask[0]) else "sparse"


def make_augmenter(vocab: Vocabulary, flip: bool = True, translate: bool = True,
                   max_shift: int | None = None, recolor: bool = False):
    """Label-preserving training augmentation: horizontal mirror, integer
    translation and palette permutation.

    All three are exact in this world: every shape is left-right symmetric,
    the background is uniform, and objects are hard-filled with pure palette
    colors, so flipping pixels, rolling them by a shift that keeps all objects
    in frame, or remapping one palette color to another reproduces what the
    renderer would have drawn for the transformed scene. Captions, traces,
    boxes and referring queries are rebuilt from the transformed geometry.
    `max_shift` caps the translation magnitude per axis; None allows any shift
    that keeps objects in frame. `recolor` applies a random permutation of the
    four palette colors to pixels and labels together.
    """
    palette = {
        name: (np.array(_COLOR_RGB[name], dtype=np.float32) / np.float32(255.0))
        for name in COLORS
    }

    def augment(sample: AlignedSample, rng: np.random.Generator) -> AlignedSample:
        size = sample.image.shape[0]
        objects = []
        for query, idx in sample.referring:
            words = vocab.decode(query).split()
            x1, y1, x2, y2 = (float(v) * size for v in sample.boxes[idx])
            objects.append(SceneObject(shape=words[2], color=words[1], box=(x1, y1, x2, y2)))
        image = sample.image
        if recolor:
            perm = {old: COLORS[int(k)]
                    for old, k in zip(COLORS, rng.permutation(len(COLORS)))}
            recolored = image.copy()
            for old in COLORS:
                recolored[np.all(image == palette[old], axis=-1)] = palette[perm[old]]
            image = recolored
            objects = [SceneObject(shape=o.shape, color=perm[o.color], box=o.box)
                       for o in objects]
        if flip and rng.integers(0, 2):
            image = image[:, ::-1, :]
            objects = [
                SceneObject(shape=o.shape, color=o.color,
                            box=(size - o.box[2], o.box[1], size - o.box[0], o.box[3]))
                for o in objects
            ]
        if translate:
            lo_x = -min(o.box[0] for o in objects)
            hi_x = size - max(o.box[2] for o in objects)
            lo_y = -min(o.box[1] for o in objects)
            hi_y = size - max(o.box[3] for o in objects)
            if max_shift is not None:
                lo_x, hi_x = max(lo_x, -max_shift), min(hi_x, max_shift)
                lo_y, hi_y = max(lo_y, -max_shift), min(hi_y, max_shift)
            dx = int(rng.integers(int(lo_x), int(hi_x) + 1))
            dy = int(rng.integers(int(lo_y), int(hi_y) + 1))
            if dx or dy:
                image = np.roll(image, (dy, dx), axis=(0, 1))
                objects = [
                    SceneObject(shape=o.shape, color=o.color,
                                box=(o.box[0] + dx, o.box[1] + dy, o.box[2] + dx, o.box[3] + dy))
                    for o in objects
                ]
        objects.sort(key=lambda o: o.center)
        # rng_seed is only a provenance note; augmented copies get a placeholder
        scene = Scene(width=size, height=size, objects=objects, rng_seed=0)
        tokens, trace, mask = narrate_scene(scene, vocab, sample_mode(sample))
        scale = np.array([size, size, size, size], dtype=np.float64)
        return AlignedSample(
            image=np.ascontiguousarray(image),
            caption=tokens,
            trace=trace,
            trace_mask=mask,
            boxes=np.array([o.box for o in objects], dtype=np.float64) / scale,
            referring=make_referring(scene, vocab),
        )

    return augment


def generate_dataset(n: int, seed: int, config: WorldConfig, vocab: Vocabulary, mode: str = "dense",
                     index_offset: int = 0) -> list[AlignedSample]:
    """n samples from per-scene seeds derived from (seed, index). Offset picks disjoint scene ranges."""
    samples = []
    for i in range(n):
        scene_seed = int(np.random.SeedSequence([seed, index_offset + i]).generate_state(1)[0])
        samples.append(make_sample(generate_scene(scene_seed, config), vocab, mode))
    return samples


# ---------------------------------------------------------------------------
# On-disk format: meta.jsonl + images/<id>.ppm (binary P6, maxval 255)
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Write a float [0, 1] H x W x 3 image as binary P6."""
    arr = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read binary P6 back to float32 [0, 1]; raises DatasetFormatError on malformed files."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6":
        raise DatasetFormatError(f"{path}: not a binary P6 file")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as e:
        raise DatasetFormatError(f"{path}: bad PPM header") from e
    if maxval != 255:
        raise DatasetFormatError(f"{path}: expected maxval 255, got {maxval}")
    raw = parts[3]
    if len(raw) < w * h * 3:
        raise DatasetFormatError(f"{path}: truncated pixel data ({len(raw)} of {w * h * 3} bytes)")
    arr = np.frombuffer(raw[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / np.float32(255.0)


def _round6(values) -> list:
    return [[round(float(v), 6) for v in row] for row in values]


def write_dataset(samples, out_dir) -> None:
    """Persist samples; coordinates serialized with 6 decimal places, pixels bit-exact."""
    os.makedirs(out_dir, exist_ok=True)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        record = {
            "id": sid,
            "caption_tokens": [int(t) for t in s.caption],
            "trace": _round6(s.trace),
            "trace_mask": [bool(m) for m in s.trace_mask],
            "boxes": _round6(s.boxes),
            "referring": [[list(map(int, q)), int(idx)] for q, idx in s.referring],
        }
        lines.append(json.dumps(record))
        write_ppm(os.path.join(images_dir, f"{sid}.ppm"), s.image)
    with open(os.path.join(out_dir, "meta.jsonl"), "w") as f:
        for line in lines:
            f.write(line + "\n")


def read_dataset(in_dir) -> list:
    meta_path = os.path.join(in_dir, "meta.jsonl")
    if not os.path.isfile(meta_path):
        raise DatasetFormatError(f"{in_dir}: missing meta.jsonl")
    samples = []
    with open(meta_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                sid = record["id"]
                caption = [int(t) for t in record["caption_tokens"]]
                trace = np.array(record["trace"], dtype=np.float64).reshape(len(caption), 4)
                mask = np.array(record["trace_mask"], dtype=bool)
                boxes = np.array(record["boxes"], dtype=np.float64).reshape(-1, 4)
                referring = [(list(map(int, q)), int(idx)) for q, idx in record["referring"]]
            except (KeyError, ValueError, TypeError) as e:
                raise DatasetFormatError(f"{meta_path}: malformed metadata at line {lineno}: {e}") from e
            image_path = os.path.join(in_dir, "images", f"{sid}.ppm")
            if not os.path.isfile(image_path):
                raise DatasetFormatError(f"missing image file for sample {sid}")
            samples.append(
                AlignedSample(
                    image=read_ppm(image_path),
                    caption=caption,
                    trace=trace,
                    trace_mask=mask,
                    boxes=boxes,
                    referring=referring,
                )
            )
    return samples
