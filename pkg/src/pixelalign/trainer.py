"""Training: loss computation, batch assembly, the optimizer step, checkpoint
IO, and a finite-difference gradient checker.

The caption loss is label-smoothed cross-entropy over non-pad positions; the
localization loss is a masked L1 over the four regressed coordinates. The two
are combined as total = ce + lambda * l1 and reported through LossBreakdown,
whose fields always satisfy that identity exactly (it is computed from the
same two floats).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .blocks import NumericError
from .synthworld import TRACE_HALF_EXTENT_PX, AlignedSample
from .tasks import detection_loss, detection_targets
from .textcodec import BOS_ID, EOS_ID, PAD_ID

STAGES = ("caption_only", "joint", "referring", "dense", "mixed")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    stage: str = "joint"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    lr_decay: str = "none"  # "none" or "cosine" (anneal to 0 over cfg.steps)
    warmup: int = 0  # linear warmup steps before the schedule proper
    weight_decay: float = 0.0  # L2 on matrix weights (embeddings/norms/biases exempt)
    lambda_loc: float = 0.1
    label_smooth: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lambda_loc < 0:
            raise ValueError("lambda_loc must be >= 0")
        if not 0.0 <= self.label_smooth < 1.0:
            raise ValueError("label_smooth must lie in [0, 1)")

    def lr_at(self, step: int) -> float:
        """Schedule depends only on the step index, so resumed runs replay it."""
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        if self.lr_decay == "cosine" and self.steps > self.warmup:
            frac = (step - self.warmup) / (self.steps - self.warmup)
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.lr


@dataclass
class LossBreakdown:
    total: float
    caption_ce: float
    localization_l1: float
    n: int

    @classmethod
    def from_parts(cls, ce: float, l1: float, lam: float, n: int) -> "LossBreakdown":
        return cls(total=ce + lam * l1, caption_ce=ce, localization_l1=l1, n=n)


@dataclass
class Batch:
    """One teacher-forcing batch; detection targets ride along for the dense stage."""

    images: torch.Tensor  # (B, H, W, 3)
    prompt_boxes: torch.Tensor  # (B, 4)
    text_ids: torch.Tensor | None  # (B, T) or None
    inputs: torch.Tensor  # (B, n)
    labels: torch.Tensor  # (B, n)
    trace_targets: torch.Tensor  # (B, n, 4)
    trace_mask: torch.Tensor  # (B, n) bool
    det_score: torch.Tensor | None = None
    det_offsets: torch.Tensor | None = None
    det_sizes: torch.Tensor | None = None
    det_mask: torch.Tensor | None = None


def smoothed_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                           eps: float, pad_id: int = PAD_ID):
    """Label-smoothed CE averaged over non-pad positions.

    The true class gets probability 1 - eps; the remaining eps is spread
    uniformly over the other vocab entries. Returns (loss tensor, count).
    """
    if logits.shape[:2] != labels.shape:
        raise ValueError(
            f"logits {tuple(logits.shape)} do not align with labels {tuple(labels.shape)}"
        )
    vocab = logits.shape[-1]
    logp = F.log_softmax(logits, dim=-1)
    valid = labels != pad_id
    n_valid = int(valid.sum().item())
    if n_valid == 0:
        return logits.sum() * 0.0, 0
    true_lp = logp.gather(-1, labels.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    other_lp = logp.sum(dim=-1) - true_lp
    per_pos = -((1.0 - eps) * true_lp + (eps / (vocab - 1)) * other_lp)
    return per_pos[valid].mean(), n_valid


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor):
    """Mean absolute error over the four coordinates of masked positions."""
    if pred.shape != target.shape or pred.shape[:2] != mask.shape:
        raise ValueError("trace prediction, target and mask shapes disagree")
    if not bool(mask.any()):
        return pred.sum() * 0.0
    return (pred - target).abs()[mask].mean()


def compute_loss(logits, trace_pred, labels, trace_targets, trace_mask, cfg: TrainConfig):
    """Joint loss for one batch.

    Returns (LossBreakdown, total tensor); pass trace_pred=None to train the
    caption pathway alone.
    """
    ce_t, n_valid = smoothed_cross_entropy(logits, labels, cfg.label_smooth)
    if trace_pred is None:
        l1_t = ce_t * 0.0
    else:
        l1_t = masked_l1(trace_pred, trace_targets, trace_mask)
    total_t = ce_t + cfg.lambda_loc * l1_t
    breakdown = LossBreakdown.from_parts(
        float(ce_t.detach()), float(l1_t.detach()), cfg.lambda_loc, n_valid
    )
    return breakdown, total_t


def _pad_rows(rows: list[list[int]], pad: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), pad, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def _stack_images(samples: list[AlignedSample], idx) -> torch.Tensor:
    return torch.from_numpy(np.stack([samples[i].image for i in idx]))


def make_caption_batch(samples: list[AlignedSample], idx) -> Batch:
    """Whole-image captioning rows: inputs [BOS, w...], labels [w..., EOS].

    The EOS position gets a zero trace target with its mask off, so only real
    words contribute to the localization loss.
    """
    inputs, labels, traces, masks = [], [], [], []
    for i in idx:
        s = samples[i]
        words = list(s.caption)
        inputs.append([BOS_ID] + words)
        labels.append(words + [EOS_ID])
        traces.append(np.concatenate([s.trace, np.zeros((1, 4))], axis=0))
        masks.append(list(s.trace_mask) + [False])
    inp = _pad_rows(inputs, PAD_ID)
    lab = _pad_rows(labels, PAD_ID)
    n = lab.shape[1]
    b = len(idx)
    tr = torch.zeros(b, n, 4)
    mk = torch.zeros(b, n, dtype=torch.bool)
    for i in range(b):
        k = len(masks[i])
        tr[i, :k] = torch.from_numpy(traces[i]).float()
        mk[i, :k] = torch.tensor(masks[i])
    boxes = torch.tensor([[0.0, 0.0, 1.0, 1.0]]).repeat(b, 1)
    return Batch(images=_stack_images(samples, idx), prompt_boxes=boxes, text_ids=None,
                 inputs=inp, labels=lab, trace_targets=tr, trace_mask=mk)


def make_referring_batch(samples: list[AlignedSample], idx, rng: np.random.Generator) -> Batch:
    """Referring rows: query as text prompt, one EOS target carrying the box."""
    texts, boxes_t = [], []
    for i in idx:
        s = samples[i]
        if not s.referring:
            raise ValueError("sample has no referring queries")
        q, obj = s.referring[int(rng.integers(0, len(s.referring)))]
        texts.append(list(q))
        boxes_t.append(s.boxes[obj])
    lens = {len(t) for t in texts}
    if len(lens) != 1:
        raise ValueError("referring queries must share a length within a batch")
    b = len(idx)
    text = torch.tensor(texts, dtype=torch.long)
    inp = torch.full((b, 1), BOS_ID, dtype=torch.long)
    lab = torch.full((b, 1), EOS_ID, dtype=torch.long)
    tr = torch.tensor(np.asarray(boxes_t), dtype=torch.float32).unsqueeze(1)
    mk = torch.ones(b, 1, dtype=torch.bool)
    boxes = torch.tensor([[0.0, 0.0, 1.0, 1.0]]).repeat(b, 1)
    return Batch(images=_stack_images(samples, idx), prompt_boxes=boxes, text_ids=text,
                 inputs=inp, labels=lab, trace_targets=tr, trace_mask=mk)


def make_condcap_batch(samples: list[AlignedSample], idx, rng: np.random.Generator,
                       object_caption) -> Batch:
    """Location-conditioned captioning rows: box prompt -> object phrase.

    `object_caption` maps a referring query to the target token list (an "a
    <color> <shape> ." phrase). Word tokens get the object-center segment as
    trace target; the period and EOS stay unsupervised.
    """
    inputs, labels, traces, masks, pboxes = [], [], [], [], []
    for i in idx:
        s = samples[i]
        q, obj = s.referring[int(rng.integers(0, len(s.referring)))]
        words = object_caption(q)
        box = s.boxes[obj]
        size = s.image.shape[0]
        ext = TRACE_HALF_EXTENT_PX / size
        cx, cy = (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0
        seg = [cx - ext, cy - ext, cx + ext, cy + ext]
        inputs.append([BOS_ID] + words)
        labels.append(words + [EOS_ID])
        traces.append([seg] * (len(words) - 1) + [[0.0] * 4, [0.0] * 4])
        masks.append([True] * (len(words) - 1) + [False, False])
        pboxes.append(box)
    inp = _pad_rows(inputs, PAD_ID)
    lab = _pad_rows(labels, PAD_ID)
    b, n = lab.shape
    tr = torch.zeros(b, n, 4)
    mk = torch.zeros(b, n, dtype=torch.bool)
    for i in range(b):
        k = len(masks[i])
        tr[i, :k] = torch.tensor(traces[i], dtype=torch.float32)
        mk[i, :k] = torch.tensor(masks[i])
    boxes = torch.tensor(np.asarray(pboxes), dtype=torch.float32)
    return Batch(images=_stack_images(samples, idx), prompt_boxes=boxes, text_ids=None,
                 inputs=inp, labels=lab, trace_targets=tr, trace_mask=mk)


def attach_detection_targets(batch: Batch, samples, idx, grid: int) -> Batch:
    scores, offs, sizes, masks = [], [], [], []
    for i in idx:
        sc, of, sz, mk = detection_targets(samples[i].boxes, grid)
        scores.append(sc)
        offs.append(of)
        sizes.append(sz)
        masks.append(mk)
    batch.det_score = torch.from_numpy(np.stack(scores))
    batch.det_offsets = torch.from_numpy(np.stack(offs))
    batch.det_sizes = torch.from_numpy(np.stack(sizes))
    batch.det_mask = torch.from_numpy(np.stack(masks))
    return batch


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Stateless per-step generator: resuming at step k replays batch k exactly."""
    return np.random.default_rng([seed, step])


def assemble_batches(samples: list[AlignedSample], cfg: TrainConfig, step: int,
                     grid: int | None = None, object_caption=None,
                     augment=None) -> list[Batch]:
    rng = step_rng(cfg.seed, step)
    idx = rng.integers(0, len(samples), size=cfg.batch_size)
    chosen = [samples[i] for i in idx]
    if augment is not None:
        chosen = [augment(s, rng) for s in chosen]
    sel = range(len(chosen))
    if cfg.stage in ("caption_only", "joint"):
        return [make_caption_batch(chosen, sel)]
    if cfg.stage == "referring":
        return [make_referring_batch(chosen, sel, rng)]
    if cfg.stage == "mixed":
        return [make_caption_batch(chosen, sel), make_referring_batch(chosen, sel, rng)]
    if cfg.stage == "dense":
        if grid is None or object_caption is None:
            raise ValueError("dense stage needs the encoder grid and a caption builder")
        batch = make_condcap_batch(chosen, sel, rng, object_caption)
        return [attach_detection_targets(batch, chosen, sel, grid)]
    raise ValueError(f"unknown stage {cfg.stage!r}")


def batch_loss(model, batch: Batch, cfg: TrainConfig):
    """Forward pass for one batch -> (breakdown, optimized tensor, extras)."""
    dtype = model.lm.head.weight.dtype
    feats = model.image_features(batch.images.to(dtype))
    prefix = model.prefix_from_boxes(feats, batch.prompt_boxes.to(dtype))
    logits, hidden = model.lm.forward_features(prefix, batch.text_ids, batch.inputs)
    trace_pred = None if cfg.stage == "caption_only" else model.lochead(hidden)
    breakdown, total_t = compute_loss(
        logits, trace_pred, batch.labels,
        batch.trace_targets.to(dtype), batch.trace_mask, cfg,
    )
    extras = {}
    if batch.det_score is not None:
        if model.proposal is None:
            raise ValueError("batch carries detection targets but the model has no proposal head")
        maps = model.proposal(feats)
        bce, l1 = detection_loss(maps, batch.det_score.to(dtype),
                                 batch.det_offsets.to(dtype), batch.det_sizes.to(dtype),
                                 batch.det_mask)
        total_t = total_t + bce + l1
        extras["det_bce"] = float(bce.detach())
        extras["det_l1"] = float(l1.detach())
    return breakdown, total_t, extras


def train_step(model, optimizer, batches: list[Batch], cfg: TrainConfig, step: int = 0):
    """One optimizer update over one or more batches (losses are summed)."""
    ce = l1 = 0.0
    n = 0
    total_t = None
    extras: dict[str, float] = {}
    for batch in batches:
        bd, t, ex = batch_loss(model, batch, cfg)
        ce += bd.caption_ce
        l1 += bd.localization_l1
        n += bd.n
        total_t = t if total_t is None else total_t + t
        for k, v in ex.items():
            extras[k] = extras.get(k, 0.0) + v
    breakdown = LossBreakdown.from_parts(ce, l1, cfg.lambda_loc, n)
    if not torch.isfinite(total_t):
        raise NumericError(
            f"non-finite loss at step {step}: total={breakdown.total}"
            f" ce={breakdown.caption_ce} l1={breakdown.localization_l1}"
        )
    optimizer.zero_grad(set_to_none=True)
    total_t.backward()
    optimizer.step()
    return breakdown, extras


_NO_DECAY_MARKERS = ("emb", "pos", "queries", "corner", "bias", "norm", "ln_")


def make_optimizer(model, cfg: TrainConfig):
    """Adam over trainable params; weight decay only touches matrix weights."""
    decay, plain = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim < 2 or any(m in name for m in _NO_DECAY_MARKERS):
            plain.append(param)
        else:
            decay.append(param)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ]
    return torch.optim.Adam(groups, lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def train_loop(model, optimizer, samples, cfg: TrainConfig, start_step: int = 0,
               on_step=None, object_caption=None, augment=None):
    """Runs steps [start_step, cfg.steps); batches depend only on (seed, step)."""
    grid = model.grid
    last = None
    for step in range(start_step, cfg.steps):
        lr = cfg.lr_at(step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batches = assemble_batches(samples, cfg, step, grid=grid,
                                   object_caption=object_caption, augment=augment)
        last, extras = train_step(model, optimizer, batches, cfg, step=step)
        if on_step is not None:
            on_step(step, last, extras)
    return last


# ---------------------------------------------------------------------------
# checkpoint format: "PXAL", version, step, named float arrays, config echo
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PXAL"
CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointFormatError(ValueError):
    """Raised for bad magic, version, or a truncated/corrupt checkpoint file."""


@dataclass
class CheckpointData:
    step: int
    arrays: dict[str, np.ndarray]
    config: dict[str, str] = field(default_factory=dict)


def _trainable_named_params(model):
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def checkpoint_arrays(model, optimizer) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[name] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        for name, param in _trainable_named_params(model):
            state = optimizer.state.get(param)
            if not state:
                continue
            arrays[f"opt.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            arrays[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
            arrays[f"opt.{name}.step"] = np.asarray(float(state["step"]), dtype=np.float32)
    return arrays


def save_checkpoint(path, model, optimizer, step: int, config) -> None:
    """Writes model weights, optimizer moments and a config echo to `path`."""
    arrays = checkpoint_arrays(model, optimizer)
    flat = config.to_flat() if hasattr(config, "to_flat") else dict(config)
    echo = "".join(f"{k} = {v}\n" for k, v in sorted(flat.items())).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQI", CKPT_VERSION, step, len(arrays)))
    for name, arr in arrays.items():
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for entry {name}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CKPT_MAGIC:
            raise CheckpointFormatError("bad checkpoint magic")
        version, step, count = struct.unpack("<IQI", _read_exact(f, 16))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(f, 2))
            if tag not in _TAG_DTYPES:
                raise CheckpointFormatError(f"unknown dtype tag {tag} for entry {name}")
            shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank))
            dtype = _TAG_DTYPES[tag]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            data = _read_exact(f, n_bytes)
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
        (echo_len,) = struct.unpack("<I", _read_exact(f, 4))
        echo = _read_exact(f, echo_len).decode("utf-8")
        trailing = f.read(1)
        if trailing:
            raise CheckpointFormatError("unexpected bytes after checkpoint payload")
    config: dict[str, str] = {}
    for line in echo.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"malformed config echo line: {line!r}")
        key, _, value = line.partition("=")
        config[key.strip()] = value.strip()
    return CheckpointData(step=step, arrays=arrays, config=config)


def restore_model(model, data: CheckpointData) -> None:
    state = {}
    for name, tensor in model.state_dict().items():
        if name not in data.arrays:
            raise CheckpointFormatError(f"checkpoint is missing model entry {name!r}")
        arr = data.arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointFormatError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape} vs model {tuple(tensor.shape)}"
            )
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state, strict=True)


def restore_optimizer(optimizer, model, data: CheckpointData) -> None:
    """Injects saved Adam moments; params without saved state start fresh."""
    for name, param in _trainable_named_params(model):
        key = f"opt.{name}.exp_avg"
        if key not in data.arrays:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(data.arrays[f"opt.{name}.step"])),
            "exp_avg": torch.from_numpy(data.arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(data.arrays[f"opt.{name}.exp_avg_sq"].copy()),
        }


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(model, batches: list[Batch], cfg: TrainConfig, group: str,
               n_coords: int = 64, h: float = 1e-5, seed: int = 0) -> dict:
    """Compares autograd against central differences on sampled coordinates.

    The model is switched to float64 in place. Only trainable parameters are
    perturbed; a fully frozen group reports zero analytic gradients and skips
    the numeric probe. Returns a summary dict with max_rel_err.
    """
    groups = model.param_groups()
    if group not in groups:
        raise ValueError(f"unknown parameter group {group!r}")
    model.double()
    for batch in batches:
        batch.images = batch.images.double()
        batch.prompt_boxes = batch.prompt_boxes.double()
        batch.trace_targets = batch.trace_targets.double()
        if batch.det_score is not None:
            batch.det_score = batch.det_score.double()
            batch.det_offsets = batch.det_offsets.double()
            batch.det_sizes = batch.det_sizes.double()

    def loss_value() -> torch.Tensor:
        total = None
        for b in batches:
            _, t, _ = batch_loss(model, b, cfg)
            total = t if total is None else total + t
        return total

    named = groups[group]
    trainable = [(n, p) for n, p in named if p.requires_grad]
    frozen = [(n, p) for n, p in named if not p.requires_grad]
    report = {
        "group": group,
        "n_trainable_params": sum(p.numel() for _, p in trainable),
        "n_frozen_params": sum(p.numel() for _, p in frozen),
        "n_checked": 0,
        "max_rel_err": 0.0,
        "analytic_zero_for_frozen": True,
    }
    if not trainable:
        return report

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for _, p in trainable]
    sizes = np.array([p.numel() for _, p in trainable])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total_coords = int(offsets[-1])
    rng = np.random.default_rng(seed)
    picks = rng.choice(total_coords, size=min(n_coords, total_coords), replace=False)

    max_rel = 0.0
    with torch.no_grad():
        for flat_idx in sorted(int(i) for i in picks):
            pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = flat_idx - int(offsets[pi])
            param = trainable[pi][1]
            view = param.data.view(-1)
            orig = view[local].item()
            view[local] = orig + h
            plus = float(loss_value())
            view[local] = orig - h
            minus = float(loss_value())
            view[local] = orig
            fd = (plus - minus) / (2.0 * h)
            ga = float(grads[pi].view(-1)[local])
            rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
            max_rel = max(max_rel, rel)
    report["n_checked"] = len(picks)
    report["max_rel_err"] = max_rel
    return report
