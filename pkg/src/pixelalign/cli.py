"""Command-line interface.

Subcommands: gen-data, train, eval, infer, render, grad-check. Machine output
goes to stdout as line-delimited JSON; human logs go to stderr. Exit codes:
0 success, 1 usage, 2 IO/format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import torch

from . import metrics, tasks, trainer
from .blocks import NumericError
from .model import PARAM_GROUPS, PixelAlignConfig, build_model, coerce_value
from .overlay import render_overlay
from .synthworld import (
    DatasetFormatError,
    WorldConfig,
    build_default_vocab,
    generate_dataset,
    make_augmenter,
    object_caption_from_query,
    read_dataset,
    read_ppm,
    write_dataset,
    write_ppm,
)
from .textcodec import Vocabulary, load_vocab
from .trainer import (
    CheckpointFormatError,
    TrainConfig,
    load_checkpoint,
    make_optimizer,
    restore_model,
    restore_optimizer,
    save_checkpoint,
    train_loop,
)

log = logging.getLogger("pixelalign")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

GRAD_TOLERANCE = 1e-4

_MODEL_KEYS = {f.name for f in dataclasses.fields(PixelAlignConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


class ConfigFileError(Exception):
    """Malformed or unknown content in a config file (an IO/format failure)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env_seed() -> int:
    raw = os.environ.get("PIXELALIGN_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"PIXELALIGN_SEED must be an integer, got {raw!r}")


def read_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigFileError(f"cannot read config {path}: {e}")
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigFileError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigFileError(f"{path}:{lineno}: empty key or value")
        if key in values:
            raise ConfigFileError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    unknown = set(values) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise ConfigFileError(f"{path}: unknown config keys: {sorted(unknown)}")
    return values


def resolve_configs(file_values: dict[str, str], overrides: dict,
                    vocab: Vocabulary | None) -> tuple[PixelAlignConfig, TrainConfig]:
    """defaults < config file < flag overrides, split by schema.

    The built-in seed default is PIXELALIGN_SEED (or 0); a `seed` key in the
    file, or a --seed flag, takes precedence over it in that order.
    """
    model_raw = {k: v for k, v in file_values.items() if k in _MODEL_KEYS}
    train_raw = {k: v for k, v in file_values.items() if k in _TRAIN_KEYS}
    model_vals = {k: coerce_value(k, v, PixelAlignConfig) for k, v in model_raw.items()}
    train_vals = {k: coerce_value(k, v, TrainConfig) for k, v in train_raw.items()}
    if vocab is not None and "vocab_size" not in model_vals:
        model_vals["vocab_size"] = len(vocab)
    train_vals.setdefault("seed", _env_seed())
    for key, value in overrides.items():
        if value is None:
            continue
        if key in _MODEL_KEYS:
            model_vals[key] = value
        elif key in _TRAIN_KEYS:
            train_vals[key] = value
        else:
            raise UsageError(f"unknown override {key!r}")
    try:
        return PixelAlignConfig.from_dict(model_vals), TrainConfig(**train_vals)
    except ValueError as e:
        raise UsageError(str(e))


def _print_json(payload, out_path=None) -> None:
    text = json.dumps(payload, sort_keys=True)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
        sys.stdout.flush()


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise OSError(f"output directory {out!r} is not empty (use --force to overwrite)")
    seed = args.seed if args.seed is not None else _env_seed()
    vocab = build_default_vocab()
    world = WorldConfig(size=args.size, min_objects=args.min_objects,
                        max_objects=args.max_objects)
    log.info("generating %d samples (size=%d, mode=%s, seed=%d)",
             args.n, args.size, args.mode, seed)
    samples = generate_dataset(args.n, seed, world, vocab, args.mode,
                               index_offset=args.offset)
    write_dataset(samples, out)
    vocab.save(os.path.join(out, "vocab.txt"))
    _print_json({"command": "gen-data", "count": len(samples), "out": out,
                 "mode": args.mode, "seed": seed})
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_model_from_checkpoint(path, allow_new_proposal: bool = False,
                                force_proposal: bool = False):
    data = load_checkpoint(path)
    flat = dict(data.config)
    if force_proposal:
        flat["with_proposal"] = "true"
    cfg = PixelAlignConfig.from_flat(flat)
    model = build_model(cfg, seed=0)
    try:
        restore_model(model, data)
    except CheckpointFormatError:
        if not allow_new_proposal:
            raise
        # fine-tuning onto a model with a freshly added proposal head: restore
        # everything except the head, which keeps its init
        state = {}
        for name, tensor in model.state_dict().items():
            if name.startswith("proposal."):
                state[name] = tensor
            elif name in data.arrays:
                state[name] = torch.from_numpy(data.arrays[name].copy())
            else:
                raise CheckpointFormatError(f"checkpoint is missing model entry {name!r}")
        model.load_state_dict(state, strict=True)
    return model, data


def cmd_train(args) -> int:
    samples = read_dataset(args.data)
    if not samples:
        raise DatasetFormatError(f"{args.data}: dataset is empty")
    vocab = load_vocab(os.path.join(args.data, "vocab.txt"))
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {
        "stage": args.stage,
        "steps": args.steps,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "checkpoint_every": args.checkpoint_every,
    }
    model_cfg, train_cfg = resolve_configs(file_values, overrides, vocab)

    start_step = 0
    optimizer = None
    if args.resume:
        model, ckpt = _load_model_from_checkpoint(args.resume)
        if train_cfg.stage == "dense" and model.proposal is None:
            raise UsageError("resumed checkpoint has no proposal head; cannot train dense stage")
        optimizer = make_optimizer(model, train_cfg)
        restore_optimizer(optimizer, model, ckpt)
        start_step = ckpt.step
        model_cfg = model.cfg
        log.info("resuming from %s at step %d", args.resume, start_step)
    elif args.init_from:
        need_head = train_cfg.stage == "dense"
        model, _ = _load_model_from_checkpoint(args.init_from, allow_new_proposal=need_head,
                                               force_proposal=need_head)
        model_cfg = model.cfg
        log.info("initialized weights from %s", args.init_from)
    else:
        if train_cfg.stage == "dense" and not model_cfg.with_proposal:
            log.info("dense stage: enabling the proposal head")
            model_cfg = dataclasses.replace(model_cfg, with_proposal=True)
        model = build_model(model_cfg, seed=train_cfg.seed)
    if optimizer is None:
        optimizer = make_optimizer(model, train_cfg)
    if train_cfg.stage == "dense" and model.proposal is None:
        raise UsageError("dense stage requires a model with with_proposal = true")

    os.makedirs(args.out, exist_ok=True)

    def object_caption(query):
        return object_caption_from_query(query, vocab)

    def on_step(step, breakdown, extras):
        record = {"step": step, "total": breakdown.total, "caption_ce": breakdown.caption_ce,
                  "localization_l1": breakdown.localization_l1, "n": breakdown.n}
        record.update(extras)
        print(json.dumps(record))
        if train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            path = os.path.join(args.out, f"ckpt_{step + 1:06d}.pxal")
            save_checkpoint(path, model, optimizer, step + 1, model_cfg)
            log.info("wrote %s", path)

    augment = None if args.no_augment else make_augmenter(vocab)
    train_loop(model, optimizer, samples, train_cfg, start_step=start_step,
               on_step=on_step, object_caption=object_caption, augment=augment)
    final = os.path.join(args.out, "ckpt_final.pxal")
    save_checkpoint(final, model, optimizer, train_cfg.steps, model_cfg)
    _print_json({"command": "train", "final_step": train_cfg.steps, "checkpoint": final,
                 "stage": train_cfg.stage, "augment": augment is not None})
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def eval_trace(model, samples, vocab=None) -> dict[str, float]:
    exacts, f1s, scores = [], [], []
    for s in samples:
        res = tasks.caption_with_trace(model, s.image)
        exact, f1 = metrics.caption_match(res.tokens, s.caption)
        exacts.append(exact)
        f1s.append(f1)
        if exact == 1:
            n = len(s.caption)
            scores.append(metrics.trace_score(res.trace[:n], s.trace, s.trace_mask, k=0))
    out = {"caption_exact": float(np.mean(exacts)), "token_f1": float(np.mean(f1s))}
    if scores:
        out["trace_score"] = float(np.mean(scores))
    return out


def eval_refer(model, samples, vocab=None) -> dict[str, float]:
    preds, gts = [], []
    for s in samples:
        for query, j in s.referring:
            preds.append(tasks.refer(model, s.image, query))
            gts.append(tuple(s.boxes[j]))
    ious = [metrics.iou(p, g) for p, g in zip(preds, gts)]
    return {
        "p_at_0.5": metrics.precision_at(preds, gts, tau=0.5),
        "mean_iou": float(np.mean(ious)) if ious else 0.0,
        "n_queries": float(len(preds)),
    }


def eval_condcap(model, samples, vocab) -> dict[str, float]:
    exacts, f1s = [], []
    for s in samples:
        for query, j in s.referring:
            target = object_caption_from_query(query, vocab)
            res = tasks.caption_box(model, s.image, tuple(s.boxes[j]))
            exact, f1 = metrics.caption_match(res.tokens, target)
            exacts.append(exact)
            f1s.append(f1)
    return {"caption_exact": float(np.mean(exacts)), "token_f1": float(np.mean(f1s))}


def eval_densecap(model, samples, vocab) -> dict[str, float]:
    maps, recalls = [], []
    for s in samples:
        found = tasks.dense_caption(model, s.image)
        preds = [(d.box, d.tokens) for d in found]
        query_by_obj = {j: q for q, j in s.referring}
        gts = [
            (tuple(s.boxes[j]), object_caption_from_query(query_by_obj[j], vocab))
            for j in range(len(s.boxes))
        ]
        maps.append(metrics.dense_map(preds, gts))
        hit = sum(
            1 for gbox, _ in gts if any(metrics.iou(d.box, gbox) >= 0.5 for d in found)
        )
        recalls.append(hit / len(gts))
    return {"map": float(np.mean(maps)), "recall_at_0.5": float(np.mean(recalls))}


_EVAL_TASKS = {
    "trace": eval_trace,
    "refer": eval_refer,
    "condcap": eval_condcap,
    "densecap": eval_densecap,
}


def cmd_eval(args) -> int:
    model, ckpt = _load_model_from_checkpoint(args.ckpt)
    model.eval()
    if args.task == "densecap" and model.proposal is None:
        raise UsageError("densecap evaluation needs a checkpoint trained with a proposal head")
    samples = read_dataset(args.data)
    if not samples:
        raise DatasetFormatError(f"{args.data}: dataset is empty")
    vocab = load_vocab(os.path.join(args.data, "vocab.txt"))
    result = _EVAL_TASKS[args.task](model, samples, vocab)
    report = metrics.EvalReport(
        metrics=result,
        sample_count=len(samples),
        config={"task": args.task, "ckpt": args.ckpt, "data": args.data,
                "step": int(ckpt.step)},
    )
    print(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer / render
# ---------------------------------------------------------------------------


def _parse_box_flag(raw: str):
    parts = raw.split(",")
    if len(parts) != 4:
        raise UsageError("--box expects x1,y1,x2,y2")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"--box has non-numeric coordinates: {raw!r}")


def _trace_rows(trace) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(trace).reshape(-1, 4)]


def cmd_infer(args) -> int:
    image = read_ppm(args.image)
    model, _ = _load_model_from_checkpoint(args.ckpt)
    model.eval()
    vocab = load_vocab(args.vocab) if args.vocab else None

    def words(tokens):
        return vocab.decode(tokens) if vocab is not None else None

    if args.task == "trace":
        res = tasks.caption_with_trace(model, image)
        payload = {"task": "trace", "tokens": res.tokens, "trace": _trace_rows(res.trace),
                   "boxes": [], "ended_with_eos": res.ended_with_eos}
        if vocab:
            payload["text"] = words(res.tokens)
    elif args.task == "refer":
        if not args.query:
            raise UsageError("refer task needs --query")
        if vocab is None:
            raise UsageError("refer task needs --vocab to encode the query")
        query_ids = vocab.encode(args.query)
        box = tasks.refer(model, image, query_ids)
        payload = {"task": "refer", "tokens": query_ids, "trace": [],
                   "boxes": [list(box)]}
    elif args.task == "condcap":
        if not args.box:
            raise UsageError("condcap task needs --box")
        box = _parse_box_flag(args.box)
        res = tasks.caption_box(model, image, box)
        payload = {"task": "condcap", "tokens": res.tokens, "trace": _trace_rows(res.trace),
                   "boxes": [list(box)], "ended_with_eos": res.ended_with_eos}
        if vocab:
            payload["text"] = words(res.tokens)
    else:  # densecap
        if model.proposal is None:
            raise UsageError("densecap inference needs a checkpoint with a proposal head")
        found = tasks.dense_caption(model, image)
        items = []
        trace_all: list[list[float]] = []
        for d in found:
            item = {"box": list(d.box), "score": d.score, "tokens": d.tokens,
                    "trace": _trace_rows(d.trace)}
            if vocab:
                item["text"] = words(d.tokens)
            items.append(item)
            trace_all.extend(_trace_rows(d.trace))
        payload = {"task": "densecap", "items": items,
                   "boxes": [list(d.box) for d in found], "trace": trace_all}
    _print_json(payload, args.out)
    return EXIT_OK


def cmd_render(args) -> int:
    with open(args.pred) as f:
        pred = json.load(f)
    image = read_ppm(args.image)
    u8 = np.round(image * 255.0).astype(np.uint8)
    out = render_overlay(u8, pred.get("trace", []), pred.get("boxes", []))
    write_ppm(args.out, out.astype(np.float64) / 255.0)
    log.info("wrote %s", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------


def cmd_grad_check(args) -> int:
    if args.seed is None:
        args.seed = _env_seed()
    groups = [g.strip() for g in args.groups.split(",") if g.strip()]
    for g in groups:
        if g not in PARAM_GROUPS:
            raise UsageError(f"unknown parameter group {g!r} (known: {', '.join(PARAM_GROUPS)})")
    vocab = build_default_vocab()
    file_values = read_config_file(args.config) if args.config else {}
    model_cfg, _ = resolve_configs(file_values, {}, vocab)
    model = build_model(model_cfg, seed=args.seed)
    world = WorldConfig(size=model_cfg.image_size)
    samples = generate_dataset(4, args.seed, world, vocab, "dense")
    tcfg = TrainConfig(stage="joint", steps=0, batch_size=2, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    batches = [
        trainer.make_caption_batch(samples, [0, 1]),
        trainer.make_referring_batch(samples, [2, 3], rng),
    ]
    if model.proposal is not None:
        dense = trainer.make_condcap_batch(
            samples, [0, 3], rng, lambda q: object_caption_from_query(q, vocab)
        )
        batches.append(trainer.attach_detection_targets(dense, samples, [0, 3], model.grid))
    worst = 0.0
    for group in groups:
        report = trainer.grad_check(model, batches, tcfg, group,
                                    n_coords=args.coords, h=args.h, seed=args.seed)
        print(json.dumps(report, sort_keys=True))
        worst = max(worst, report["max_rel_err"])
    if worst >= GRAD_TOLERANCE:
        log.error("gradient check failed: max relative error %.3e >= %.0e",
                  worst, GRAD_TOLERANCE)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="pixelalign",
                     description="Pixel-aligned captioning on a synthetic shapes world")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--mode", choices=("dense", "sparse"), default="dense")
    p.add_argument("--min-objects", type=int, default=2)
    p.add_argument("--max-objects", type=int, default=2)
    p.add_argument("--offset", type=int, default=0,
                   help="scene index offset (disjoint train/eval splits)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train or fine-tune a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", default=None)
    p.add_argument("--stage", choices=trainer.STAGES, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", default=None, help="continue an interrupted run")
    p.add_argument("--init-from", default=None, help="start from checkpoint weights at step 0")
    p.add_argument("--no-augment", action="store_true",
                   help="disable flip/translate training augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=tuple(_EVAL_TASKS), required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one image through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--task", choices=("trace", "refer", "condcap", "densecap"),
                   default="trace")
    p.add_argument("--box", default=None)
    p.add_argument("--query", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", help="draw a prediction file onto its image")
    p.add_argument("--pred", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--config", default=None)
    p.add_argument("--groups", default=",".join(PARAM_GROUPS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        log.error("usage: %s", e)
        return EXIT_USAGE
    except (ConfigFileError, DatasetFormatError, CheckpointFormatError,
            json.JSONDecodeError, OSError) as e:
        log.error("%s", e)
        return EXIT_IO
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except ValueError as e:
        log.error("invalid arguments: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
