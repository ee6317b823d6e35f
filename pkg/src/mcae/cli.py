"""Command-line entry point: ``mcae {pretrain,finetune,eval,reconstruct,gradcheck}``.

Runs are configured by a plain ``key=value`` file; see ``mcae --help`` for
every key and its default. Exit codes: 0 ok, 1 usage/config, 2 data or
checkpoint problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError
from .data import (AUGMENT_POLICIES, DataError, Dataset, ViewpointSpec, load_mnist, make_viewpoint_dataset,
                   split_train_val, stratified_subset)
from .masking import BatchMask, PatchGrid, sample_mask, unpatchify
from .numerics import NonFiniteError, ShapeError
from .pipeline import MCAEModel, ModelConfig, image_rng, pretrain_forward
from .training import (RECON_TARGETS, TrainConfig, evaluate, init_from_checkpoint, load_model,
                       run_finetune, run_pretrain, save_model)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.mcae"
METRICS_NAME = "metrics.csv"
DATASETS = ("mnist", "fashion_mnist", "viewpoint")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_dir: str = "/root/data/mnist"
    backbone: str = "convmixer"
    patch_size: int = 7
    num_caps: int = 16
    caps_dim: int = 16
    encoder_layers: int = 3
    mask_ratio: float = 0.5
    reconstruction_target: str = "masked_only"
    epochs: int = 0
    lr_init: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    out_dir: str = "runs/mcae"
    mask_token_sigma: float = 0.02
    mask_token_activation: float = 0.0
    augment_policy: str = "none"
    val_fraction: float = 0.1
    train_size: int = 0
    test_size: int = 0
    backbone_depth: int = 4
    init_std: float = 0.0
    projection_gain: float = 4.0
    ce_mode: str = "average"
    max_grad_norm: float = 0.0
    viewpoint_per_cell: int = 40


KEY_NOTES = {
    "epochs": "0 = 50 for pretrain, 350 for finetune",
    "train_size": "0 = whole training file; else a class-balanced subset",
    "test_size": "0 = whole test file",
    "init_std": "0 = 1/sqrt(caps_dim)",
    "dataset": "|".join(DATASETS),
    "backbone": "convmixer|vit",
    "reconstruction_target": "|".join(RECON_TARGETS),
    "augment_policy": "|".join(AUGMENT_POLICIES),
    "ce_mode": "average|softmax",
    "max_grad_norm": "0 = no clipping",
}


def config_help() -> str:
    lines = ["config keys (key=value, one per line; '#' starts a comment):"]
    for f in fields(RunConfig):
        note = KEY_NOTES.get(f.name)
        lines.append(f"  {f.name}={f.default}" + (f"    ({note})" if note else ""))
    lines.append("environment: MCAE_DATA_DIR overrides data_dir")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    vals = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise UsageError(f"{source}:{n}: unknown config key {key!r}")
        kind = kinds[key] if isinstance(kinds[key], str) else kinds[key].__name__
        try:
            vals[key] = {"int": int, "float": float, "str": str}[kind](value)
        except ValueError:
            raise UsageError(f"{source}:{n}: {key} needs a {kind}, got {value!r}") from None
    cfg = RunConfig(**vals)
    if cfg.dataset not in DATASETS:
        raise UsageError(f"{source}: dataset must be one of {DATASETS}")
    if os.environ.get("MCAE_DATA_DIR"):
        cfg.data_dir = os.environ["MCAE_DATA_DIR"]
    return cfg


def read_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def model_config(cfg: RunConfig) -> ModelConfig:
    classes = len(ViewpointSpec().classes) if cfg.dataset == "viewpoint" else 10
    try:
        return ModelConfig(backbone=cfg.backbone, patch_size=cfg.patch_size, num_caps=cfg.num_caps,
                           caps_dim=cfg.caps_dim, encoder_layers=cfg.encoder_layers,
                           backbone_depth=cfg.backbone_depth, num_classes=classes, init_std=cfg.init_std,
                           projection_gain=cfg.projection_gain)
    except ValueError as e:
        raise UsageError(str(e)) from None


def train_config(cfg: RunConfig, phase: str) -> TrainConfig:
    try:
        return TrainConfig(phase=phase, epochs=cfg.epochs, lr_init=cfg.lr_init, momentum=cfg.momentum,
                           mask_ratio=cfg.mask_ratio, reconstruction_target=cfg.reconstruction_target,
                           batch_size=cfg.batch_size, seed=cfg.seed, val_fraction=cfg.val_fraction,
                           augment_policy=cfg.augment_policy, mask_token_sigma=cfg.mask_token_sigma,
                           mask_token_activation=cfg.mask_token_activation, ce_mode=cfg.ce_mode,
                           max_grad_norm=cfg.max_grad_norm)
    except ValueError as e:
        raise UsageError(str(e)) from None


def load_splits(cfg: RunConfig) -> dict[str, Dataset]:
    """train/val from the training file, test from the test file (viewpoint: familiar + novel)."""
    if cfg.dataset == "viewpoint":
        train, familiar, novel = make_viewpoint_dataset(ViewpointSpec(), cfg.viewpoint_per_cell, cfg.seed)
        tr, va = split_train_val(train, cfg.val_fraction, cfg.seed)
        return {"train": tr, "val": va, "test": familiar, "test_novel": novel}
    full = load_mnist(cfg.data_dir, "train")
    if cfg.train_size:
        full = stratified_subset(full, cfg.train_size, cfg.seed)
    tr, va = split_train_val(full, cfg.val_fraction, cfg.seed)
    test = load_mnist(cfg.data_dir, "test")
    if cfg.test_size:
        test = test.subset(np.arange(min(cfg.test_size, len(test))))
    return {"train": tr, "val": va, "test": test}


def _write_outputs(out_dir: Path, model: MCAEModel, tc: TrainConfig, csv_text: str) -> None:
    # write under temporary names, then rename, so an interrupted run never leaves a half-written file
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_tmp, csv_tmp = out_dir / f".{CHECKPOINT_NAME}.part", out_dir / f".{METRICS_NAME}.part"
    try:
        save_model(ckpt_tmp, model, tc)
        csv_tmp.write_text(csv_text, encoding="utf-8")
        os.replace(ckpt_tmp, out_dir / CHECKPOINT_NAME)
        os.replace(csv_tmp, out_dir / METRICS_NAME)
    finally:
        for p in (ckpt_tmp, csv_tmp):
            p.unlink(missing_ok=True)


def cmd_pretrain(args) -> int:
    cfg = read_config(args.config)
    out = Path(args.out or cfg.out_dir)
    mc, tc = model_config(cfg), train_config(cfg, "pretrain")
    splits = load_splits(cfg)
    model = MCAEModel.build(mc, "pretrain", cfg.seed)
    r = run_pretrain(model, tc, splits["train"], splits["val"], log=_log, verbose=args.verbose)
    _write_outputs(out, r.model, tc, r.csv_text())
    print(f"best epoch {r.best_epoch}: val_loss={r.history[r.best_epoch - 1].val_loss:.6f} "
          f"(initial {r.initial_val_loss:.6f}); wrote {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = read_config(args.config)
    out = Path(args.out or cfg.out_dir)
    mc, tc = model_config(cfg), train_config(cfg, "finetune")
    model = MCAEModel.build(mc, "finetune", cfg.seed)
    if args.init != "none":
        init_from_checkpoint(model, args.init)
    splits = load_splits(cfg)
    r = run_finetune(model, tc, splits["train"], splits["val"], log=_log)
    _write_outputs(out, r.model, tc, r.csv_text())
    best = r.history[r.best_epoch - 1]
    print(f"best epoch {r.best_epoch}: val_loss={best.val_loss:.6f} val_top1={best.val_top1:.4f}; "
          f"wrote {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = read_config(args.config)
    model = load_model(args.checkpoint, "finetune")
    splits = load_splits(cfg)
    result = {"split": "test", **evaluate(model, splits["test"], ce_mode=cfg.ce_mode)}
    if "test_novel" in splits:
        novel = evaluate(model, splits["test_novel"], ce_mode=cfg.ce_mode)
        result.update(novel_top1=novel["top1"], novel_loss=novel["loss"], gap=result["top1"] - novel["top1"])
    print(f"test top-1 {result['top1']:.4f}  loss {result['loss']:.6f}")
    if "novel_top1" in result:
        print(f"novel-angle top-1 {result['novel_top1']:.4f}  familiar-novel gap {result['gap']:.4f}")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def write_pgm(path, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255) from a [H, W] array in [0, 1]."""
    q = quantize(image)
    h, w = q.shape
    Path(path).write_bytes(f"P5 {w} {h} 255\n".encode("ascii") + q.tobytes())


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def reconstruction_triplet(model: MCAEModel, image: np.ndarray, plan, rng) -> tuple[np.ndarray, ...]:
    """(masked input, reconstruction, original), each [C, H, W]."""
    bm = BatchMask.coerce(plan, 1)
    pred, target = pretrain_forward(model, image[None], bm, rng=rng)
    P, C = model.config.patch_size, model.config.channels
    masked = target.patches[0].copy()
    masked[bm.masked[0]] = 0.0
    recon = target.patches[0].copy()
    recon[bm.masked[0]] = pred.data[0, bm.masked[0]]
    grid = model.config.grid
    return (unpatchify(PatchGrid(masked, grid, P, C)), unpatchify(PatchGrid(recon, grid, P, C)), image)


def cmd_reconstruct(args) -> int:
    cfg = read_config(args.config)
    model = load_model(args.checkpoint)
    if model.phase != "pretrain":
        raise CheckpointError(f"{args.checkpoint} is a finetune checkpoint; reconstruction needs the decoder")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    test = load_splits(cfg)["test"]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    L = model.config.L
    written = 0
    for i in range(min(args.n, len(test))):
        plan = sample_mask(L, cfg.mask_ratio, image_rng(cfg.seed, 0, i))
        parts = reconstruction_triplet(model, test.images[i], plan, np.random.default_rng([cfg.seed, i]))
        for tag, img in zip(("masked", "recon", "original"), parts):
            for c in range(img.shape[0]):
                suffix = "" if img.shape[0] == 1 else f"_c{c}"
                write_pgm(out / f"sample{i:03d}_{tag}{suffix}.pgm", img[c])
                written += 1
    print(f"wrote {written} files to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .diagnostics import run_gradcheck
    cfg = read_config(args.config)
    suite = run_gradcheck(seed=cfg.seed)
    print(suite.report())
    return EXIT_OK if suite.passed else EXIT_NUMERIC


def _log(msg: str) -> None:
    print(msg, flush=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcae", description="Masked capsule autoencoder: pretrain, finetune, evaluate.",
                epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, epilog=config_help(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("pretrain", cmd_pretrain, "masked patch reconstruction training")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="output directory (default: out_dir from the config)")
    sp.add_argument("--verbose", action="store_true", help="log the mask count of every batch")

    sp = add("finetune", cmd_finetune, "classification training")
    sp.add_argument("--config", required=True)
    sp.add_argument("--init", required=True, help="pretrain checkpoint, or 'none' to train from scratch")
    sp.add_argument("--out")

    sp = add("eval", cmd_eval, "test-set accuracy of a finetuned checkpoint")
    sp.add_argument("--config", required=True)
    sp.add_argument("--checkpoint", required=True)

    sp = add("reconstruct", cmd_reconstruct, "write masked/reconstructed/original PGM triplets")
    sp.add_argument("--config", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--out-dir", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference audit of every layer")
    sp.add_argument("--config")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing command; see mcae --help")
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
