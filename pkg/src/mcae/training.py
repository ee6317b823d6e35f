"""Losses, optimizer, schedule, checkpoints and the two training loops."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .capsules import MaskTokenSpec
from .data import Dataset, augment, iterate_batches
from .masking import BatchMask, sample_mask
from .numerics import NonFiniteError, ShapeError, Tape, Tensor, backward, no_grad, ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import MCAEModel, ModelConfig, finetune_forward, image_rng, pretrain_forward

CE_EPS = 1e-7
RECON_TARGETS = ("masked_only", "all_patches")
CE_MODES = ("average", "softmax")
METRIC_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_top1")
VAL_STREAM = 0x56414C  # keeps validation masks fixed across epochs
ENCODER_PREFIXES = ("backbone.", "primary.", "encoder.")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 0  # 0 -> phase default (50 pretrain, 350 finetune)
    lr_init: float = 0.1
    momentum: float = 0.9
    mask_ratio: float = 0.5
    reconstruction_target: str = "masked_only"
    batch_size: int = 128
    seed: int = 0
    val_fraction: float = 0.1
    augment_policy: str = "none"
    mask_token_sigma: float = 0.02
    mask_token_activation: float = 0.0
    ce_mode: str = "average"
    max_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.epochs == 0:
            self.epochs = 50 if self.phase == "pretrain" else 350
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not self.lr_init > 0:
            raise ValueError("lr_init must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.reconstruction_target not in RECON_TARGETS:
            raise ValueError(f"reconstruction_target must be one of {RECON_TARGETS}")
        if self.ce_mode not in CE_MODES:
            raise ValueError(f"ce_mode must be one of {CE_MODES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_grad_norm < 0:
            raise ValueError("max_grad_norm must be >= 0")

    def mask_spec(self) -> MaskTokenSpec:
        return MaskTokenSpec(sigma=self.mask_token_sigma, activation_fill=self.mask_token_activation,
                             resample_each_forward=self.mask_token_sigma > 0, seed=self.seed)


# losses

def mse_loss(pred: Tensor, target, plan: Optional[BatchMask] = None, mode: str = "masked_only") -> Tensor:
    """Mean squared pixel error over masked patches (or every patch).

    ``pred``/``target`` are [B, L, Q] (or [L, Q] with a single plan).
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    if mode not in RECON_TARGETS:
        raise ValueError(f"unknown reconstruction target {mode!r}")
    single = pred.ndim == 2
    if single:
        pred = ops.reshape(pred, (1,) + pred.shape)
        target = target[None]
    diff = ops.sub(pred, Tensor(target, dtype=pred.dtype))
    if mode == "masked_only":
        bm = None if plan is None else BatchMask.coerce(plan, pred.shape[0])
        if bm is None or bm.n_masked == 0:
            raise ValueError("masked_only loss needs at least one masked patch")
        diff = ops.gather(diff, bm.masked, axis=1, batched=True)
    return ops.mean(ops.mul(diff, diff))


def ce_loss(y_hat: Tensor, labels, mode: str = "average", eps: float = CE_EPS) -> Tensor:
    """Cross-entropy on class scores.

    ``average``: scores are already probabilities (averaged class activations);
    the true-class score is clamped to [eps, 1] before the log. ``softmax``:
    scores are treated as logits.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, C = y_hat.shape
    if labels.shape != (B,):
        raise ShapeError("ce_loss", y_hat.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range for {C} classes")
    if mode == "softmax":
        y_hat = ops.softmax(y_hat, axis=-1)
    elif mode != "average":
        raise ValueError(f"unknown ce mode {mode!r}")
    true = ops.gather(ops.reshape(y_hat, (B * C,)), np.arange(B) * C + labels, axis=0)
    return ops.mul(ops.mean(ops.log(ops.clip(true, eps, 1.0))), -1.0)


# optimisation

def global_grad_norm(params: dict[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                         for p in params.values() if p.grad is not None))


class SGD:
    """Heavy-ball momentum: v <- mu v + g; p <- p - lr v.

    With ``max_grad_norm > 0`` the whole gradient is rescaled to at most that
    global L2 norm before it enters the velocity.
    """

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, max_grad_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in parameter {name}")
        scale = 1.0
        if self.max_grad_norm > 0:
            norm = global_grad_norm(self.params)
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= p.dtype.type(self.momentum)
            if p.grad is not None:
                v += p.grad if scale == 1.0 else p.dtype.type(scale) * p.grad
            p.data -= p.dtype.type(lr) * v


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float,
             momentum_state: dict[str, np.ndarray], momentum: float = 0.9) -> None:
    """Functional form of :class:`SGD` (state updated in place)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter {name}")
    for name, p in params.items():
        v = momentum_state.setdefault(name, np.zeros_like(p.data))
        v *= p.dtype.type(momentum)
        if name in grads:
            v += grads[name]
        p.data -= p.dtype.type(lr) * v


def cosine_lr(t: float, T: int, lr_init: float, eta_min: float = 0.0) -> float:
    if T <= 0:
        raise ValueError("cosine schedule needs T > 0")
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside [0, {T}]")
    return eta_min + (lr_init - eta_min) * (1.0 + math.cos(math.pi * t / T)) / 2.0


def best_epoch(val_losses) -> int:
    """Index of the lowest validation loss (earliest on ties)."""
    return int(np.argmin(np.asarray(val_losses, dtype=np.float64)))


# checkpoints

def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def checkpoint_text(model: MCAEModel, train: Optional[TrainConfig] = None) -> str:
    lines = f"phase={model.phase}\n" + model.config.to_text()
    if train is not None:
        lines += "".join(f"train.{k}={v}\n" for k, v in asdict(train).items())
    return lines


def save_model(path, model: MCAEModel, train: Optional[TrainConfig] = None) -> None:
    save_checkpoint(path, checkpoint_text(model, train),
                    {k: v.astype(np.float32, copy=False) for k, v in model.state().items()})


def load_model(path, phase: Optional[str] = None) -> MCAEModel:
    """Rebuild the model stored in a checkpoint; ``phase`` (if given) must match."""
    text, tensors = load_checkpoint(path)
    meta = parse_config_text(text)
    stored = meta.get("phase")
    if phase is not None and stored != phase:
        raise CheckpointError(f"{path} is a {stored} checkpoint, expected {phase}")
    model = MCAEModel.build(ModelConfig.from_text(text), stored or "pretrain")
    model.load_state(tensors, strict=True)
    model.eval()
    return model


def init_from_checkpoint(model: MCAEModel, path) -> list[str]:
    """Copy backbone, primary and encoder tensors from ``path``; decoder and heads are discarded."""
    _, tensors = load_checkpoint(path)
    wanted = {k: v for k, v in tensors.items() if k.startswith(ENCODER_PREFIXES)}
    own = set(model.named_parameters()) | set(model.named_buffers())
    needed = {k for k in own if k.startswith(ENCODER_PREFIXES)}
    missing = needed - set(wanted)
    if missing:
        raise CheckpointError(f"{path} lacks tensors {sorted(missing)}")
    extra = set(wanted) - needed
    if extra:
        raise CheckpointError(f"{path} has tensors the model does not: {sorted(extra)}")
    return model.load_state(wanted, strict=False)


# loops

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_top1: Optional[float] = None


@dataclass
class RunResult:
    model: MCAEModel
    history: list[EpochRecord]
    initial_val_loss: float
    best_epoch: int
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        return metrics_csv(self.history)


def metrics_csv(history: list[EpochRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in history:
        w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss),
                    "" if r.val_top1 is None else repr(r.val_top1)])
    return out.getvalue()


def _check_finite(loss: Tensor, where: str) -> float:
    v = float(loss.item())
    if not math.isfinite(v):
        raise NonFiniteError(f"non-finite loss during {where}")
    return v


def _augment_batch(images: np.ndarray, idx, cfg: TrainConfig, epoch: int) -> np.ndarray:
    if cfg.augment_policy == "none":
        return images
    return np.stack([augment(img, cfg.augment_policy, image_rng(cfg.seed, epoch, int(i), 1))
                     for img, i in zip(images, idx)])


def _plans(idx, L: int, cfg: TrainConfig, epoch: int) -> BatchMask:
    return BatchMask([sample_mask(L, cfg.mask_ratio, image_rng(cfg.seed, epoch, int(i), 0)) for i in idx])


def pretrain_loss(model: MCAEModel, images, idx, cfg: TrainConfig, epoch: int, batch_no: int) -> Tensor:
    bm = _plans(idx, model.config.L, cfg, epoch)
    rng = np.random.default_rng([cfg.seed, epoch, batch_no, 2])
    pred, target = pretrain_forward(model, images, bm, cfg.mask_spec(), rng)
    return mse_loss(pred, target.patches, bm, cfg.reconstruction_target)


def pretrain_val_loss(model: MCAEModel, ds: Dataset, cfg: TrainConfig, batch_size: int = 256) -> float:
    """Masked MSE with per-image masks and placeholder noise fixed across epochs."""
    model.eval()
    total, n = 0.0, 0
    with no_grad():
        for b, (idx, x, _) in enumerate(iterate_batches(ds, batch_size)):
            loss = pretrain_loss(model, x, idx, cfg, VAL_STREAM, b)
            total += _check_finite(loss, "validation") * len(idx)
            n += len(idx)
    return total / n


def top1_accuracy(scores, labels) -> float:
    scores = np.asarray(scores)
    return float((np.argmax(scores, axis=1) == np.asarray(labels)).mean())


def evaluate(model: MCAEModel, ds: Dataset, batch_size: int = 256, ce_mode: str = "average") -> dict:
    """Top-1 accuracy and mean cross-entropy; no masking, no augmentation."""
    if model.head is None:
        raise ValueError("evaluate needs a finetune-phase model")
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was = model.training
    model.eval()
    correct, total = 0, 0.0
    with no_grad():
        for _, x, y in iterate_batches(ds, batch_size):
            scores = finetune_forward(model, x)
            total += _check_finite(ce_loss(scores, y, ce_mode), "evaluation") * len(y)
            correct += int(round(top1_accuracy(scores.data, y) * len(y)))
    model.train(was)
    return {"top1": correct / len(ds), "loss": total / len(ds)}


def _train(model: MCAEModel, cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset,
           batch_loss: Callable, val_fn: Callable, log: Optional[Callable[[str], None]],
           on_batch: Optional[Callable] = None) -> RunResult:
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be non-empty")
    t0 = time.perf_counter()
    params = model.named_parameters()
    opt = SGD(params, cfg.momentum, cfg.max_grad_norm)
    init_val, _ = val_fn(model)
    if log:
        log(f"epoch 0 val_loss={init_val:.6f}")
    history: list[EpochRecord] = []
    best_state, best_loss = None, math.inf
    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr_init)
        model.train()
        shuffle = np.random.default_rng([cfg.seed, epoch, 0x5348])
        total, n = 0.0, 0
        for b, (idx, x, y) in enumerate(iterate_batches(train_ds, cfg.batch_size, shuffle)):
            x = _augment_batch(x, idx, cfg, epoch)
            model.zero_grad()
            with Tape() as tape:
                loss = batch_loss(model, x, y, idx, epoch, b)
            v = _check_finite(loss, f"epoch {epoch}")
            backward(tape, loss)
            opt.step(lr)
            total += v * len(idx)
            n += len(idx)
            if on_batch:
                on_batch(epoch, b, idx)
        val_loss, top1 = val_fn(model)
        rec = EpochRecord(epoch, lr, total / n, val_loss, top1)
        history.append(rec)
        if log:
            extra = "" if top1 is None else f" val_top1={top1:.4f}"
            log(f"epoch {epoch} lr={lr:.5f} train_loss={rec.train_loss:.6f} val_loss={val_loss:.6f}{extra}")
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.copy() for k, v in model.state().items()}
    model.load_state(best_state)
    model.eval()
    best = best_epoch([r.val_loss for r in history])
    return RunResult(model, history, init_val, best + 1, time.perf_counter() - t0)


def run_pretrain(model: MCAEModel, cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset,
                 log: Optional[Callable[[str], None]] = None, verbose: bool = False) -> RunResult:
    """Masked reconstruction training; the returned model holds the best-validation weights."""
    if cfg.phase != "pretrain" or model.phase != "pretrain":
        raise ValueError("run_pretrain needs a pretrain config and model")
    L = model.config.L

    def batch_loss(m, x, y, idx, epoch, b):
        return pretrain_loss(m, x, idx, cfg, epoch, b)

    def val_fn(m):
        return pretrain_val_loss(m, val_ds, cfg), None

    def report(epoch, b, idx):
        bm = _plans(idx, L, cfg, epoch)
        log(f"epoch {epoch} batch {b} masked={bm.n_masked}/{L}")

    return _train(model, cfg, train_ds, val_ds, batch_loss, val_fn, log, report if verbose and log else None)


def run_finetune(model: MCAEModel, cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset,
                 log: Optional[Callable[[str], None]] = None) -> RunResult:
    """Classification training of every parameter; best model chosen by validation loss."""
    if cfg.phase != "finetune" or model.phase != "finetune":
        raise ValueError("run_finetune needs a finetune config and model")

    def batch_loss(m, x, y, idx, epoch, b):
        return ce_loss(finetune_forward(m, x), y, cfg.ce_mode)

    def val_fn(m):
        r = evaluate(m, val_ds, ce_mode=cfg.ce_mode)
        return r["loss"], r["top1"]

    return _train(model, cfg, train_ds, val_ds, batch_loss, val_fn, log)
