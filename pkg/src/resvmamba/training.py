"""Training recipe: label-smoothed CE, AdamW, warmup + cosine schedule, EMA, top-k metrics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ loss
def label_smoothed_ce(logits: Tensor, targets, eps: float = 0.1) -> Tensor:
    """Mean over the batch of ``-sum_c q_c log softmax(logits)_c``, ``q = (1-eps) onehot + eps/K``."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {eps}")
    targets = np.asarray(targets, dtype=np.int64)
    n, K = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        bad = targets[(targets < 0) | (targets >= K)][0]
        raise ValueError(f"target {bad} outside [0, {K})")
    q = np.full((n, K), eps / K, dtype=logits.dtype)
    q[np.arange(n), targets] += 1.0 - eps
    return -(ad.log_softmax(logits) * Tensor(q)).sum() * (1.0 / n)


# ------------------------------------------------------------- optimizer
@dataclass
class OptimState:
    lr_max: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.05
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list, s: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not s.m:
        s.m = [np.zeros_like(p.data) for p in params]
        s.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = s.betas
    s.t += 1
    c1 = 1.0 - b1**s.t
    c2 = 1.0 - b2**s.t
    for p, g, m, v in zip(params, grads, s.m, s.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + s.eps)
        p.data = p.data - lr * step - (lr * s.weight_decay) * p.data


# --------------------------------------------------------------- schedule
@dataclass
class Schedule:
    steps_per_epoch: int
    warmup_epochs: int = 20
    total_epochs: int = 150
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_init: float = 1e-6

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup must be shorter than the whole run")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, sched: Schedule) -> float:
    """Linear warmup to ``lr_max``, then cosine decay to ``lr_min`` at the last step."""
    w, total = sched.warmup_steps, sched.total_steps
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if w and step <= w:
        return sched.warmup_init + (sched.lr_max - sched.warmup_init) * step / w
    progress = (step - w) / (total - w)
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * progress))


# -------------------------------------------------------------------- EMA
@dataclass
class EmaState:
    shadow: list
    decay: float = 0.9999

    @classmethod
    def of(cls, params: list[Tensor], decay: float = 0.9999) -> "EmaState":
        return cls([p.data.copy() for p in params], decay)


def ema_update(ema: EmaState, params: list[Tensor]) -> None:
    if len(ema.shadow) != len(params):
        raise ValueError("EMA shadow and parameter lists differ in length")
    d = ema.decay
    for sh, p in zip(ema.shadow, params):
        if sh.shape != p.shape:
            raise ValueError(f"EMA shadow {sh.shape} vs parameter {p.shape}")
        sh *= d
        sh += (1.0 - d) * p.data


class swapped_weights:
    """Context manager that evaluates ``model`` with another set of weights."""

    def __init__(self, model: Module, arrays: list):
        self.params = model.parameters()
        self.arrays = arrays

    def __enter__(self):
        self.saved = [p.data for p in self.params]
        for p, a in zip(self.params, self.arrays):
            p.data = a.astype(p.dtype, copy=True)
        return self

    def __exit__(self, *exc):
        for p, a in zip(self.params, self.saved):
            p.data = a


# ---------------------------------------------------------------- metrics
def top_k_accuracy(logits, labels, k: int) -> float:
    """Fraction of rows whose label ranks among the k largest logits.

    Ties rank the lower class index first.
    """
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, K = z.shape
    if not 1 <= k <= K:
        raise ValueError(f"k={k} outside [1, {K}]")
    if n == 0:
        return 0.0
    own = z[np.arange(n), labels][:, None]
    cls = np.arange(K)[None, :]
    ahead = (z > own) | ((z == own) & (cls < labels[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < k))


# ------------------------------------------------------------------- loop
@dataclass
class TrainConfig:
    epochs: int = 150
    warmup_epochs: int = 20
    batch_size: int = 32
    eval_batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_lr: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    ema_decay: float = 0.9999
    seed: int = 0
    topk: tuple = (1, 5)
    chunk: int | None = None  # scan chunk; None means the whole sequence


@dataclass
class Split:
    images: np.ndarray  # (n, 3, H, W) float
    labels: np.ndarray  # (n,) int

    def __len__(self) -> int:
        return len(self.labels)


def predict(model: Module, images: np.ndarray, batch_size: int = 64, chunk: int | None = None) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[i : i + batch_size]), chunk=chunk).data)
    if not outs:
        return np.zeros((0, model.config.num_classes), dtype=ad.get_dtype())
    return np.concatenate(outs)


def evaluate(model: Module, split: Split, batch_size: int = 64, topk=(1, 5), smoothing: float = 0.0, chunk: int | None = None) -> dict:
    """Top-k accuracies plus mean cross-entropy (smoothed by ``smoothing``) on a split."""
    logits = predict(model, split.images, batch_size, chunk)
    K = logits.shape[1]
    out = {f"top{k}": top_k_accuracy(logits, split.labels, min(k, K)) for k in topk}
    if len(split):
        out["loss"] = float(label_smoothed_ce(Tensor(logits), split.labels, smoothing).data)
    return out


def train_loop(
    model: Module,
    train: Split,
    val: Split | None,
    cfg: TrainConfig,
    on_record: Callable[[dict], None] | None = None,
    on_best: Callable[[Module, EmaState, dict], None] | None = None,
    on_epoch_end: Callable[[Module, EmaState, dict], None] | None = None,
) -> dict:
    """Run the recipe; returns a summary with per-step losses and the final metrics.

    ``on_record`` receives every log record, ``on_best`` fires whenever raw
    val top-1 improves, ``on_epoch_end`` after each epoch's evaluation.
    """
    params = model.parameters()
    steps_per_epoch = max(1, -(-len(train) // cfg.batch_size))
    sched = Schedule(
        steps_per_epoch,
        warmup_epochs=cfg.warmup_epochs,
        total_epochs=cfg.epochs,
        lr_max=cfg.lr,
        lr_min=cfg.min_lr,
        warmup_init=cfg.warmup_lr,
    )
    opt = OptimState(lr_max=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay, eps=cfg.adam_eps)
    ema = EmaState.of(params, cfg.ema_decay)
    rng = np.random.default_rng(cfg.seed)
    emit = on_record or (lambda r: None)
    t0 = time.perf_counter()
    losses: list[float] = []
    best = {"val_top1": -1.0}
    step = 0
    last_epoch: dict = {}

    def record(**kw):
        base = dict.fromkeys(("kind", "epoch", "step", "lr", "loss", "val_top1", "val_top5", "ema_top1", "ema_top5", "wall_time"))
        base.update(kw)
        base["wall_time"] = round(time.perf_counter() - t0, 3)
        emit(base)
        return base

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        epoch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            lr = lr_at(step, sched)
            loss = label_smoothed_ce(model(Tensor(train.images[idx]), chunk=cfg.chunk), train.labels[idx], cfg.label_smoothing)
            model.zero_grad()
            loss.backward()
            adamw_step(params, [p.grad for p in params], opt, lr)
            ema_update(ema, params)
            step += 1
            val_loss = float(loss.data)
            if not math.isfinite(val_loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            losses.append(val_loss)
            epoch_losses.append(val_loss)
            record(kind="step", epoch=epoch, step=step, lr=lr, loss=val_loss)

        metrics = {}
        if val is not None and len(val):
            raw = evaluate(model, val, cfg.eval_batch_size, cfg.topk, chunk=cfg.chunk)
            with swapped_weights(model, ema.shadow):
                sm = evaluate(model, val, cfg.eval_batch_size, cfg.topk, chunk=cfg.chunk)
            metrics = {
                "val_top1": raw["top1"],
                "val_top5": raw.get("top5"),
                "ema_top1": sm["top1"],
                "ema_top5": sm.get("top5"),
            }
        last_epoch = record(kind="epoch", epoch=epoch, step=step, lr=lr, loss=float(np.mean(epoch_losses)), **metrics)
        if metrics and metrics["val_top1"] > best["val_top1"]:
            best = dict(metrics, epoch=epoch)
            if on_best is not None:
                on_best(model, ema, best)
        if on_epoch_end is not None:
            on_epoch_end(model, ema, last_epoch)

    return {"losses": losses, "steps": step, "best": best, "last": last_epoch, "ema": ema}
