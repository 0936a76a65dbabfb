"""Joint objective, Adam, the lambda schedule, early stopping and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .data import Example, NegativeSampler
from .model import Batch, HyperParams, ModelParams, collate, forward_batch
from .numerics import NonFiniteError, Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_item_loss", "train_cate_loss", "valid_item_loss", "valid_cate_loss",
              "lambda", "lr", "seconds")


class NumericalFailure(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    lambda_initial: float = 0.5
    lambda_final: float = 1.0
    patience_lambda: int = 3
    patience_stop: int = 10
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    valid_seed: int = 12345

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.patience_lambda < 1 or self.patience_stop < 1:
            raise ValueError("batch_size and patience values must be at least 1")


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lam: float = 0.5
    best_cate_loss: float = np.inf
    best_joint_loss: float = np.inf
    lambda_bad_epochs: int = 0
    stop_bad_epochs: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    best_params: ModelParams | None = None
    switched_at: int | None = None

    @classmethod
    def create(cls, params: ModelParams, config: TrainConfig) -> "TrainState":
        named = params.named()
        return cls(params=params,
                   m={k: np.zeros_like(t.data) for k, t in named.items()},
                   v={k: np.zeros_like(t.data) for k, t in named.items()},
                   lam=config.lambda_initial,
                   rng=np.random.default_rng(config.seed))


# ---------------------------------------------------------------- losses

def category_loss(cate_dist, target_cate) -> Tensor:
    """Mean of ``-log p(target category)``; probabilities clamped at 1e-12."""
    cate_dist = nx.as_tensor(cate_dist)
    target = np.asarray(target_cate)
    if cate_dist.data.ndim == 1:
        return _nll(cate_dist, target.reshape(1), single=True)
    return _nll(cate_dist, target.reshape(-1, 1), single=False)


def item_loss(mixed_dist, positive_index=0) -> Tensor:
    """Mean of ``-log p(positive)`` over the scored candidate set."""
    mixed_dist = nx.as_tensor(mixed_dist)
    pos = np.asarray(positive_index)
    if mixed_dist.data.ndim == 1:
        return _nll(mixed_dist, pos.reshape(1), single=True)
    pos = np.broadcast_to(pos, mixed_dist.shape[:1]).reshape(-1, 1)
    return _nll(mixed_dist, pos, single=False)


def _nll(dist: Tensor, idx: np.ndarray, single: bool) -> Tensor:
    picked = nx.clamped_log(nx.take_along(dist, idx, axis=-1))
    n = 1 if single else dist.shape[0]
    return nx.scale(nx.total(picked), -1.0 / n)


def joint_loss(item, cate, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return nx.add(nx.scale(item, lam), nx.scale(cate, 1.0 - lam))


# ---------------------------------------------------------------- optimizer

def adam_step(state: TrainState, grads: dict[str, np.ndarray], config: TrainConfig) -> TrainState:
    """Bias-corrected Adam update applied in place to ``state.params``."""
    named = state.params.named()
    for name, g in grads.items():
        if g.shape != named[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {named[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.learning_rate == 0:
            continue
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        named[name].data -= update.astype(named[name].data.dtype)
    return state


# ---------------------------------------------------------------- batches and losses

def batch_losses(params: ModelParams, hyper: HyperParams, batch: Batch, candidates, train: bool,
                 rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
    out = forward_batch(params, hyper, batch, candidates, train=train, rng=rng)
    return item_loss(out.mixed, 0), category_loss(out.cate_dist, batch.target_cates)


def draw_candidates(sampler: NegativeSampler, targets: np.ndarray, rng) -> np.ndarray:
    return np.concatenate([targets[:, None], sampler.sample_batch(targets, rng)], axis=1)


def train_epoch(state: TrainState, examples: Sequence[Example], hyper: HyperParams, config: TrainConfig,
                sampler: NegativeSampler, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """One pass in shuffled mini-batches; returns mean (item, category) loss."""
    if not examples:
        raise ValueError("no training examples")
    rng = state.rng if rng is None else rng
    order = rng.permutation(len(examples))
    named = state.params.named()
    tot_item = tot_cate = 0.0
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        chunk = [examples[i] for i in idx]
        batch = collate(chunk, hyper.M, hyper.T, hyper.k)
        cands = draw_candidates(sampler, batch.target_items, rng)
        li, lc = batch_losses(state.params, hyper, batch, cands, True, rng)
        loss = joint_loss(li, lc, state.lam)
        value = float(loss.data)
        if not np.isfinite(value):
            bad = next((e for e in chunk), None)
            raise NumericalFailure(f"non-finite loss in batch starting with user {bad.user} position {bad.position}")
        nx.backward(loss)
        grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in named.items()}
        adam_step(state, grads, config)
        tot_item += float(li.data) * len(idx)
        tot_cate += float(lc.data) * len(idx)
    return tot_item / len(examples), tot_cate / len(examples)


def validation_losses(params: ModelParams, hyper: HyperParams, examples: Sequence[Example],
                      sampler: NegativeSampler, seed: int, batch_size: int = 256) -> tuple[float, float]:
    """Mean (item, category) loss with negatives drawn from a fixed seed."""
    rng = np.random.default_rng(seed)
    tot_item = tot_cate = 0.0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = collate(chunk, hyper.M, hyper.T, hyper.k)
        cands = draw_candidates(sampler, batch.target_items, rng)
        li, lc = batch_losses(params, hyper, batch, cands, False, None)
        tot_item += float(li.data) * len(chunk)
        tot_cate += float(lc.data) * len(chunk)
    n = max(1, len(examples))
    return tot_item / n, tot_cate / n


# ---------------------------------------------------------------- schedules

def lambda_schedule_update(state: TrainState, valid_cate_loss: float, config: TrainConfig) -> TrainState:
    """Switch lambda to its final value once the validation category loss has
    gone ``patience_lambda`` epochs without a new strict minimum."""
    if valid_cate_loss < state.best_cate_loss:
        state.best_cate_loss = valid_cate_loss
        state.lambda_bad_epochs = 0
    else:
        state.lambda_bad_epochs += 1
    if state.lam == config.lambda_initial and state.switched_at is None \
            and state.lambda_bad_epochs >= config.patience_lambda:
        state.lam = config.lambda_final
        state.switched_at = state.epoch
    return state


def early_stop_check(state: TrainState, valid_joint_loss: float, config: TrainConfig,
                     max_epochs: int | None = None) -> tuple[bool, str | None, bool]:
    """Returns ``(stop, reason, improved)``."""
    improved = valid_joint_loss < state.best_joint_loss
    if improved:
        state.best_joint_loss = valid_joint_loss
        state.stop_bad_epochs = 0
    else:
        state.stop_bad_epochs += 1
    if state.stop_bad_epochs >= config.patience_stop:
        return True, "patience", improved
    limit = config.max_epochs if max_epochs is None else max_epochs
    if state.epoch >= limit:
        return True, "max_epochs", improved
    return False, None, improved


# ---------------------------------------------------------------- loop

def format_log_line(record: dict) -> str:
    parts = []
    for key in LOG_FIELDS:
        value = record[key]
        parts.append(f"{key}={value}" if isinstance(value, int) else f"{key}={value:.6f}")
    return " ".join(parts)


@dataclass
class FitResult:
    state: TrainState
    best_params: ModelParams
    history: list[dict]
    stop_reason: str
    log_lines: list[str]


def fit(params: ModelParams, hyper: HyperParams, config: TrainConfig, train_examples: Sequence[Example],
        valid_examples: Sequence[Example], item_counts, checkpoint_path=None, log_path=None,
        on_epoch: Callable[[TrainState, dict], bool] | None = None, header: dict | None = None) -> FitResult:
    """Train until early stopping or ``max_epochs``.

    The best-validation parameters are kept (and written to
    ``checkpoint_path``). When lambda switches, the early-stopping minimum is
    reset because the monitored objective changes. ``on_epoch`` may return
    True to stop after the current epoch.
    """
    sampler = NegativeSampler(item_counts, hyper.Z)
    state = TrainState.create(params, config)
    state.best_params = params.copy()
    valid = valid_examples if valid_examples else train_examples
    history, lines = [], []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    reason = "max_epochs"
    try:
        while True:
            t0 = time.perf_counter()
            state.epoch += 1
            lam_used = state.lam
            tr_item, tr_cate = train_epoch(state, train_examples, hyper, config, sampler)
            va_item, va_cate = validation_losses(state.params, hyper, valid, sampler, config.valid_seed)
            if not (np.isfinite(va_item) and np.isfinite(va_cate)):
                raise NumericalFailure(f"non-finite validation loss at epoch {state.epoch}")
            joint = lam_used * va_item + (1.0 - lam_used) * va_cate
            record = {"epoch": state.epoch, "train_item_loss": tr_item, "train_cate_loss": tr_cate,
                      "valid_item_loss": va_item, "valid_cate_loss": va_cate, "lambda": lam_used,
                      "lr": config.learning_rate, "seconds": time.perf_counter() - t0}
            stop, why, improved = early_stop_check(state, joint, config)
            if improved:
                state.best_params = state.params.copy()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, state.best_params, hyper, extra=header)
            lambda_schedule_update(state, va_cate, config)
            if state.lam != lam_used:
                state.best_joint_loss = np.inf
                state.stop_bad_epochs = 0
                stop = stop and why == "max_epochs"
            line = format_log_line(record)
            lines.append(line)
            history.append(record)
            log.info(line)
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
            if on_epoch is not None and on_epoch(state, record):
                reason = "callback"
                break
            if stop:
                reason = why
                break
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(state, state.best_params, history, reason, lines)
