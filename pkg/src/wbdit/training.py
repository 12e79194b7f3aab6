"""Noise-prediction training with Adam.

Randomness is addressed, not streamed: epoch ``e`` shuffles with
``Rng.derive(seed, SHUFFLE, e)`` and optimizer step ``s`` draws its
timesteps and noise from ``Rng.derive(seed, BATCH, s)``. A resumed run
therefore continues exactly where an uninterrupted one would have.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .diffusion import NoiseSchedule, forward_noise
from .model import Checkpoint, ModelConfig, check_params, predict_noise
from .numerics import NonFiniteError, Rng, ShapeError, Tape, backward

log = logging.getLogger(__name__)

SHUFFLE, BATCH = 1, 2


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    clip_norm: float | None = None
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when set")


def noise_prediction_loss(predictor, schedule: NoiseSchedule, x0_batch, rng: Rng):
    """Mean squared error between drawn noise and the predictor's estimate.

    Each row gets its own timestep, uniform on ``1..T``. ``predictor`` may
    return a tape ``Var``, in which case the loss is a ``Var`` too.
    """
    x0 = np.asarray(x0_batch, dtype=np.float64)
    if x0.ndim != 2:
        raise ShapeError(f"x0 batch must be (rows, genes), got {x0.shape}")
    t = rng.integers(1, schedule.T, size=x0.shape[0])
    eps = rng.normal(x0.shape)
    x_t = forward_noise(schedule, x0, t, eps)
    pred = predictor(x_t, t)
    if nx.value_of(pred).shape != x0.shape:
        raise ShapeError(f"predictor returned {nx.value_of(pred).shape}, expected {x0.shape}")
    return nx.mean(nx.square(nx.sub(eps, pred)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps_opt=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps_opt)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, step)


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def loss_and_grads(params: dict, config: ModelConfig, schedule: NoiseSchedule, x0_batch, rng: Rng):
    """Record one forward pass on a fresh tape; returns ``(loss, grads)``."""
    tape = Tape()
    handles = {name: tape.parameter(value) for name, value in params.items()}
    loss = noise_prediction_loss(
        lambda x, t: predict_noise(handles, x, t, config), schedule, x0_batch, rng
    )
    raw = backward(tape, loss)
    return float(loss.value), {name: raw[h.id] for name, h in handles.items()}


@dataclass
class EpochRecord:
    epoch: int
    wall_seconds: float
    loss: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochRecord] = field(default_factory=list)


def train(
    checkpoint: Checkpoint,
    data,
    train_cfg: TrainConfig,
    schedule: NoiseSchedule | None = None,
    on_epoch: Callable[[EpochRecord, Checkpoint], None] | None = None,
) -> TrainResult:
    """Train from ``checkpoint`` for ``train_cfg.epochs`` further epochs.

    ``data`` is ``(cells, genes)``, already preprocessed. ``on_epoch`` is
    called after every epoch with the log row and the current checkpoint
    (the CLI uses it to write logs and periodic checkpoint files).
    """
    config = checkpoint.config
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty (cells, genes) matrix")
    if data.shape[1] != config.n_genes:
        raise ShapeError(f"data has {data.shape[1]} genes, model expects {config.n_genes}")
    check_params(checkpoint.params, config)
    schedule = schedule if schedule is not None else config.schedule()

    params = {k: np.array(v) for k, v in checkpoint.params.items()}
    if checkpoint.adam_m is not None and checkpoint.adam_v is not None:
        state = AdamState(dict(checkpoint.adam_m), dict(checkpoint.adam_v), checkpoint.step)
    else:
        state = AdamState.zeros_like(params)
        state.step = checkpoint.step
    epoch = checkpoint.epoch
    ckpt = checkpoint
    records = []
    n = data.shape[0]
    for _ in range(train_cfg.epochs):
        start = time.perf_counter()
        order = Rng.derive(train_cfg.seed, SHUFFLE, epoch).permutation(n)
        losses = []
        for lo in range(0, n, train_cfg.batch_size):
            batch = data[order[lo : lo + train_cfg.batch_size]]
            try:
                loss, grads = loss_and_grads(
                    params, config, schedule, batch, Rng.derive(train_cfg.seed, BATCH, state.step)
                )
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite values at epoch {epoch}, step {state.step} "
                    f"(batch seed ({train_cfg.seed}, {BATCH}, {state.step})): {exc}"
                ) from None
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {state.step} "
                    f"(batch seed ({train_cfg.seed}, {BATCH}, {state.step}))"
                )
            if train_cfg.clip_norm is not None:
                grads, _ = clip_global_norm(grads, train_cfg.clip_norm)
            params, state = adam_step(
                params, grads, state, train_cfg.learning_rate,
                train_cfg.beta1, train_cfg.beta2, train_cfg.eps_opt,
            )
            losses.append(loss * len(batch))
        epoch += 1
        record = EpochRecord(epoch, time.perf_counter() - start, float(np.sum(losses) / n))
        records.append(record)
        log.debug("epoch %d loss %.6f (%.3fs)", record.epoch, record.loss, record.wall_seconds)
        ckpt = Checkpoint(
            config=config,
            params=params,
            step=state.step,
            epoch=epoch,
            adam_m=state.m,
            adam_v=state.v,
            metadata=dict(checkpoint.metadata),
        )
        if on_epoch is not None:
            on_epoch(record, ckpt)
    return TrainResult(ckpt, records)
