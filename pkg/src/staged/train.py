"""Fit per-type parameters by backpropagating trajectory MSE through the
unrolled integrator (discretize-then-optimize), with an Adam update."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import Dataset, GrnSpec, LrPair, RunConfig
from .errors import NothingToPredict, NothingToScore, NumericalBlowup, SchemaMismatch
from .model import DTYPE, ModelParams, ModelStructure, RolloutResult, save_checkpoint, unroll

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class LossReport:
    total: float
    per_gene: dict[str, float]
    per_type: dict[str, float]
    per_time: dict[float, float]


def loss(pred, obs: Dataset, t_init: int | None = None) -> LossReport:
    """MSE over predicted frames only (frames after the warm-up)."""
    if isinstance(pred, RolloutResult):
        t_init = pred.t_init if t_init is None else t_init
        pred = pred.pred
    pred = np.asarray(pred, dtype=float)
    if pred.shape != obs.expression.shape:
        raise SchemaMismatch(f"prediction shape {pred.shape} != observation shape {obs.expression.shape}")
    t_init = 0 if t_init is None else t_init
    if t_init + 1 >= obs.n_frames:
        raise NothingToScore("no predicted frames to score")
    sq = (pred[t_init + 1:] - obs.expression[t_init + 1:]) ** 2
    ctype = np.array(obs.cell_type)
    return LossReport(
        total=float(sq.mean()),
        per_gene={g: float(sq[:, :, i].mean()) for i, g in enumerate(obs.genes)},
        per_type={k: float(sq[:, ctype == k].mean()) for k in obs.types},
        per_time={float(t): float(sq[i].mean()) for i, t in enumerate(obs.times[t_init + 1:])},
    )


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    n_train: int  # frames 0 .. n_train - 1 may be used as targets during training
    n_val: int


def split_frames(n_frames: int, t_init: int, val_fraction: float) -> Split:
    n_val = int(round(val_fraction * n_frames)) if val_fraction > 0 else 0
    if val_fraction > 0:
        n_val = max(n_val, 1)
    n_train = n_frames - n_val
    if n_train - 1 <= t_init:
        raise NothingToPredict(f"{n_train} training frames leave nothing to fit after warm-up t_init={t_init}")
    return Split(n_train, n_val)


def window_starts(n_train: int, t_init: int, window: int, stride: int = 1) -> tuple[list[int], int]:
    """Warm-up start frames and rollout length for truncated windows (window 0 = one full-horizon window)."""
    horizon = n_train - 1 - t_init
    if window <= 0 or window >= horizon:
        return [0], horizon
    last = n_train - 1 - t_init - window
    return list(range(0, last + 1, max(1, stride))), window


def _chunks(xs: list[int], size: int) -> list[list[int]]:
    size = max(1, size)
    return [xs[i:i + size] for i in range(0, len(xs), size)]


def _sse(st, params, obs, ds, cfg, starts, n_steps, teacher):
    preds, _ = unroll(st, params, obs, ds.positions, ds.times, starts, n_steps, integrator=cfg.integrator,
                      dt=cfg.dt, time_scale=cfg.time_scale, teacher=teacher)
    idx = torch.as_tensor([[s + st.t_init + 1 + j for s in starts] for j in range(n_steps)])
    target = obs[idx]
    return ((preds - target) ** 2).sum(), target.numel()


def objective_and_grad(st: ModelStructure, params: ModelParams, ds: Dataset, cfg: RunConfig,
                       starts: Sequence[int], n_steps: int, teacher: float = 0.0, workers: int = 1
                       ) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean squared error over all windows and its exact gradient.

    Windows are processed in fixed-size chunks; per-chunk sums are reduced in
    chunk order, so the result does not depend on ``workers``.
    """
    obs = torch.tensor(ds.expression, dtype=DTYPE)
    names = list(params.tensors)

    def run(chunk):
        p = params.detached().requires_grad_()
        sse, n = _sse(st, p, obs, ds, cfg, chunk, n_steps, teacher)
        grads = torch.autograd.grad(sse, [p.tensors[k] for k in names], allow_unused=True)
        return float(sse.detach()), n, [torch.zeros_like(p.tensors[k]) if g is None else g
                                        for k, g in zip(names, grads)]

    chunks = _chunks(list(starts), cfg.chunk_size)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    total = sum(r[1] for r in results)
    sse = 0.0
    grads = [torch.zeros_like(params.tensors[k]) for k in names]
    for s, _, g in results:
        sse += s
        grads = [a + b for a, b in zip(grads, g)]
    out = {k: g / total for k, g in zip(names, grads)}
    for k, g in out.items():
        if not torch.all(torch.isfinite(g)):
            raise NumericalBlowup(f"non-finite gradient for weight {k}")
    return sse / total, out


def structure_for(ds: Dataset, specs, catalog, cfg) -> ModelStructure:
    return ModelStructure.from_dataset(ds, specs, catalog, cfg)


def gradients(params: ModelParams, dataset: Dataset, config: RunConfig, specs: Mapping[str, GrnSpec],
              catalog: Sequence[LrPair], structure: ModelStructure | None = None
              ) -> tuple[float, dict[str, np.ndarray]]:
    """Closed-loop full-horizon MSE and its gradient with respect to every weight."""
    st = structure or structure_for(dataset, specs, catalog, config)
    if dataset.n_frames - 1 <= st.t_init:
        raise NothingToPredict("nothing to predict after warm-up")
    value, g = objective_and_grad(st, params, dataset, config, [0], dataset.n_frames - 1 - st.t_init)
    return value, {k: v.numpy() for k, v in g.items()}


def objective_value(params: ModelParams, dataset: Dataset, config: RunConfig, structure: ModelStructure,
                    starts: Sequence[int] | None = None, n_steps: int | None = None, teacher: float = 0.0) -> float:
    obs = torch.tensor(dataset.expression, dtype=DTYPE)
    starts = [0] if starts is None else list(starts)
    n_steps = dataset.n_frames - 1 - structure.t_init if n_steps is None else n_steps
    with torch.no_grad():
        sse, n = _sse(structure, params, obs, dataset, config, starts, n_steps, teacher)
    return float(sse) / n


# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_params: ModelParams | None = None
    best_val: float = math.inf
    best_epoch: int = -1
    structure: ModelStructure | None = None


def adam_update(state: TrainState, grads: Mapping[str, torch.Tensor], lr: float) -> None:
    state.epoch += 1
    t = state.epoch
    new = {}
    for k, p in state.params.tensors.items():
        g = grads[k]
        state.m[k] = BETA1 * state.m[k] + (1 - BETA1) * g
        state.v[k] = BETA2 * state.v[k] + (1 - BETA2) * g * g
        mhat = state.m[k] / (1 - BETA1 ** t)
        vhat = state.v[k] / (1 - BETA2 ** t)
        new[k] = p - lr * mhat / (torch.sqrt(vhat) + EPS)
    state.params = state.params.with_tensors(new)


def teacher_ratio(epoch: int, ramp: int) -> float:
    """Linear ramp from teacher forcing (1) at epoch 0 to closed loop (0) at ``ramp``."""
    if ramp <= 0:
        return 0.0
    return max(0.0, 1.0 - epoch / ramp)


def train(dataset: Dataset, config: RunConfig, specs: Mapping[str, GrnSpec], catalog: Sequence[LrPair],
          checkpoint: str | None = None, log_path: str | None = None, init: ModelParams | None = None,
          callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Full-batch Adam over truncated (or full) closed-loop windows of the training frames.

    The final ``val_fraction`` of frames is held out; the validation score is a
    closed-loop forecast of those frames from the observed history before them.
    The returned state's ``best_params`` minimize validation loss (training
    loss when nothing is held out) and are what ``checkpoint`` receives.
    """
    st = structure_for(dataset, specs, catalog, config)
    split = split_frames(dataset.n_frames, st.t_init, config.val_fraction)
    starts, n_steps = window_starts(split.n_train, st.t_init, config.window, config.window_stride)
    params = init or ModelParams.init(st.type_genes, config.hidden, config.mlp_width, config.aggregation,
                                      seed=config.seed)
    state = TrainState(params, {k: torch.zeros_like(t) for k, t in params.tensors.items()},
                       {k: torch.zeros_like(t) for k, t in params.tensors.items()},
                       rng=np.random.default_rng(config.seed), structure=st)
    val_start = [split.n_train - 1 - st.t_init]
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)  # intra-op threading must not change reduction order
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh, lineterminator="\n") if log_fh else None
    if writer:
        writer.writerow(("epoch", "train_mse", "val_mse", "wall_ms"))
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            teacher = teacher_ratio(epoch, config.teacher_forcing_epochs)
            value, grads = objective_and_grad(st, state.params, dataset, config, starts, n_steps, teacher,
                                              workers=config.workers)
            if not math.isfinite(value):
                _save_best(state, checkpoint, config)
                raise NumericalBlowup(f"training loss became non-finite at epoch {epoch}")
            val = objective_value(state.params, dataset, config, st, val_start, split.n_val) \
                if split.n_val else value
            state.train_loss.append(value)
            state.val_loss.append(val)
            if val < state.best_val:
                state.best_val, state.best_epoch, state.best_params = val, epoch, state.params.detached()
            adam_update(state, grads, config.learning_rate)
            if writer:
                writer.writerow((epoch, repr(value), repr(val), int((time.perf_counter() - t0) * 1000)))
            if checkpoint and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(f"{checkpoint}.epoch{epoch + 1}", state.params, st, config)
            if callback:
                callback(state)
            log.debug("epoch %d train %.6g val %.6g", epoch, value, val)
    finally:
        torch.set_num_threads(prev_threads)
        if log_fh:
            log_fh.close()
    if state.best_params is None:
        state.best_params = state.params.detached()
    _save_best(state, checkpoint, config)
    return state


def _save_best(state: TrainState, checkpoint: str | None, config: RunConfig) -> None:
    if checkpoint and state.best_params is not None:
        save_checkpoint(checkpoint, state.best_params, state.structure, config,
                        extra={"best_epoch": state.best_epoch, "best_val_mse": state.best_val})
