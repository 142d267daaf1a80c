"""
Losses, AdamW, single-step pre-training, dynamic-step autoregressive
fine-tuning with simulated workers, and the cascade (Medium) fine-tuning.

All randomness comes from ``numpy.random.default_rng`` streams keyed by
``(seed, iteration, worker, sample)`` so runs are reproducible bit for bit,
whether workers execute sequentially or in threads.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, DataError, NumericError
from .forecast import rollout_tensors
from .grid import GridSpec
from .model import ModelConfig, as_leaves, forward_tensors, init_parameters, save_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# losses


def _const(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(getattr(x, "values", x), dtype=dtype), False)


def loss_mae(pred: Tensor, target, grid: GridSpec) -> Tensor:
    """Latitude-weighted mean absolute error over channels and grid points."""
    target = _const(target, pred.dtype)
    if pred.shape != target.shape:
        raise T.ShapeError(f"loss_mae: {pred.shape} vs {target.shape}")
    err = T.absolute(T.sub(pred, target))
    return T.mean_all(T.mul_const(err, grid.row_weights))


def loss_mse(pred: Tensor, target, grid: GridSpec) -> Tensor:
    target = _const(target, pred.dtype)
    if pred.shape != target.shape:
        raise T.ShapeError(f"loss_mse: {pred.shape} vs {target.shape}")
    return T.mean_all(T.mul_const(T.square(T.sub(pred, target)), grid.row_weights))


def loss_mse_multistep(preds, targets, grid: GridSpec) -> Tensor:
    """Latitude-weighted MSE averaged over every rollout step."""
    if len(preds) != len(targets):
        raise T.ShapeError(f"{len(preds)} predictions vs {len(targets)} targets")
    if not preds:
        raise T.ShapeError("loss_mse_multistep needs at least one step")
    total = None
    for p, t in zip(preds, targets):
        step = loss_mse(p, t, grid)
        total = step if total is None else T.add(total, step)
    return T.scale(total, 1.0 / len(preds))


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.1
    eps: float = 1e-8
    iterations: int = 100
    batch_size: int = 1
    max_autoreg_steps: int = 1
    n_workers: int = 1
    seed: int = 0
    loss: str = "mae"
    parallel: bool = False
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.max_autoreg_steps < 1 or self.n_workers < 1 or self.batch_size < 1:
            raise ConfigError("max_autoreg_steps, n_workers and batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.loss not in ("mae", "mse"):
            raise ConfigError("loss must be 'mae' or 'mse'")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def decays(name: str) -> bool:
    """Biases and normalisation parameters are excluded from weight decay."""
    return not name.endswith((".bias", ".gamma", ".beta"))


def adamw_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    """One AdamW update; returns ``(new_params, state)``. ``params`` is not mutated."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ConfigError(f"missing gradients for {missing[:5]}")
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        q = p * (1.0 - config.lr * config.weight_decay) if decays(name) else p
        upd = (m / c1) / (np.sqrt(v / c2) + config.eps)
        out[name] = (q - config.lr * upd).astype(p.dtype)
    return out, state


# ----------------------------------------------------------------------------
# gradient helpers


def _grads_of(leaves: dict) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def _accumulate(total: Optional[dict], g: dict) -> dict:
    if total is None:
        return {k: v.copy() for k, v in g.items()}
    for k, v in g.items():
        total[k] += v
    return total


def _mean(total: dict, n: int) -> dict:
    return {k: v / v.dtype.type(n) for k, v in total.items()}


def _check_loss(value: float, it: int, where: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{where}: non-finite loss at iteration {it}")


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("PUYUN_THREADS", "4")))
    except ValueError:
        return 1


@dataclass
class TraceRow:
    iteration: int
    wall_ms: float
    loss: float
    steps: tuple = ()


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "wall_ms", "loss", "worker_steps"])
        for r in trace:
            w.writerow([r.iteration, f"{r.wall_ms:.3f}", repr(r.loss),
                        " ".join(str(s) for s in r.steps)])


def _maybe_checkpoint(cfg: TrainConfig, it: int, params: dict, model_config: ModelConfig):
    if cfg.checkpoint_every and cfg.checkpoint_path and (it + 1) % cfg.checkpoint_every == 0:
        save_checkpoint(f"{cfg.checkpoint_path}.it{it + 1}", params, model_config, cfg.seed)


# ----------------------------------------------------------------------------
# single-step pre-training


def pretrain_single_step(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
                         params: Optional[dict] = None, split: str = "train"):
    """Fit one-step predictions with the latitude-weighted MAE (or MSE) loss.

    Each iteration draws ``batch_size`` start times; the update uses the mean
    of per-sample gradients summed in sample order. Returns
    ``(params, trace)``.
    """
    cfg = train_config
    if params is None:
        params = init_parameters(model_config, cfg.seed)
    times = dataset.split_range(split)
    lo, hi = times.start + 1, times.stop - 2
    if hi < lo:
        raise DataError(f"split {split!r} too short for single-step training")
    data = dataset.normalized
    origin = dataset.time_origin
    grid = model_config.grid
    loss_fn = loss_mae if cfg.loss == "mae" else loss_mse
    state = OptimizerState()
    trace = []
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, it])
        total = None
        losses = []
        for b in range(cfg.batch_size):
            t = int(rng.integers(lo, hi + 1))
            leaves = as_leaves(params)
            x_prev = Tensor._wrap(data[t - 1 - origin], False)
            x_curr = Tensor._wrap(data[t - origin], False)
            pred = forward_tensors(x_prev, x_curr, leaves, model_config, True,
                                   np.random.default_rng([cfg.seed, it, b, 1]))
            loss = loss_fn(pred, data[t + 1 - origin], grid)
            T.backward(loss)
            losses.append(float(loss.data))
            total = _accumulate(total, _grads_of(leaves))
        mean_loss = float(np.mean(losses))
        _check_loss(mean_loss, it, "pretrain")
        params, state = adamw_step(params, _mean(total, cfg.batch_size), state, cfg)
        trace.append(TraceRow(it, 1000 * (time.perf_counter() - t0), mean_loss))
        _maybe_checkpoint(cfg, it, params, model_config)
    return params, trace


# ----------------------------------------------------------------------------
# dynamic-step fine-tuning


def truth_source(dataset: Dataset, split: str = "train"):
    """Sampler returning true pairs and targets from a dataset split."""
    times = dataset.split_range(split)
    data = dataset.normalized
    origin = dataset.time_origin

    def sample(rng, k):
        lo, hi = times.start + 1, times.stop - 1 - k
        if hi < lo:
            raise DataError(f"split {split!r} too short for a {k}-step rollout")
        t = int(rng.integers(lo, hi + 1))
        pair = (data[t - 1 - origin], data[t - origin])
        return pair, [data[t + j - origin] for j in range(1, k + 1)]

    sample.horizon = len(times)
    return sample


def worker_gradient(params: dict, model_config: ModelConfig, cfg: TrainConfig,
                    source: Callable, it: int, worker: int):
    """Gradient of one simulated worker: sample k in {2..M}, roll out, MSE."""
    rng = np.random.default_rng([cfg.seed, it, worker])
    k = int(rng.integers(2, cfg.max_autoreg_steps + 1))
    total = None
    losses = []
    for b in range(cfg.batch_size):
        pair, targets = source(rng, k)
        leaves = as_leaves(params)
        preds = rollout_tensors(leaves, Tensor._wrap(pair[0], False), Tensor._wrap(pair[1], False),
                                k, model_config, train=True,
                                rng=np.random.default_rng([cfg.seed, it, worker, b, 2]))
        loss = loss_mse_multistep(preds, targets, model_config.grid)
        T.backward(loss)
        losses.append(float(loss.data))
        total = _accumulate(total, _grads_of(leaves))
    return k, float(np.mean(losses)), _mean(total, cfg.batch_size)


def finetune_dynamic_steps(params: dict, dataset: Dataset, train_config: TrainConfig,
                           model_config: ModelConfig, source: Optional[Callable] = None,
                           split: str = "train"):
    """Fine-tune with per-worker random rollout lengths; returns ``(params, trace)``.

    Worker gradients are averaged in worker-index order after every worker
    finishes, then one AdamW step is taken.
    """
    cfg = train_config
    M = cfg.max_autoreg_steps
    if M < 2:
        raise ConfigError("dynamic-step fine-tuning needs max_autoreg_steps >= 2")
    if source is None:
        source = truth_source(dataset, split)
    if getattr(source, "horizon", M + 2) < M + 2:
        raise DataError(f"training data shorter than M+2 = {M + 2} steps")
    state = OptimizerState()
    trace = []
    pool = ThreadPoolExecutor(min(cfg.n_workers, _thread_cap())) if cfg.parallel else None
    try:
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            if pool is not None:
                futures = [pool.submit(worker_gradient, params, model_config, cfg, source, it, w)
                           for w in range(cfg.n_workers)]
                results = [f.result() for f in futures]
            else:
                results = [worker_gradient(params, model_config, cfg, source, it, w)
                           for w in range(cfg.n_workers)]
            total = None
            for _, _, g in results:
                total = _accumulate(total, g)
            mean_loss = float(np.mean([r[1] for r in results]))
            _check_loss(mean_loss, it, "finetune")
            params, state = adamw_step(params, _mean(total, cfg.n_workers), state, cfg)
            trace.append(TraceRow(it, 1000 * (time.perf_counter() - t0), mean_loss,
                                  tuple(r[0] for r in results)))
            _maybe_checkpoint(cfg, it, params, model_config)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, trace


# ----------------------------------------------------------------------------
# cascade


@dataclass
class HandoffSet:
    """Short-model rollouts used as Medium training inputs.

    ``pairs[n]`` is ``(X^_{S-1}, X^_S)`` for the rollout launched at
    ``starts[n]``; the pair is anchored at time ``starts[n] + S``.
    """

    handoff: int
    starts: np.ndarray
    pairs: np.ndarray  # [N, 2, C, H, W]


def build_handoff_set(short_params: dict, dataset: Dataset, model_config: ModelConfig,
                      handoff: int, min_targets: int, split: str = "train",
                      stride: int = 1) -> HandoffSet:
    """Roll the Short model ``handoff`` steps from every ``stride``-th start."""
    from .forecast import rollout

    if handoff < 1:
        raise ConfigError("handoff must be >= 1")
    times = dataset.split_range(split)
    last = times.stop - 1
    starts = list(range(times.start + 1, last - handoff - min_targets + 1, stride))
    if not starts:
        raise DataError(f"split {split!r} cannot supply {handoff} handoff steps "
                        f"plus {min_targets} targets")
    pairs = []
    for t in starts:
        pair = (dataset.state(t - 1), dataset.state(t))
        run = rollout(short_params, pair, handoff, model_config)
        seq = [pair[1].values] + [s.values for s in run.steps]
        pairs.append(np.stack([seq[-2], seq[-1]]))
    return HandoffSet(handoff, np.asarray(starts), np.stack(pairs))


def handoff_source(hs: HandoffSet, dataset: Dataset):
    data = dataset.normalized
    origin = dataset.time_origin

    def sample(rng, k):
        n = int(rng.integers(0, len(hs.starts)))
        anchor = int(hs.starts[n]) + hs.handoff
        if anchor + k - origin >= dataset.n_steps:
            raise DataError(f"no targets {k} steps past handoff at t={anchor}")
        targets = [data[anchor + j - origin] for j in range(1, k + 1)]
        return (hs.pairs[n, 0], hs.pairs[n, 1]), targets

    sample.horizon = 10 ** 9
    return sample


def finetune_cascade_medium(short_params: dict, dataset: Dataset, train_config: TrainConfig,
                            model_config: ModelConfig, handoff: int = 10, stride: int = 1,
                            split: str = "train"):
    """Build the Medium model: fine-tune a copy of Short on Short's own
    ``handoff``-step rollouts, with ground truth beyond the handoff as targets.

    Returns ``(medium_params, trace, handoff_set)``.
    """
    hs = build_handoff_set(short_params, dataset, model_config, handoff,
                           train_config.max_autoreg_steps, split, stride)
    medium = {k: v.copy() for k, v in short_params.items()}
    params, trace = finetune_dynamic_steps(medium, dataset, train_config, model_config,
                                           source=handoff_source(hs, dataset))
    return params, trace, hs
