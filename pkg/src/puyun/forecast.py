"""Autoregressive rollout and the Short -> Medium cascade."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import formats
from . import tensor as T
from .data import State, denormalize, NormalizationStats
from .errors import ConfigError, NumericError
from .model import ModelConfig, as_leaves, diagnose, forward_tensors
from .tensor import Tensor

HOURS_PER_STEP = 6


@dataclass
class ForecastRun:
    """Predicted states X^_{t+1..t+T} from one initial pair."""

    init_time: int
    steps: list = field(default_factory=list)
    model_ids: list = field(default_factory=list)

    @property
    def lead_hours(self) -> list:
        return [HOURS_PER_STEP * (k + 1) for k in range(len(self.steps))]

    @property
    def values(self) -> np.ndarray:
        return np.stack([s.values for s in self.steps])


def rollout_tensors(p: dict, x_prev: Tensor, x_curr: Tensor, k: int, config: ModelConfig,
                    train: bool = False, rng: Optional[np.random.Generator] = None) -> list:
    """Feed predictions back ``k`` times; gradients flow through every step."""
    preds = []
    for _ in range(k):
        nxt = forward_tensors(x_prev, x_curr, p, config, train, rng)
        preds.append(nxt)
        x_prev, x_curr = x_curr, nxt
    return preds


def _init(pair):
    a, b = pair
    t = getattr(b, "time_index", 0)
    return getattr(a, "values", a), getattr(b, "values", b), t


def rollout(params: dict, pair, n_steps: int, config: ModelConfig,
            model_id: str = "short") -> ForecastRun:
    """Eval-mode T-step forecast from ``pair = (X^{t-1}, X^t)``."""
    if n_steps < 1:
        raise ConfigError("rollout needs at least one step")
    x_prev, x_curr, t0 = _init(pair)
    dtype = next(iter(params.values())).dtype
    leaves = as_leaves(params, False)
    run = ForecastRun(t0)
    a = Tensor(x_prev, dtype=dtype)
    b = Tensor(x_curr, dtype=dtype)
    with T.no_grad():
        for k in range(n_steps):
            try:
                nxt = forward_tensors(a, b, leaves, config)
            except NumericError as exc:
                raise NumericError(f"rollout step {k + 1}: {diagnose(exc, params)}") from exc
            run.steps.append(State(t0 + k + 1, nxt.data))
            run.model_ids.append(model_id)
            a, b = b, nxt
    return run


def cascade_rollout(short_params: dict, medium_params: dict, pair, n_steps: int,
                    handoff: int, config: ModelConfig,
                    medium_config: Optional[ModelConfig] = None) -> ForecastRun:
    """Short for steps 1..S, then Medium from ``(X^_{S-1}, X^_S)`` to step T."""
    if not 2 <= handoff < n_steps:
        raise ConfigError(f"handoff S={handoff} must satisfy 2 <= S < T={n_steps}")
    short = rollout(short_params, pair, handoff, config, "short")
    s_prev, s_curr = short.steps[-2], short.steps[-1]
    medium = rollout(medium_params, (s_prev, s_curr), n_steps - handoff,
                     medium_config or config, "medium")
    run = ForecastRun(short.init_time, short.steps + medium.steps,
                      short.model_ids + medium.model_ids)
    return run


def save_forecast(path, run: ForecastRun, config: ModelConfig, stats: NormalizationStats,
                  meta: Optional[dict] = None) -> None:
    """Write a forecast as a PYGR container in physical units."""
    values = denormalize(run.values, stats)
    sidecar = {
        "kind": "forecast",
        "init_time": int(run.init_time),
        "lead_hours": run.lead_hours,
        "model_ids": list(run.model_ids),
        "stats": stats.to_json(),
        "n_lon": config.grid.n_lon,
        **(meta or {}),
    }
    formats.write_pygr(path, values, config.variables.channel_names,
                       config.grid.latitudes, sidecar)
