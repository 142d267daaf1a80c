"""
Gridded datasets: normalisation, climatology, sampling, and a synthetic
advection-diffusion generator standing in for reanalysis data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import cached_property
from typing import Optional

import numpy as np

from . import formats
from .errors import ConfigError, DataError
from .grid import GridSpec, VariableSet


@dataclass(frozen=True, eq=False)
class State:
    """One atmospheric state ``[C, H, W]`` at ``time_index`` (6-hour steps)."""

    time_index: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ConfigError("normalisation mean/std must be matching 1-D arrays")
        if not np.all(std > 0):
            raise ConfigError("normalisation std must be positive for every channel")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def fit(cls, values: np.ndarray) -> "NormalizationStats":
        """Per-channel statistics over ``values[T, C, H, W]``."""
        v = np.asarray(values, dtype=np.float64)
        return cls(v.mean(axis=(0, 2, 3)), v.std(axis=(0, 2, 3)))

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def _channel_view(stats, values):
    shape = (-1,) + (1,) * 2
    return stats.mean.reshape(shape), stats.std.reshape(shape)


def normalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """(x - mean) / std per channel; channel axis is third from last."""
    mean, std = _channel_view(stats, values)
    return ((np.asarray(values, dtype=np.float64) - mean) / std).astype(np.float32)


def denormalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean, std = _channel_view(stats, values)
    return (np.asarray(values, dtype=np.float64) * std + mean).astype(np.float32)


@dataclass(frozen=True, eq=False)
class Climatology:
    """Per-phase mean fields; phase = time_index mod period."""

    period: int
    means: np.ndarray  # [P, C, H, W]

    def at(self, time_index) -> np.ndarray:
        return self.means[np.mod(time_index, self.period)]


@dataclass(eq=False)
class Dataset:
    """A time-ordered run of states on one grid.

    ``values`` holds physical units as stored on disk; :attr:`normalized`
    is what the model consumes. ``time_origin`` is the time index of row 0.
    """

    grid: GridSpec
    variables: VariableSet
    values: np.ndarray
    stats: NormalizationStats
    splits: dict
    time_origin: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T, C, H, W = self.values.shape
        if T < 3:
            raise DataError(f"dataset needs at least 3 states, got {T}")
        if C != self.variables.n_channels or (H, W) != self.grid.shape:
            raise DataError(f"values {self.values.shape} do not match variables/grid")
        if not np.isfinite(self.values).all():
            raise DataError("dataset contains non-finite values")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @cached_property
    def normalized(self) -> np.ndarray:
        return normalize(self.values, self.stats)

    def state(self, t: int) -> State:
        """State at absolute time index ``t``."""
        k = t - self.time_origin
        if not 0 <= k < self.n_steps:
            raise DataError(f"time index {t} outside dataset [{self.time_origin}, "
                            f"{self.time_origin + self.n_steps - 1}]")
        return State(t, self.normalized[k])

    def split_range(self, name: str) -> range:
        """Absolute time indices belonging to a split."""
        if name not in self.splits:
            raise DataError(f"unknown split {name!r}; have {sorted(self.splits)}")
        lo, hi = self.splits[name]
        return range(self.time_origin + lo, self.time_origin + hi)

    def save(self, path) -> None:
        sidecar = {
            "kind": "dataset",
            "stats": self.stats.to_json(),
            "splits": {k: list(v) for k, v in self.splits.items()},
            "time_origin": self.time_origin,
            "n_lon": self.grid.n_lon,
            **self.meta,
        }
        formats.write_pygr(path, self.values, self.variables.channel_names,
                           self.grid.latitudes, sidecar)


def load_dataset(path) -> Dataset:
    values, names, lats, side = formats.read_pygr(path)
    if "stats" not in side:
        raise DataError(f"{path}: sidecar lacks normalisation stats")
    grid = GridSpec.from_latitudes(lats, values.shape[3])
    meta = {k: v for k, v in side.items()
            if k not in ("kind", "stats", "splits", "time_origin", "n_lon")}
    splits = {k: tuple(v) for k, v in side.get("splits", {}).items()}
    return Dataset(grid, VariableSet.from_names(names), values,
                   NormalizationStats.from_json(side["stats"]), splits,
                   int(side.get("time_origin", 0)), meta)


def build_climatology(dataset: Dataset, period: int, split: Optional[str] = "train") -> Climatology:
    """Mean normalised field for each phase ``time_index mod period``."""
    if period < 1:
        raise ConfigError("climatology period must be >= 1")
    times = dataset.split_range(split) if split else range(
        dataset.time_origin, dataset.time_origin + dataset.n_steps)
    data = dataset.normalized
    sums = np.zeros((period,) + data.shape[1:], dtype=np.float64)
    counts = np.zeros(period, dtype=np.int64)
    for t in times:
        ph = t % period
        sums[ph] += data[t - dataset.time_origin]
        counts[ph] += 1
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"climatology phases {missing} have no samples")
    return Climatology(period, (sums / counts[:, None, None, None]).astype(np.float32))


def sample_pair(dataset: Dataset, t: int, length: int = 1):
    """``((X^{t-1}, X^t), [X^{t+1}, ..., X^{t+length}])`` at absolute time ``t``."""
    first = dataset.time_origin
    last = first + dataset.n_steps - 1
    if length < 0:
        raise DataError("target length must be non-negative")
    if t - 1 < first or t + length > last or t >= last:
        raise DataError(f"pair at t={t} with {length} targets exceeds dataset [{first}, {last}]")
    pair = (dataset.state(t - 1), dataset.state(t))
    return pair, [dataset.state(t + k) for k in range(1, length + 1)]


# ----------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticParams:
    """Knobs of the advection-diffusion generator.

    Winds are in grid cells per step; ``diffusion`` is the explicit Laplacian
    coefficient. Forcing is a seasonal sinusoid of period ``period`` on a
    fixed spatial pattern plus smooth red-noise with lag-1 correlation
    ``noise_memory``.
    """

    wind_speed: float = 0.6
    diffusion: float = 0.02
    seasonal_amplitude: float = 0.03
    noise_amplitude: float = 0.02
    noise_memory: float = 0.9
    period: int = 40
    spinup: int = 40
    split_fractions: tuple = (0.75, 0.1, 0.15)


_SCALES = {"z": (50000.0, 5000.0), "t": (250.0, 3.0), "2t": (288.0, 3.0),
           "r": (50.0, 20.0), "u": (0.0, 5.0), "v": (0.0, 5.0), "10u": (0.0, 5.0),
           "10v": (0.0, 5.0), "msl": (101325.0, 1000.0)}


def channel_scale(name: str) -> tuple:
    """Physical (offset, scale) mimicking each variable's units."""
    base = name.split("@")[0]
    return _SCALES.get(base, (0.0, 1.0))


def _wind_factor(name: str) -> float:
    if "@" in name:
        level = int(name.split("@")[1])
        return 0.55 + 0.45 * (1.0 - level / 1000.0)
    return 0.5 + 0.1 * (sum(name.encode()) % 4)


def smooth_basis(grid: GridSpec, max_wave: int = 4) -> np.ndarray:
    """Large-scale basis fields ``[K, H, W]`` with zero meridional slope at the poles."""
    phi = np.deg2rad(grid.latitudes)[:, None]
    lam = (2 * np.pi * np.arange(grid.n_lon) / grid.n_lon)[None, :]
    colat = phi + np.pi / 2
    out = []
    for n in range(max_wave + 2):
        out.append(0.3 * np.cos(n * colat) * np.ones_like(lam))
    for m in range(1, max_wave + 1):
        for n in range(max_wave + 2):
            env = np.cos(phi) * np.cos(n * colat) / (1.0 + 0.25 * (m + n))
            out.append(env * np.cos(m * lam))
            out.append(env * np.sin(m * lam))
    return np.stack(out)


def wind_field(grid: GridSpec, speed: float):
    """Fixed smooth wind ``(u, v)`` in cells/step; v positive toward higher row index."""
    phi = np.deg2rad(grid.latitudes)[:, None]
    lam = (2 * np.pi * np.arange(grid.n_lon) / grid.n_lon)[None, :]
    u = speed * np.cos(phi) * (0.7 + 0.3 * np.sin(2 * lam))
    v = 0.3 * speed * np.sin(lam) * np.cos(phi) ** 2
    return u, v


def advect_diffuse_step(q: np.ndarray, u: np.ndarray, v: np.ndarray, kappa: float) -> np.ndarray:
    """One explicit upwind advection + Laplacian diffusion step on ``[C, H, W]``.

    ``u``/``v`` broadcast against ``q``. Longitude is periodic; latitude
    boundaries copy the edge row (zero-gradient), so diffusion conserves the
    unweighted field sum.
    """
    west = np.roll(q, 1, axis=-1)
    east = np.roll(q, -1, axis=-1)
    north = np.concatenate([q[..., :1, :], q[..., :-1, :]], axis=-2)
    south = np.concatenate([q[..., 1:, :], q[..., -1:, :]], axis=-2)
    up, um = np.maximum(u, 0), np.minimum(u, 0)
    vp, vm = np.maximum(v, 0), np.minimum(v, 0)
    adv = up * (q - west) + um * (east - q) + vp * (q - north) + vm * (south - q)
    lap = west + east + north + south - 4 * q
    return q - adv + kappa * lap


def generate_synthetic(grid: GridSpec, variables: VariableSet, T_steps: int, seed: int,
                       params: Optional[SyntheticParams] = None) -> Dataset:
    """Deterministic synthetic dataset in physical units.

    Normalisation statistics are computed from the training split only.
    """
    p = params or SyntheticParams()
    if T_steps < 8:
        raise ConfigError("synthetic datasets need at least 8 steps")
    names = variables.channel_names
    C = len(names)
    factors = np.array([_wind_factor(n) for n in names])[:, None, None]
    u0, v0 = wind_field(grid, p.wind_speed)
    u, v = factors * u0, factors * v0
    courant = float(np.max(np.abs(u) + np.abs(v)))
    if courant + 4 * p.diffusion > 1.0:
        raise ConfigError(f"unstable generator: courant {courant:.3f} + 4*diffusion > 1")

    rng = np.random.default_rng(seed)
    basis = smooth_basis(grid)
    K = basis.shape[0]
    flat = basis.reshape(K, -1)

    def random_field(amp):
        coeff = rng.standard_normal((C, K))
        f = (coeff @ flat).reshape(C, *grid.shape)
        return amp * f / f.std(axis=(1, 2), keepdims=True)

    q = random_field(1.0)
    pattern = random_field(1.0)
    phases = rng.uniform(0, 2 * np.pi, size=C)[:, None, None]
    noise = random_field(1.0)
    rho = p.noise_memory
    innov = np.sqrt(1.0 - rho * rho)

    states = np.empty((T_steps, C) + grid.shape, dtype=np.float64)
    for n in range(-p.spinup, T_steps):
        if n >= 0:
            states[n] = q
        if n == T_steps - 1:
            break
        forcing = p.seasonal_amplitude * np.sin(2 * np.pi * n / p.period + phases) * pattern
        forcing = forcing + p.noise_amplitude * noise
        q = advect_diffuse_step(q, u, v, p.diffusion) + forcing
        noise = rho * noise + innov * random_field(1.0)

    offsets = np.array([channel_scale(n)[0] for n in names])[None, :, None, None]
    scales = np.array([channel_scale(n)[1] for n in names])[None, :, None, None]
    values = (offsets + scales * states).astype(np.float32)

    f_train, f_valid, _ = p.split_fractions
    a = int(round(T_steps * f_train))
    b = int(round(T_steps * (f_train + f_valid)))
    splits = {"train": (0, a), "valid": (a, b), "test": (b, T_steps)}
    stats = NormalizationStats.fit(values[:a])
    meta = {"seed": int(seed), "generator": {k: (list(v) if isinstance(v, tuple) else v)
                                             for k, v in asdict(p).items()}}
    return Dataset(grid, variables, values, stats, splits, 0, meta)
