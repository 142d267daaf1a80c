"""Latitude/longitude grid geometry and the channel catalog."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Equiangular grid with per-row area weights normalised to unit mean.

    ``latitudes`` are in degrees, row 0 northernmost. Every cell in a row
    shares the row's weight, so the mean over all H*W cells equals the mean
    over rows.
    """

    n_lat: int
    n_lon: int
    latitudes: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_latitudes(cls, latitudes: Sequence[float], n_lon: int) -> "GridSpec":
        lats = np.asarray(latitudes, dtype=np.float64)
        if lats.ndim != 1 or lats.size < 1 or n_lon < 1:
            raise ConfigError("grid needs at least one latitude row and one longitude column")
        if np.any(np.abs(lats) > 90):
            raise ConfigError("latitudes must lie in [-90, 90]")
        w = latitude_weights(lats)
        return cls(len(lats), int(n_lon), lats, w)

    @property
    def shape(self) -> tuple:
        return (self.n_lat, self.n_lon)

    @property
    def row_weights(self) -> np.ndarray:
        """Weights shaped [H, 1] for broadcasting over [..., H, W]."""
        return self.weights[:, None]

    def __eq__(self, other) -> bool:
        return (isinstance(other, GridSpec) and self.shape == other.shape
                and np.array_equal(self.latitudes, other.latitudes))

    def __hash__(self):
        return hash((self.n_lat, self.n_lon, self.latitudes.tobytes()))


def latitude_weights(lats: np.ndarray) -> np.ndarray:
    """cos(latitude) per row; pole rows use their half-cell area instead.

    A pole row covers [90 - d/2, 90] where d is the spacing to its neighbour.
    Its weight is that cell's area per unit latitude width, (1 - cos(d/2)) / d,
    which is on the same scale as cos(lat) for a full-width interior cell.
    """
    rad = np.deg2rad(lats)
    w = np.cos(rad)
    for i, lat in enumerate(lats):
        if abs(lat) == 90.0:
            if len(lats) == 1:
                raise ConfigError("a single pole row has zero area")
            nb = lats[i + 1] if i + 1 < len(lats) else lats[i - 1]
            d = np.deg2rad(abs(lat - nb))
            w[i] = (1.0 - np.cos(d / 2)) / d
    w = np.clip(w, 0.0, None)
    if np.any(w <= 0):
        raise ConfigError("latitude weights must be positive")
    return w / w.mean()


def make_grid(n_lat: int, n_lon: int) -> GridSpec:
    """Equiangular grid from +90 to -90 inclusive."""
    if n_lat < 2 or n_lon < 2:
        raise ConfigError(f"degenerate grid {n_lat}x{n_lon}; need at least 2x2")
    lats = np.linspace(90.0, -90.0, n_lat)
    return GridSpec.from_latitudes(lats, n_lon)


FULL_LEVELS = (50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000)


@dataclass(frozen=True)
class VariableSet:
    """Atmospheric variables on pressure levels plus single-level surface fields.

    Channel order: every atmospheric variable with its levels in order, then
    the surface variables. Channel names are ``name@level`` or ``name``.
    """

    atmospheric: tuple = ()
    surface: tuple = ()
    channel_names: tuple = field(init=False)
    channel_index: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        atmo = tuple((str(n), tuple(int(l) for l in levels)) for n, levels in self.atmospheric)
        surf = tuple(str(s) for s in self.surface)
        object.__setattr__(self, "atmospheric", atmo)
        object.__setattr__(self, "surface", surf)
        names = [f"{n}@{l}" for n, levels in atmo for l in levels] + list(surf)
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate channel names in {names}")
        if not names:
            raise ConfigError("variable set is empty")
        object.__setattr__(self, "channel_names", tuple(names))
        object.__setattr__(self, "channel_index", {n: i for i, n in enumerate(names)})

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def surface_channels(self) -> list:
        return [self.channel_index[s] for s in self.surface]

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "VariableSet":
        atmo: dict = {}
        surface = []
        for n in names:
            if "@" in n:
                var, lev = n.split("@", 1)
                atmo.setdefault(var, []).append(int(lev))
            else:
                surface.append(n)
        vs = cls(tuple(atmo.items()), tuple(surface))
        if vs.channel_names != tuple(names):
            raise ConfigError(f"channel names {list(names)} are not in canonical order")
        return vs

    @classmethod
    def full(cls) -> "VariableSet":
        """Five variables on 13 levels plus four surface fields (69 channels)."""
        return cls(tuple((v, FULL_LEVELS) for v in ("z", "r", "t", "u", "v")),
                   ("2t", "10u", "10v", "msl"))

    @classmethod
    def desk(cls) -> "VariableSet":
        """One atmospheric variable on 4 levels plus four surface fields (8 channels)."""
        return cls((("z", (850, 700, 500, 250)),), ("2t", "10u", "10v", "msl"))
