"""
The PuYun network.

Pipeline for one step::

    (X^{t-1}, X^t) -> concat -> crop rows -> patch embed (pixel_unshuffle + 1x1)
      -> 4 stages of LKA blocks, each stage output layer-normalised
      -> concat(stage outputs..., patch embedding) -> 1x1 fuse
      -> merge head (1x1 -> pixel shuffle -> resize, or 1x1 -> resize)
      -> + X^t

Parameters are a plain ``dict`` of name -> float array in a fixed insertion
order; the same order is used by checkpoints and the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import formats
from . import tensor as T
from .errors import ConfigError, NumericError
from .grid import GridSpec, VariableSet, make_grid
from .tensor import Tensor

MERGE_MODES = ("resize", "pixelshuffle+resize")
LKA_MODES = ("direct", "decomposed")

# kernel K -> (depthwise size, dilated depthwise size, dilation)
LKA_DECOMPOSITION = {5: (3, 3, 2), 7: (3, 3, 3), 9: (5, 3, 3), 11: (5, 3, 4)}


def lka_decomposition(K: int) -> tuple:
    """Depthwise + dilated-depthwise pair approximating a KxK receptive field."""
    if K in LKA_DECOMPOSITION:
        return LKA_DECOMPOSITION[K]
    if K < 3 or K % 2 == 0:
        raise ConfigError(f"kernel size must be odd and >= 3, got {K}")
    d = max(2, int(round(K / 3)))
    dil_k = int(math.ceil(K / d))
    dil_k += 1 - dil_k % 2
    return (2 * d - 1, dil_k, d)


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    blocks_per_stage: tuple = (2, 2, 2, 2)
    kernel_K: int = 5
    lka_mode: str = "decomposed"
    patch: int = 4
    merge: str = "pixelshuffle+resize"
    droppath_rate: float = 0.0
    variables: VariableSet = field(default_factory=VariableSet.desk)
    grid: GridSpec = field(default_factory=lambda: make_grid(33, 64))
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 0:
            raise ConfigError(f"need exactly 4 non-negative stage sizes, got {self.blocks_per_stage}")
        if self.kernel_K % 2 == 0 or self.kernel_K < 1:
            raise ConfigError(f"kernel_K must be odd and positive, got {self.kernel_K}")
        if self.lka_mode not in LKA_MODES:
            raise ConfigError(f"lka_mode must be one of {LKA_MODES}")
        if self.lka_mode == "decomposed":
            lka_decomposition(self.kernel_K)
        if self.merge not in MERGE_MODES:
            raise ConfigError(f"merge must be one of {MERGE_MODES}")
        if self.patch < 1:
            raise ConfigError("patch must be >= 1")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ConfigError("droppath_rate must lie in [0, 1)")
        H, W = self.grid.shape
        if W % self.patch:
            raise ConfigError(f"longitude count {W} not divisible by patch {self.patch}")
        if H // self.patch < 1:
            raise ConfigError(f"{H} latitude rows too few for patch {self.patch}")

    @property
    def n_vars(self) -> int:
        return self.variables.n_channels

    @property
    def latent_shape(self) -> tuple:
        H, W = self.grid.shape
        return (H // self.patch, W // self.patch)

    @property
    def n_blocks(self) -> int:
        return sum(self.blocks_per_stage)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_json(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "blocks_per_stage": list(self.blocks_per_stage),
            "kernel_K": self.kernel_K,
            "lka_mode": self.lka_mode,
            "patch": self.patch,
            "merge": self.merge,
            "droppath_rate": self.droppath_rate,
            "norm_eps": self.norm_eps,
            "channels": list(self.variables.channel_names),
            "latitudes": self.grid.latitudes.tolist(),
            "n_lon": self.grid.n_lon,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        grid = GridSpec.from_latitudes(d["latitudes"], d["n_lon"]) if "latitudes" in d \
            else make_grid(d.get("n_lat", 33), d.get("n_lon", 64))
        variables = VariableSet.from_names(d["channels"]) if "channels" in d else VariableSet.desk()
        keys = ("embed_dim", "blocks_per_stage", "kernel_K", "lka_mode", "patch",
                "merge", "droppath_rate", "norm_eps")
        return cls(variables=variables, grid=grid, **{k: d[k] for k in keys if k in d})


def parameter_shapes(config: ModelConfig) -> dict:
    """Ordered name -> shape map for every trainable array."""
    E, C, p = config.embed_dim, config.n_vars, config.patch
    shapes = {"embed.weight": (E, 2 * C * p * p), "embed.bias": (E,)}
    for s, nb in enumerate(config.blocks_per_stage):
        for b in range(nb):
            pre = f"stage{s}.block{b}."
            shapes[pre + "proj_in.weight"] = (E, E)
            shapes[pre + "proj_in.bias"] = (E,)
            if config.lka_mode == "direct":
                K = config.kernel_K
                shapes[pre + "lka.dw"] = (E, K, K)
            else:
                k1, k2, _ = lka_decomposition(config.kernel_K)
                shapes[pre + "lka.dw"] = (E, k1, k1)
                shapes[pre + "lka.dw_dilated"] = (E, k2, k2)
            shapes[pre + "lka.pw.weight"] = (E, E)
            shapes[pre + "lka.pw.bias"] = (E,)
            shapes[pre + "proj_out.weight"] = (E, E)
            shapes[pre + "proj_out.bias"] = (E,)
        shapes[f"stage{s}.norm.gamma"] = (E,)
        shapes[f"stage{s}.norm.beta"] = (E,)
    shapes["fuse.weight"] = (E, 5 * E)
    shapes["fuse.bias"] = (E,)
    out_ch = C * p * p if config.merge == "pixelshuffle+resize" else C
    shapes["merge.weight"] = (out_ch, E)
    shapes["merge.bias"] = (out_ch,)
    return shapes


def count_parameters(params: dict) -> int:
    return int(sum(a.size for a in params.values()))


def _truncated_normal(rng, shape, std, dtype):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32,
                    zero_merge: bool = True) -> dict:
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit norm gains.

    With ``zero_merge`` the merge head starts at zero so the model predicts
    persistence (X^{t+1} = X^t) before training.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias") or name.endswith(".beta"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.startswith("merge.") and zero_merge:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _truncated_normal(rng, shape, 0.02, dtype)
    return params


def as_leaves(params: dict, requires_grad: bool = True) -> dict:
    return {k: Tensor._wrap(np.asarray(v), requires_grad) for k, v in params.items()}


# ----------------------------------------------------------------------------
# forward


def droppath_rates(config: ModelConfig) -> list:
    """Per-block drop probability rising linearly from 0 to ``droppath_rate``."""
    n = config.n_blocks
    if n <= 1:
        return [0.0] * n
    return [config.droppath_rate * i / (n - 1) for i in range(n)]


def patch_embed(x_prev: Tensor, x_curr: Tensor, p: dict, config: ModelConfig) -> Tensor:
    """Stack both states, trim rows to a patch multiple, strided patch conv."""
    x = T.concat_channels([x_prev, x_curr])
    Hp, _ = config.latent_shape
    x = T.crop_rows(x, Hp * config.patch)
    x = T.pixel_unshuffle(x, config.patch)
    return T.conv2d_pointwise(x, p["embed.weight"], p["embed.bias"])


def lka_attention(u: Tensor, p: dict, pre: str, config: ModelConfig) -> Tensor:
    if config.lka_mode == "direct":
        a = T.conv2d_depthwise(u, p[pre + "lka.dw"], 1)
    else:
        _, _, d = lka_decomposition(config.kernel_K)
        a = T.conv2d_depthwise(u, p[pre + "lka.dw"], 1)
        a = T.conv2d_depthwise(a, p[pre + "lka.dw_dilated"], d)
    return T.conv2d_pointwise(a, p[pre + "lka.pw.weight"], p[pre + "lka.pw.bias"])


def lka_block(x: Tensor, p: dict, pre: str, config: ModelConfig,
              keep: bool = True, keep_prob: float = 1.0) -> Tensor:
    """``x + DropPath(proj_out(u * LKA(u)))`` with ``u = gelu(proj_in(x))``."""
    if not keep:
        return x
    u = T.gelu(T.conv2d_pointwise(x, p[pre + "proj_in.weight"], p[pre + "proj_in.bias"]))
    g = T.hadamard(u, lka_attention(u, p, pre, config))
    br = T.conv2d_pointwise(g, p[pre + "proj_out.weight"], p[pre + "proj_out.bias"])
    if keep_prob < 1.0:
        br = T.scale(br, 1.0 / keep_prob)
    return T.add(x, br)


def merge_head(f: Tensor, p: dict, config: ModelConfig) -> Tensor:
    H, W = config.grid.shape
    m = T.conv2d_pointwise(f, p["merge.weight"], p["merge.bias"])
    if config.merge == "pixelshuffle+resize":
        m = T.pixel_shuffle(m, config.patch)
    return T.resize_bilinear(m, H, W)


def forward_tensors(x_prev: Tensor, x_curr: Tensor, p: dict, config: ModelConfig,
                    train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """One model step on tensors; ``p`` maps names to Tensors."""
    C, H, W = x_curr.shape
    if x_prev.shape != x_curr.shape or (C, H, W) != (config.n_vars,) + config.grid.shape:
        raise ConfigError(f"input states {x_prev.shape}/{x_curr.shape} do not match config "
                          f"({config.n_vars}, {H}, {W})")
    rates = droppath_rates(config) if train else [0.0] * config.n_blocks
    if train and rng is None and config.droppath_rate > 0:
        raise ConfigError("training-mode forward with DropPath needs an explicit rng")
    e = patch_embed(x_prev, x_curr, p, config)
    h = e
    outs = []
    i = 0
    for s, nb in enumerate(config.blocks_per_stage):
        for b in range(nb):
            rate = rates[i]
            keep = True
            if rate > 0:
                keep = bool(rng.random() >= rate)
            h = lka_block(h, p, f"stage{s}.block{b}.", config, keep, 1.0 - rate)
            i += 1
        outs.append(T.layer_norm(h, p[f"stage{s}.norm.gamma"], p[f"stage{s}.norm.beta"],
                                 config.norm_eps))
    f = T.conv2d_pointwise(T.concat_channels(outs + [e]), p["fuse.weight"], p["fuse.bias"])
    return T.add(x_curr, merge_head(f, p, config))


def forward(pair, params: dict, config: ModelConfig, mode: str = "eval",
            seed: Optional[int] = None) -> np.ndarray:
    """Predict X^{t+1} from ``pair = (X^{t-1}, X^t)`` (arrays or States)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x_prev, x_curr = (getattr(s, "values", s) for s in pair)
    dtype = next(iter(params.values())).dtype
    rng = np.random.default_rng(seed) if mode == "train" else None
    with T.no_grad():
        try:
            out = forward_tensors(Tensor(x_prev, dtype=dtype), Tensor(x_curr, dtype=dtype),
                                  as_leaves(params, False), config, mode == "train", rng)
        except NumericError as exc:
            raise diagnose(exc, params) from exc
    return out.data


def diagnose(exc: NumericError, params: dict) -> NumericError:
    bad = T.parameters_finite(params.items())
    where = f"; non-finite parameters: {bad}" if bad else "; all parameters finite"
    return NumericError(f"{exc}{where}")


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, config: ModelConfig, seed: int = 0,
                    extra: Optional[dict] = None) -> str:
    manifest = {
        "format": "puyun-checkpoint",
        "version": 1,
        "config": config.to_json(),
        "dtype": "float32",
        "seed": int(seed),
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    if extra:
        manifest["extra"] = extra
    return formats.write_checkpoint(path, manifest, list(params.values()))


def load_checkpoint(path):
    """Return ``(params, config, manifest)``."""
    manifest, arrays = formats.read_checkpoint(path)
    config = ModelConfig.from_json(manifest["config"])
    names = [e["name"] for e in manifest["parameters"]]
    params = dict(zip(names, arrays))
    expected = parameter_shapes(config)
    if list(expected) != names or any(tuple(expected[n]) != params[n].shape for n in names):
        raise ConfigError(f"checkpoint {path} parameters do not match its config")
    return params, config, manifest
