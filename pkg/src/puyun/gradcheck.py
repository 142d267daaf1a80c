"""
Finite-difference verification of every differentiable primitive and of the
full model, run in float64.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import ModelConfig, forward_tensors, init_parameters
from .tensor import Tensor
from .training import loss_mae

SHAPES = [(1, 3, 3), (2, 4, 5), (3, 6, 7)]


def _project(out: Tensor, rng) -> Tensor:
    """Reduce a tensor output to a scalar with fixed random weights."""
    w = rng.standard_normal(out.shape)
    return T.sum_all(T.mul_const(out, w))


def primitive_cases(rng):
    """Yield ``(name, f, inputs)`` for every primitive on several shapes."""
    f64 = np.float64

    def t(*shape):
        return Tensor(rng.standard_normal(shape), dtype=f64)

    for C, H, W in SHAPES:
        tag = f"{C}x{H}x{W}"
        proj_rng = np.random.default_rng(rng.integers(1 << 31))
        P = lambda out, r=proj_rng.integers(1 << 31): _project(out, np.random.default_rng(r))
        yield f"add[{tag}]", lambda a, b: P(T.add(a, b)), [t(C, H, W), t(C, H, W)]
        yield f"sub[{tag}]", lambda a, b: P(T.sub(a, b)), [t(C, H, W), t(C, H, W)]
        yield f"hadamard[{tag}]", lambda a, b: P(T.hadamard(a, b)), [t(C, H, W), t(C, H, W)]
        yield f"scale[{tag}]", lambda a: P(T.scale(a, 1.7)), [t(C, H, W)]
        yield f"gelu[{tag}]", lambda a: P(T.gelu(a)), [t(C, H, W)]
        yield f"square[{tag}]", lambda a: P(T.square(a)), [t(C, H, W)]
        yield f"mean[{tag}]", lambda a: T.mean_all(T.square(a)), [t(C, H, W)]
        for k, d in ((1, 1), (3, 1), (3, 2)):
            yield (f"conv2d_depthwise[{tag},k{k},d{d}]",
                   lambda x, w, d=d: P(T.conv2d_depthwise(x, w, d)), [t(C, H, W), t(C, k, k)])
        yield (f"conv2d_pointwise[{tag}]",
               lambda x, w, b: P(T.conv2d_pointwise(x, w, b)), [t(C, H, W), t(C + 1, C), t(C + 1)])
        # two channels make the normalised output sign-like; use >= 3
        Cn = C + 2
        yield (f"layer_norm[{Cn}x{H}x{W}]", lambda x, g, b: P(T.layer_norm(x, g, b)),
               [t(Cn, H, W), t(Cn), t(Cn)])
        yield (f"pixel_shuffle[{tag}]", lambda x: P(T.pixel_shuffle(x, 2)), [t(4 * C, H, W)])
        yield (f"pixel_unshuffle[{tag}]", lambda x: P(T.pixel_unshuffle(x, 2)),
               [t(C, 2 * H, 2 * W)])
        yield (f"resize_bilinear[{tag}]", lambda x: P(T.resize_bilinear(x, H + 2, 2 * W - 1)),
               [t(C, H, W)])
        yield (f"concat_channels[{tag}]", lambda a, b: P(T.concat_channels([a, b])),
               [t(C, H, W), t(C + 1, H, W)])
        yield (f"crop_rows[{tag}]", lambda x: P(T.crop_rows(x, H - 1)), [t(C, H + 1, W)])
        offset = rng.choice([-1.0, 1.0], size=(C, H, W)) * rng.uniform(0.5, 1.5, (C, H, W))
        yield f"abs[{tag}]", lambda a, o=offset: P(T.absolute(T.add(a, Tensor(o)))), [
            Tensor(rng.uniform(-0.2, 0.2, (C, H, W)), dtype=f64)]


def check_primitives(h: float = 1e-3, seed: int = 0) -> dict:
    """Max relative error per primitive case."""
    rng = np.random.default_rng(seed)
    return {name: T.finite_difference_check(f, inputs, h)
            for name, f, inputs in primitive_cases(rng)}


def check_model(config: ModelConfig, samples: int = 200, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of backprop through forward + latitude-weighted MAE.

    Merge-head weights are random (not zero) so every parameter influences the
    loss. The target sits 0.5..1.5 away from the initial prediction at every
    point so the perturbations never cross the kink of |.|.
    """
    rng = np.random.default_rng(seed)
    params = init_parameters(config, seed, dtype=np.float64, zero_merge=False)
    C = config.n_vars
    H, W = config.grid.shape
    x_prev = Tensor(rng.standard_normal((C, H, W)), dtype=np.float64)
    x_curr = Tensor(rng.standard_normal((C, H, W)), dtype=np.float64)
    names = list(params)
    with T.no_grad():
        base = forward_tensors(x_prev, x_curr, {k: Tensor(v) for k, v in params.items()}, config)
    offset = rng.choice([-1.0, 1.0], size=base.shape) * rng.uniform(0.5, 1.5, base.shape)
    target = Tensor(base.data + offset)

    def f(*leaves):
        pred = forward_tensors(x_prev, x_curr, dict(zip(names, leaves)), config)
        return loss_mae(pred, target, config.grid)

    return T.finite_difference_check(f, [Tensor(params[k]) for k in names], h,
                                     samples=samples, seed=seed)


def desk_gradcheck_config() -> ModelConfig:
    return ModelConfig(embed_dim=64, blocks_per_stage=(2, 2, 2, 2), kernel_K=5, patch=4)
