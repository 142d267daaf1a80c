"""
Dense tensors with a reverse-mode gradient tape.

Every tensor wraps a contiguous numpy array. Operations are pure functions
that return new tensors; when any input requires a gradient, the output keeps
a reference to the node that produced it. ``backward`` linearises the graph
into a :class:`Tape` (topological order) and walks it in reverse exactly once.

Spatial tensors are laid out ``[C, H, W]`` with H the latitude axis and W the
longitude axis. Convolution padding replicates edge rows in latitude and wraps
around in longitude.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError, ConfigError, UsageError

DEFAULT_DTYPE = np.float32

_GELU_C = 0.7978845608
_GELU_A = 0.044715

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording nodes (inference)."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class _Node:
    __slots__ = ("name", "inputs", "backward")

    def __init__(self, name, inputs, backward):
        self.name = name
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A dense array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, np.ndarray) or arr.dtype not in (np.float32, np.float64):
            # float arrays keep their precision; lists and ints get the default
            arr = arr.astype(DEFAULT_DTYPE)
        arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain: bool = False) -> None:
        backward(self, retain=retain)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: hadamard(self, other) if isinstance(other, Tensor) else scale(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")


def _make(name: str, out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    _check_finite(out, name)
    req = grad_enabled() and any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, req)
    if req:
        t._node = _Node(name, inputs, backward)
    return t


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------
# tape


class Tape:
    """Recorded primitive ops in topological order (inputs before outputs)."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in reversed(t._node.inputs):
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor, retain: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.ops):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if not retain:
        for t in tape.ops:
            t._node = None


# ----------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _make("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a``; no gradient to ``c``."""
    c = np.asarray(c, dtype=a.data.dtype)
    out = a.data * c
    if out.shape != a.shape:
        raise ShapeError(f"mul_const: {c.shape} does not broadcast into {a.shape}")
    return _make("mul_const", out, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    dt = xd.dtype.type
    inner = dt(_GELU_C) * (xd + dt(_GELU_A) * xd * xd * xd)
    th = np.tanh(inner)
    out = dt(0.5) * xd * (dt(1) + th)

    def bw(g):
        dinner = dt(_GELU_C) * (dt(1) + dt(3 * _GELU_A) * xd * xd)
        d = dt(0.5) * (dt(1) + th) + dt(0.5) * xd * (dt(1) - th * th) * dinner
        return (g * d,)

    return _make("gelu", out, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    # sign(0) == 0: subgradient zero at ties
    xd = x.data
    return _make("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (g * (xd + xd),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    inv = x.data.dtype.type(1.0 / n)
    return _make("mean", np.asarray(x.data.sum() * inv, dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g * inv, dtype=g.dtype),))


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D tensor."""
    out = np.array([x.data for x in xs], dtype=xs[0].dtype)
    return _make("stack", out, tuple(xs), lambda g: tuple(np.asarray(gi) for gi in g))


# ----------------------------------------------------------------------------
# channel / spatial rearrangement


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    spatial = xs[0].shape[1:]
    for x in xs:
        if x.data.ndim != 3 or x.shape[1:] != spatial:
            raise ShapeError(f"concat_channels: spatial mismatch {x.shape} vs {spatial}")
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[0] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=0)
    return _make("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=0)))


def crop_rows(x: Tensor, n_rows: int) -> Tensor:
    """Keep the first ``n_rows`` latitude rows."""
    H = x.shape[1]
    if not 1 <= n_rows <= H:
        raise ShapeError(f"crop_rows: cannot keep {n_rows} of {H} rows")
    if n_rows == H:
        return x

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :n_rows] = g
        return (full,)

    return _make("crop_rows", np.ascontiguousarray(x.data[:, :n_rows]), (x,), bw)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[C*r*r, H, W] -> [C, H*r, W*r]; channel c*r*r + i*r + j lands at (h*r+i, w*r+j)."""
    Cr, H, W = x.shape
    if r < 1 or Cr % (r * r):
        raise ShapeError(f"pixel_shuffle: {Cr} channels not divisible by r^2={r * r}")
    if r == 1:
        return x
    C = Cr // (r * r)
    out = x.data.reshape(C, r, r, H, W).transpose(0, 3, 1, 4, 2).reshape(C, H * r, W * r)
    return _make("pixel_shuffle", np.ascontiguousarray(out), (x,),
                 lambda g: (_unshuffle(g, r),))


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    C, Hr, Wr = a.shape
    H, W = Hr // r, Wr // r
    out = a.reshape(C, H, r, W, r).transpose(0, 2, 4, 1, 3).reshape(C * r * r, H, W)
    return np.ascontiguousarray(out)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`: [C, H*r, W*r] -> [C*r*r, H, W]."""
    C, Hr, Wr = x.shape
    if r < 1 or Hr % r or Wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial {Hr}x{Wr} not divisible by {r}")
    if r == 1:
        return x

    def bw(g):
        H, W = g.shape[1:]
        out = g.reshape(C, r, r, H, W).transpose(0, 3, 1, 4, 2).reshape(C, H * r, W * r)
        return (np.ascontiguousarray(out),)

    return _make("pixel_unshuffle", _unshuffle(x.data, r), (x,), bw)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape [n_out, n_in]."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interp_matrix: sizes must be positive ({n_in}->{n_out})")
    M = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        M[:, 0] = 1.0
        return M.astype(dtype)
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        i0 = min(int(math.floor(src)), n_in - 2)
        frac = src - i0
        M[i, i0] += 1.0 - frac
        M[i, i0 + 1] += frac
    return M.astype(dtype)


def resize_bilinear(x: Tensor, H2: int, W2: int) -> Tensor:
    C, H, W = x.shape
    if H2 < 1 or W2 < 1:
        raise ShapeError(f"resize_bilinear: target {H2}x{W2} must be positive")
    if (H2, W2) == (H, W):
        return x
    Ry = interp_matrix(H, H2, x.dtype)
    Rx = interp_matrix(W, W2, x.dtype)
    out = np.matmul(np.matmul(Ry, x.data), Rx.T)
    return _make("resize_bilinear", out, (x,),
                 lambda g: (np.matmul(np.matmul(Ry.T, g), Rx),))


# ----------------------------------------------------------------------------
# convolutions and normalisation


def _pad_maps(H: int, W: int, pad: int, dtype):
    rows = np.clip(np.arange(-pad, H + pad), 0, H - 1)
    cols = np.mod(np.arange(-pad, W + pad), W)
    R = np.zeros((H + 2 * pad, H), dtype=dtype)
    R[np.arange(H + 2 * pad), rows] = 1
    Q = np.zeros((W + 2 * pad, W), dtype=dtype)
    Q[np.arange(W + 2 * pad), cols] = 1
    return rows, cols, R, Q


def pad_geo(x: np.ndarray, pad: int) -> np.ndarray:
    """Replicate-pad latitude rows, wrap-pad longitude columns."""
    if pad == 0:
        return x
    rows, cols, _, _ = _pad_maps(x.shape[1], x.shape[2], pad, x.dtype)
    return x[:, rows][:, :, cols]


def conv2d_depthwise(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Per-channel 'same' cross-correlation with geographic padding."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_depthwise: expected [C,H,W], got {x.shape}")
    C, H, W = x.shape
    if kernel.data.ndim != 3 or kernel.shape[0] != C or kernel.shape[1] != kernel.shape[2]:
        raise ShapeError(f"conv2d_depthwise: kernel {kernel.shape} incompatible with {x.shape}")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"conv2d_depthwise: kernel size must be odd, got {k}")
    if dilation < 1:
        raise ConfigError(f"conv2d_depthwise: dilation must be >= 1, got {dilation}")
    pad = dilation * (k - 1) // 2
    rows, cols, R, Q = _pad_maps(H, W, pad, x.dtype)
    xp = x.data[:, rows][:, :, cols]
    kd = kernel.data
    out = np.zeros((C, H, W), dtype=np.result_type(x.dtype, kernel.dtype))
    for a in range(k):
        for b in range(k):
            ra, cb = a * dilation, b * dilation
            out += kd[:, a, b, None, None] * xp[:, ra:ra + H, cb:cb + W]

    def bw(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for a in range(k):
                for b in range(k):
                    ra, cb = a * dilation, b * dilation
                    gk[:, a, b] = (g * xp[:, ra:ra + H, cb:cb + W]).sum(axis=(1, 2))
        if x.requires_grad:
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for a in range(k):
                for b in range(k):
                    ra, cb = a * dilation, b * dilation
                    gp[:, ra:ra + H, cb:cb + W] += kd[:, a, b, None, None] * g
            gx = np.matmul(np.matmul(R.T, gp), Q)
        return gx, gk

    return _make("conv2d_depthwise", out, (x, kernel), bw)


def conv2d_pointwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution: out[o] = sum_i weight[o, i] * x[i] + bias[o]."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_pointwise: expected [C,H,W], got {x.shape}")
    Cin, H, W = x.shape
    if weight.data.ndim != 2 or weight.shape[1] != Cin:
        raise ShapeError(f"conv2d_pointwise: weight {weight.shape} vs input channels {Cin}")
    Cout = weight.shape[0]
    if bias.shape != (Cout,):
        raise ShapeError(f"conv2d_pointwise: bias {bias.shape} vs {Cout} outputs")
    x2 = x.data.reshape(Cin, H * W)
    wd = weight.data
    out = (wd @ x2).reshape(Cout, H, W) + bias.data[:, None, None]

    def bw(g):
        g2 = g.reshape(Cout, H * W)
        gx = (wd.T @ g2).reshape(Cin, H, W) if x.requires_grad else None
        gw = g2 @ x2.T if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        return gx, gw, gb

    return _make("conv2d_pointwise", out, (x, weight, bias), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise across channels at every grid point, then scale and shift."""
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    C = x.shape[0]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({C},)")
    xd = x.data
    dt = xd.dtype.type
    mu = xd.mean(axis=0)
    xc = xd - mu
    var = (xc * xc).mean(axis=0)
    inv = dt(1) / np.sqrt(var + dt(eps))
    xhat = xc * inv
    gd = gamma.data[:, None, None]
    out = gd * xhat + beta.data[:, None, None]

    def bw(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        if gamma.requires_grad:
            ggam = (g * xhat).sum(axis=(1, 2))
        if beta.requires_grad:
            gbet = g.sum(axis=(1, 2))
        return gx, ggam, gbet

    return _make("layer_norm", out, (x, gamma, beta), bw)


# ----------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    f: Callable[..., Tensor],
    inputs,
    h: float = 1e-3,
    samples: Optional[int] = None,
    seed: int = 0,
    floor: Optional[float] = None,
) -> float:
    """Max relative error between backprop gradients and central differences.

    ``inputs`` is a Tensor or a sequence of Tensors passed positionally to
    ``f``, which must return a scalar. When ``samples`` is given only that
    many randomly chosen coordinates (across all inputs) are perturbed.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` defaults to 1e-3 of the largest analytic gradient magnitude so
    coordinates where the derivative crosses zero are judged against the
    gradient scale instead of against their own vanishing value.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    base = [np.array(t.data, copy=True) for t in inputs]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    loss = f(*leaves)
    backward(loss)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]
    if floor is None:
        gmax = max(float(np.abs(a).max()) for a in analytic)
        floor = max(1e-3 * gmax, 1e-12)

    coords = [(k, idx) for k, b in enumerate(base) for idx in range(b.size)]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def evaluate(k, idx, delta):
        arrs = [b if j != k else b.copy() for j, b in enumerate(base)]
        arrs[k].reshape(-1)[idx] += delta
        with no_grad():
            return float(f(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for k, idx in coords:
        num = (evaluate(k, idx, h) - evaluate(k, idx, -h)) / (2 * h)
        ana = float(analytic[k].reshape(-1)[idx])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst


def parameters_finite(named: Iterable) -> list:
    """Names of arrays in ``named`` (name, array) pairs containing NaN/Inf."""
    return [name for name, arr in named if not np.isfinite(np.asarray(arr)).all()]
