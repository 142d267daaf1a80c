import itertools

import numpy as np
import pytest

from puyun import tensor as T
from puyun.errors import ConfigError, NumericError, ShapeError, UsageError
from puyun.gradcheck import check_primitives
from puyun.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------- Tensor basics

def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_raises():
    big = Tensor(np.full((1, 2, 2), 3e38, dtype=np.float32))
    with pytest.raises(NumericError):
        T.add(big, big)


def test_backward_requires_scalar():
    x = t64(np.ones((1, 2, 2)), grad=True)
    with pytest.raises(UsageError):
        T.backward(T.scale(x, 2.0))


def test_sum_grad_is_ones(rng):
    x = t64(rng.standard_normal((2, 3, 4)), grad=True)
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_sum_of_squares_grad_is_2x(rng):
    x = t64(rng.standard_normal((2, 3, 4)), grad=True)
    T.backward(T.sum_all(T.hadamard(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_tape_topological_and_visits_once(rng):
    x = t64(rng.standard_normal((1, 2, 2)), grad=True)
    y = T.gelu(x)
    z = T.add(y, y)  # y used twice
    loss = T.sum_all(T.hadamard(z, x))
    tape = T.Tape.from_output(loss)
    seen = set()
    for node in tape.ops:
        for inp in node._node.inputs:
            if inp._node is not None:
                assert id(inp) in seen
        assert id(node) not in seen
        seen.add(id(node))


def test_shared_subexpression_gradient(rng):
    x = t64(rng.standard_normal((1, 2, 3)), grad=True)
    y = T.scale(x, 3.0)
    T.backward(T.sum_all(T.add(y, y)))
    np.testing.assert_allclose(x.grad, np.full(x.shape, 6.0))


def test_double_backward_with_retain_is_bitwise_identical(rng):
    x = t64(rng.standard_normal((2, 5, 6)), grad=True)
    k = t64(rng.standard_normal((2, 3, 3)), grad=True)
    loss = T.sum_all(T.gelu(T.conv2d_depthwise(x, k, 2)))
    T.backward(loss, retain=True)
    g1 = x.grad.copy(), k.grad.copy()
    x.zero_grad()
    k.zero_grad()
    T.backward(loss)
    assert np.array_equal(g1[0], x.grad) and np.array_equal(g1[1], k.grad)


def test_no_grad_records_nothing(rng):
    x = t64(rng.standard_normal((1, 2, 2)), grad=True)
    with T.no_grad():
        y = T.gelu(x)
    assert y._node is None and not y.requires_grad


# ---------------------------------------------------------------- elementwise

def test_hadamard_examples():
    a = t64([1.0, 2.0])
    assert np.array_equal(T.hadamard(a, t64([3.0, 4.0])).data, [3.0, 8.0])
    assert np.array_equal(T.hadamard(a, t64([1.0, 1.0])).data, a.data)
    assert np.array_equal(T.hadamard(a, t64([0.0, 0.0])).data, [0.0, 0.0])


def test_shape_mismatch_errors():
    with pytest.raises(ShapeError):
        T.hadamard(t64(np.ones(2)), t64(np.ones(3)))
    with pytest.raises(ShapeError):
        T.add(t64(np.ones(2)), t64(np.ones(3)))


def test_gelu_values():
    assert T.gelu(t64([0.0])).data[0] == 0.0
    assert abs(T.gelu(t64([3.0])).data[0] - 2.9964) < 5e-5
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(0.7978845608 * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(t64(x)).data, ref, rtol=1e-12, atol=1e-15)


def test_add_zero_identity(rng):
    x = rng.standard_normal((2, 3, 3))
    assert np.array_equal(T.add(t64(x), t64(np.zeros_like(x))).data, x)


def test_abs_subgradient_zero_at_zero():
    x = t64([-2.0, 0.0, 3.0], grad=True)
    T.backward(T.sum_all(T.absolute(x)))
    assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])


# ---------------------------------------------------------------- convolution

def naive_depthwise(x, k, d):
    C, H, W = x.shape
    r = k.shape[1] // 2
    out = np.zeros_like(x)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                s = 0.0
                for a in range(-r, r + 1):
                    for b in range(-r, r + 1):
                        ii = min(max(i + a * d, 0), H - 1)
                        jj = (j + b * d) % W
                        s += k[c, a + r, b + r] * x[c, ii, jj]
                out[c, i, j] = s
    return out


def test_depthwise_zero_input(rng):
    out = T.conv2d_depthwise(t64(np.zeros((2, 4, 5))), t64(rng.standard_normal((2, 3, 3))))
    assert not out.data.any()


def test_depthwise_impulse_gives_flipped_kernel(rng):
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1.0
    k = rng.standard_normal((1, 3, 3))
    out = T.conv2d_depthwise(t64(x), t64(k)).data
    assert out[0, 1, 1] == k[0, 1, 1]
    np.testing.assert_array_equal(out[0], k[0, ::-1, ::-1])


def test_depthwise_dilation_tap_offsets():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    k = np.arange(1.0, 10.0).reshape(1, 3, 3)
    out = T.conv2d_depthwise(t64(x), t64(k), dilation=2).data[0]
    nz = set(zip(*np.nonzero(out)))
    assert nz == {(i, j) for i in (0, 2, 4) for j in (0, 2, 4)}
    assert out[0, 0] == k[0, 2, 2] and out[4, 4] == k[0, 0, 0] and out[2, 2] == k[0, 1, 1]


def test_depthwise_identity_kernel(rng):
    x = rng.standard_normal((3, 6, 7))
    for ksz in (1, 3, 5):
        k = np.zeros((3, ksz, ksz))
        k[:, ksz // 2, ksz // 2] = 1.0
        for d in (1, 2):
            assert np.array_equal(T.conv2d_depthwise(t64(x), t64(k), d).data, x)


@pytest.mark.parametrize("shape,ksz,d", [((2, 4, 5), 3, 1), ((1, 6, 7), 3, 2), ((2, 5, 8), 5, 1)])
def test_depthwise_matches_loop_oracle(rng, shape, ksz, d):
    x = rng.standard_normal(shape)
    k = rng.standard_normal((shape[0], ksz, ksz))
    np.testing.assert_allclose(T.conv2d_depthwise(t64(x), t64(k), d).data,
                               naive_depthwise(x, k, d), rtol=1e-12, atol=1e-12)


def test_depthwise_errors():
    with pytest.raises(ConfigError):
        T.conv2d_depthwise(t64(np.ones((1, 4, 4))), t64(np.ones((1, 2, 2))))
    with pytest.raises(ConfigError):
        T.conv2d_depthwise(t64(np.ones((1, 4, 4))), t64(np.ones((1, 3, 3))), dilation=0)
    with pytest.raises(NumericError):
        T.conv2d_depthwise(t64(np.full((1, 3, 3), np.nan)), t64(np.ones((1, 3, 3))))


def test_pointwise_examples(rng):
    x = rng.standard_normal((2, 3, 4))
    out = T.conv2d_pointwise(t64(x), t64(np.eye(2)), t64(np.zeros(2))).data
    assert np.array_equal(out, x)
    uv = T.conv2d_pointwise(t64(x), t64([[1.0, 1.0]]), t64([0.0])).data
    np.testing.assert_array_equal(uv[0], x[0] + x[1])


def test_pointwise_loop_oracle(rng):
    x = rng.standard_normal((2, 2, 2))
    w = rng.standard_normal((3, 2))
    b = rng.standard_normal(3)
    ref = np.zeros((3, 2, 2))
    for o in range(3):
        for i in range(2):
            for j in range(2):
                ref[o, i, j] = b[o] + sum(w[o, c] * x[c, i, j] for c in range(2))
    np.testing.assert_allclose(T.conv2d_pointwise(t64(x), t64(w), t64(b)).data, ref, rtol=1e-6)


def test_pointwise_dim_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d_pointwise(t64(np.ones((2, 2, 2))), t64(np.ones((3, 4))), t64(np.ones(3)))


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_gives_zero():
    x = np.broadcast_to(np.arange(6.0).reshape(1, 2, 3), (4, 2, 3)).copy()
    out = T.layer_norm(t64(x), t64(np.ones(4)), t64(np.zeros(4))).data
    assert np.abs(out).max() == 0.0


def test_layer_norm_two_pass_oracle(rng):
    x = rng.standard_normal((5, 3, 4)) * 3 + 1
    g = rng.standard_normal(5)
    b = rng.standard_normal(5)
    out = T.layer_norm(t64(x), t64(np.ones(5)), t64(np.zeros(5)), eps=1e-5).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1.0, rtol=1e-4)
    mean = x.sum(axis=0) / 5
    var = ((x - mean) ** 2).sum(axis=0) / 5
    ref = g[:, None, None] * (x - mean) / np.sqrt(var + 1e-5) + b[:, None, None]
    np.testing.assert_allclose(T.layer_norm(t64(x), t64(g), t64(b)).data, ref, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------- rearrangement

def test_pixel_shuffle_block_order():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)
    np.testing.assert_array_equal(T.pixel_shuffle(t64(x), 2).data[0], [[1.0, 2.0], [3.0, 4.0]])


def test_pixel_shuffle_r1_identity(rng):
    x = rng.standard_normal((3, 2, 2))
    assert np.array_equal(T.pixel_shuffle(t64(x), 1).data, x)


def test_pixel_shuffle_indivisible():
    with pytest.raises(ShapeError):
        T.pixel_shuffle(t64(np.ones((3, 2, 2))), 2)


def test_shuffle_unshuffle_exhaustive(rng):
    for r, C, H, W in itertools.product((1, 2, 3), (1, 2), (1, 2, 3), (1, 2, 3)):
        x = rng.standard_normal((C * r * r, H, W))
        y = T.pixel_shuffle(t64(x), r)
        assert y.shape == (C, H * r, W * r)
        assert np.array_equal(T.pixel_unshuffle(y, r).data, x)
        z = rng.standard_normal((C, H * r, W * r))
        assert np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(t64(z), r), r).data, z)


def test_resize_examples(rng):
    x = rng.standard_normal((2, 3, 4))
    assert np.array_equal(T.resize_bilinear(t64(x), 3, 4).data, x)
    const = np.full((1, 3, 3), 2.5)
    np.testing.assert_allclose(T.resize_bilinear(t64(const), 7, 5).data, 2.5, rtol=0, atol=1e-14)
    ramp = np.array([0.0, 1.0]).reshape(1, 1, 2)
    np.testing.assert_allclose(T.resize_bilinear(t64(ramp), 1, 3).data[0, 0], [0.0, 0.5, 1.0])


def test_concat_examples(rng):
    a = t64(rng.standard_normal((1, 2, 3)), grad=True)
    assert T.concat_channels([a]) is a
    b = t64(rng.standard_normal((1, 2, 3)), grad=True)
    c = T.concat_channels([a, b])
    assert c.shape == (2, 2, 3)
    w = rng.standard_normal(c.shape)
    T.backward(T.sum_all(T.mul_const(c, w)))
    np.testing.assert_array_equal(a.grad, w[:1])
    np.testing.assert_array_equal(b.grad, w[1:])
    with pytest.raises(ShapeError):
        T.concat_channels([a, t64(np.ones((1, 3, 3)))])


# ---------------------------------------------------------------- gradient checks

def test_finite_difference_linear_and_quadratic(rng):
    x = t64(rng.standard_normal((2, 3, 3)))
    w = rng.standard_normal((2, 3, 3))
    assert T.finite_difference_check(lambda a: T.sum_all(T.mul_const(a, w)), x) < 1e-9
    assert T.finite_difference_check(lambda a: T.sum_all(T.square(a)), x) < 1e-9


def test_finite_difference_detects_wrong_gradient(rng):
    def bad(a):
        # forward is sum(a^2) but the recorded gradient is that of sum(a)
        return T._make("bad", np.sum(a.data ** 2), (a,), lambda g: (g * np.ones_like(a.data),))
    assert T.finite_difference_check(bad, t64(rng.standard_normal((1, 2, 2)) + 3)) > 0.1


@pytest.mark.parametrize("seed", [0, 1])
def test_every_primitive_passes_gradcheck(seed):
    errs = check_primitives(h=1e-3, seed=seed)
    bad = {k: v for k, v in errs.items() if not v <= 1e-4}
    assert not bad, bad
    # every primitive appears on three shapes
    kinds = {k.split("[")[0] for k in errs}
    for kind in kinds:
        assert sum(k.split("[")[0] == kind for k in errs) >= 3


def test_ops_are_pure(rng):
    x = rng.standard_normal((2, 5, 6)).astype(np.float32)
    k = rng.standard_normal((2, 3, 3)).astype(np.float32)
    a = T.conv2d_depthwise(Tensor(x), Tensor(k), 2).data
    b = T.conv2d_depthwise(Tensor(x), Tensor(k), 2).data
    assert np.array_equal(a, b)
