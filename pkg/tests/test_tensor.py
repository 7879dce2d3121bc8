import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csta import tensor as tn
from csta.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv2d ---------------------------------------------------------------------

def direct_conv(x, w, b, stride, pad):
    """Loop-per-output oracle."""
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def test_conv_scalar_kernel_scales():
    out = tn.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_ones_kernel_dot_product():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = tn.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(10.0)


def test_conv_dirac_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 5, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1.0
    out = tn.conv2d(Tensor(x), Tensor(k), padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_matches_direct_loop(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 2))
    b = rng.normal(size=3)
    out = tn.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, direct_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_output_shape_formula():
    out = tn.conv2d(Tensor(np.zeros((1, 9, 10))), Tensor(np.zeros((4, 1, 3, 4))), stride=2, padding=1)
    assert out.shape == (4, (9 + 2 - 3) // 2 + 1, (10 + 2 - 4) // 2 + 1)


def test_conv_channel_mismatch_raises():
    with pytest.raises(ValueError, match="channel"):
        tn.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_larger_than_input_raises():
    with pytest.raises(ValueError):
        tn.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- adaptive average pooling -----------------------------------------------------

def window_pool_oracle(x, ht, wt):
    c, h, w = x.shape
    out = np.zeros((c, ht, wt))
    for i in range(ht):
        r0, r1 = math.floor(i * h / ht), math.ceil((i + 1) * h / ht)
        for j in range(wt):
            c0, c1 = math.floor(j * w / wt), math.ceil((j + 1) * w / wt)
            out[:, i, j] = x[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out


def test_adaptive_pool_identity_target():
    x = np.random.default_rng(1).normal(size=(2, 4, 5))
    np.testing.assert_allclose(tn.adaptive_avg_pool2d(t64(x), (4, 5)).data, x)


def test_adaptive_pool_column_three_to_two():
    a, b, c = 1.0, 4.0, 10.0
    out = tn.adaptive_avg_pool2d(t64([[[a], [b], [c]]]), (2, 1))
    np.testing.assert_allclose(out.data[0, :, 0], [(a + b) / 2, (b + c) / 2])


def test_adaptive_pool_global_mean_of_ones():
    assert tn.adaptive_avg_pool2d(Tensor(np.ones((1, 4, 4))), (1, 1)).data.item() == 1.0


@pytest.mark.parametrize("shape,target", [((1, 7, 5), (3, 2)), ((2, 5, 9), (4, 4)), ((1, 3, 3), (5, 1)),
                                          ((3, 10, 1), (7, 1))])
def test_adaptive_pool_matches_window_formula(shape, target):
    x = np.random.default_rng(2).normal(size=shape)
    np.testing.assert_allclose(tn.adaptive_avg_pool2d(t64(x), target).data, window_pool_oracle(x, *target),
                               rtol=1e-12, atol=1e-12)


def test_adaptive_pool_rejects_zero_target():
    with pytest.raises(ValueError):
        tn.adaptive_avg_pool2d(Tensor(np.ones((1, 3, 3))), (0, 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-100, 100)))
def test_adaptive_pool_to_one_is_mean(x):
    out = tn.adaptive_avg_pool2d(t64(x), (1, 1)).data[:, 0, 0]
    np.testing.assert_allclose(out, x.mean(axis=(1, 2)), rtol=1e-12, atol=1e-9)


# -- max pooling ---------------------------------------------------------------------

def test_max_pool_ceil_mode_keeps_border():
    x = np.arange(15, dtype=np.float32).reshape(1, 3, 5)
    out = tn.max_pool2d(Tensor(x), 2, 2, ceil_mode=True)
    assert out.shape == (1, 2, 3)
    np.testing.assert_array_equal(out.data[0], [[6, 8, 9], [11, 13, 14]])


def test_max_pool_single_pixel():
    assert tn.max_pool2d(Tensor(np.full((2, 1, 1), 3.0)), 2).shape == (2, 1, 1)


# -- softmax -----------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(tn.softmax(t64([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3)


def test_softmax_closed_form():
    np.testing.assert_allclose(tn.softmax(t64([0.0, math.log(2.0)]), 0).data, [1 / 3, 2 / 3], rtol=1e-12)


def test_softmax_large_values_are_stable():
    out = tn.softmax(Tensor(np.array([1000.0, 1000.0], dtype=np.float32)), 0)
    np.testing.assert_allclose(out.data, [0.5, 0.5])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-30, 30, width=32)),
       st.floats(-50, 50), st.sampled_from([0, 1]))
def test_softmax_sums_to_one_and_shift_invariant(x, c, axis):
    s = tn.softmax(Tensor(x), axis).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-6)
    shifted = tn.softmax(Tensor((x.astype(np.float64) + c)), axis).data
    np.testing.assert_allclose(shifted, s, atol=1e-6)


# -- layer norm -------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = tn.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_two_values():
    out = tn.layer_norm(t64([[1.0, -1.0]]), eps=1e-6).data[0]
    expected = 1.0 / math.sqrt(1.0 + 1e-6)
    np.testing.assert_allclose(out, [expected, -expected], rtol=1e-12)


def test_layer_norm_affine_only():
    x = np.random.default_rng(3).normal(size=(3, 4))
    out = tn.layer_norm(t64(x), t64(np.zeros(4)), t64(np.full(4, 0.25)))
    np.testing.assert_allclose(out.data, 0.25)


def test_layer_norm_moments():
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(6, 32))
    out = tn.layer_norm(t64(x)).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)


# -- dropout ---------------------------------------------------------------------

def test_dropout_rate_zero_is_identity():
    x = Tensor(np.arange(6.0))
    assert tn.dropout(x, 0.0, True, np.random.default_rng(0)) is x


def test_dropout_inference_is_identity():
    x = Tensor(np.arange(6.0))
    assert tn.dropout(x, 0.6, False) is x


def test_dropout_rejects_rate_one():
    with pytest.raises(ValueError):
        tn.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


def test_dropout_survivor_fraction_binomial():
    n, rate = 10_000, 0.6
    out = tn.dropout(Tensor(np.ones(n, dtype=np.float32)), rate, True, np.random.default_rng(0)).data
    survivors = np.count_nonzero(out)
    sigma = math.sqrt(n * rate * (1 - rate))
    assert abs(survivors - n * (1 - rate)) < 3 * sigma
    np.testing.assert_allclose(out[out != 0], 1.0 / (1.0 - rate), rtol=1e-6)


def test_dropout_deterministic_given_seed():
    x = Tensor(np.ones(100))
    a = tn.dropout(x, 0.5, True, np.random.default_rng(9)).data
    b = tn.dropout(x, 0.5, True, np.random.default_rng(9)).data
    np.testing.assert_array_equal(a, b)


# -- autodiff -------------------------------------------------------------------------

def test_sum_of_squares_gradient_exact():
    x = Tensor(np.array([1.0, -2.0, 3.5], dtype=np.float32), requires_grad=True)
    tn.tsum(tn.square(x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        tn.mul(x, 2.0).backward()


def test_shared_subexpression_gradient_accumulates():
    x = t64([2.0], grad=True)
    y = tn.mul(x, x)
    tn.tsum(tn.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_skips_graph():
    x = t64([1.0], grad=True)
    with tn.no_grad():
        y = tn.mul(x, 3.0)
    assert not y.requires_grad


def test_conv_sigmoid_sum_grad_float32():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 4, 4)).astype(np.float32))
    w = Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32))
    b = Tensor(rng.normal(size=2).astype(np.float32))
    # float32 central differences carry ~1e-4 absolute noise, so compare against a unit floor;
    # a smooth activation keeps kinks out of the probe interval
    err = tn.grad_check(lambda x, w, b: tn.tsum(tn.sigmoid(tn.conv2d(x, w, b, padding=1))), [x, w, b], h=1e-2,
                        floor=1.0)
    assert err < 1e-3


def test_conv_relu_sum_grad_float64():
    rng = np.random.default_rng(5)
    x, w, b = t64(rng.normal(size=(1, 4, 4))), t64(rng.normal(size=(2, 1, 3, 3))), t64(rng.normal(size=2))
    assert tn.grad_check(lambda x, w, b: tn.tsum(tn.relu(tn.conv2d(x, w, b, padding=1))), [x, w, b]) < 1e-3


def test_softmax_mse_chain_grad():
    rng = np.random.default_rng(6)
    x = t64(rng.normal(size=(4, 5)))
    target = rng.uniform(size=(4, 5))
    assert tn.grad_check(lambda x: tn.mse_loss(tn.softmax(x, 1), target), [x]) < 1e-3


def _weights(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


# Each entry builds a scalar function of float64 inputs; the fixed weighting
# tensor makes the loss depend on every output element with distinct weights.
OP_CASES = {
    "add": (lambda a, b: tn.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: tn.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: tn.mul(a, b), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: tn.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: tn.matmul(a, b), [(3, 2, 4), (4, 5)]),
    "linear": (lambda x, w, b: tn.linear(x, w, b), [(3, 4), (4, 2), (2,)]),
    "relu": (lambda a: tn.relu(a), [(3, 4)]),
    "sigmoid": (lambda a: tn.sigmoid(a), [(3, 4)]),
    "softmax0": (lambda a: tn.softmax(a, 0), [(3, 4)]),
    "softmax1": (lambda a: tn.softmax(a, 1), [(3, 4)]),
    "layer_norm": (lambda x, g, b: tn.layer_norm(x, g, b), [(3, 5), (5,), (5,)]),
    "concat": (lambda a, b: tn.concat([a, b], 1), [(2, 3), (2, 2)]),
    "transpose": (lambda a: tn.transpose(a, (1, 2, 0)), [(2, 3, 4)]),
    "reshape": (lambda a: tn.reshape(a, (6, 2)), [(3, 4)]),
    "index": (lambda a: a[1:, 0], [(3, 4)]),
    "conv2d": (lambda x, w, b: tn.conv2d(x, w, b, stride=2, padding=1), [(2, 5, 5), (3, 2, 3, 3), (3,)]),
    "max_pool": (lambda a: tn.max_pool2d(a, 2, 2), [(2, 5, 3)]),
    "adaptive_pool": (lambda a: tn.adaptive_avg_pool2d(a, (3, 2)), [(2, 5, 4)]),
    "mean": (lambda a: tn.reshape(tn.mean(a, 1), (3, 1)), [(3, 4)]),
    "square": (lambda a: tn.square(a), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_op_grad_check(name, seed):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(1000 * seed + len(name))
    inputs = [t64(rng.normal(size=s)) for s in shapes]
    if name == "max_pool":
        # distinct values keep the argmax stable under the +-h probe
        inputs = [t64(rng.permutation(np.arange(30.0)).reshape(shapes[0]) * 0.1)]
    with tn.no_grad():
        out_shape = fn(*inputs).shape
    weight = _weights(out_shape, seed)
    err = tn.grad_check(lambda *xs: tn.tsum(tn.mul(fn(*xs), weight)), inputs)
    assert err < 1e-3, f"{name}: max rel error {err}"


def test_nonfinite_result_raises():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        tn.mul(Tensor(np.array([np.float32(3e38)])), 10.0)
