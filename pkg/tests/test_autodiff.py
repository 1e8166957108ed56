import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import CASES, make_case
from pvckit.autodiff import (
    Tape,
    Tensor,
    backward,
    check_gradients,
    concat,
    conv3d,
    conv3d_transpose,
    conv_output_shape,
    conv_transpose_output_shape,
    global_avg_pool,
    mean,
    no_grad,
    relu,
    sigmoid,
    sum_,
)
from pvckit.errors import ContractError, DimensionError, NonFiniteError


def conv_loop(x, w, b, pad, stride=(1, 1, 1)):
    n, c_in, d, h, wd = x.shape
    c_out, _, kd, kh, kw = w.shape
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    od, oh, ow = conv_output_shape((d, h, wd), (kd, kh, kw), pad, stride)
    out = np.zeros((n, c_out, od, oh, ow))
    for b_ in range(n):
        for o in range(c_out):
            for z in range(od):
                for y in range(oh):
                    for x_ in range(ow):
                        acc = b[o]
                        for i in range(c_in):
                            patch = xp[b_, i, z * stride[0]:z * stride[0] + kd, y * stride[1]:y * stride[1] + kh,
                                       x_ * stride[2]:x_ * stride[2] + kw]
                            acc += np.sum(patch * w[o, i])
                        out[b_, o, z, y, x_] = acc
    return out


def scatter_loop(x, w, b, stride=(1, 1, 1)):
    # transposed conv: each input voxel scatters w[o, i] into the output
    n, c_in, d, h, wd = x.shape
    c_out, _, kd, kh, kw = w.shape
    od, oh, ow = conv_transpose_output_shape((d, h, wd), (kd, kh, kw), 0, stride)
    out = np.zeros((n, c_out, od, oh, ow)) + b[None, :, None, None, None]
    for b_ in range(n):
        for i in range(c_in):
            for z in range(d):
                for y in range(h):
                    for x_ in range(wd):
                        v = x[b_, i, z, y, x_]
                        for o in range(c_out):
                            out[b_, o, z * stride[0]:z * stride[0] + kd, y * stride[1]:y * stride[1] + kh,
                                x_ * stride[2]:x_ * stride[2] + kw] += v * w[o, i]
    return out


def test_conv_scalar():
    y = conv3d(np.full((1, 1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1, 1), 3.0), np.array([1.0]))
    assert y.data.reshape(-1).tolist() == [7.0]


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 4, 5, 6))
    w = np.zeros((2, 2, 3, 3, 3))
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(conv3d(x, w, padding=1).data, x)


def test_conv_matches_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    got = conv3d(x, w, b).data
    ref = conv_loop(x, w, b, (0, 0, 0))
    assert np.max(np.abs(got - ref)) <= 1e-12 * max(1.0, np.max(np.abs(ref)))


@pytest.mark.parametrize("pad,stride", [((1, 0, 2), (1, 1, 1)), ((0, 1, 1), (2, 1, 2))])
def test_conv_padding_stride_loop(pad, stride):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 5, 4, 6))
    w = rng.normal(size=(2, 2, 2, 3, 3))
    b = rng.normal(size=2)
    got = conv3d(x, w, b, padding=pad, stride=stride).data
    np.testing.assert_allclose(got, conv_loop(x, w, b, pad, stride), rtol=1e-12, atol=1e-12)


def test_conv_shape_error_names_axis():
    with pytest.raises(DimensionError, match="H"):
        conv3d(np.zeros((1, 1, 5, 2, 5)), np.zeros((1, 1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        conv3d(np.zeros((1, 2, 5, 5, 5)), np.zeros((1, 3, 1, 1, 1)))


def test_conv_transpose_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 3, 4, 5))
    w = np.ones((1, 1, 1, 1, 1))
    np.testing.assert_array_equal(conv3d_transpose(x, w).data, x)


def test_conv_transpose_matches_scatter():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 2, 3, 3))
    w = rng.normal(size=(3, 2, 2, 3, 2))
    b = rng.normal(size=3)
    np.testing.assert_allclose(conv3d_transpose(x, w, b).data, scatter_loop(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint():
    # <conv(x), g> == <x, conv_T(g)> when the transpose uses the swapped kernel
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 4, 5, 5))
    w = rng.normal(size=(3, 2, 1, 3, 3))
    y = conv3d(x, w).data
    g = rng.normal(size=y.shape)
    xt = conv3d_transpose(g, w.transpose(1, 0, 2, 3, 4)).data
    assert np.isclose(np.sum(y * g), np.sum(x * xt), rtol=1e-12)


def test_valid_then_transpose_restores_extent():
    x = np.zeros((1, 1, 50, 70, 70))
    w = np.zeros((1, 1, 1, 3, 3))
    y = conv3d(x, w)
    assert y.shape[2:] == (50, 68, 68)
    assert conv3d_transpose(y, w).shape[2:] == (50, 70, 70)


def test_elementwise_examples():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert sigmoid(Tensor(0.0)).data == 0.5
    x = np.arange(16.0).reshape(1, 2, 2, 2, 2)
    gap = global_avg_pool(Tensor(x)).data
    assert gap.shape == (1, 2, 1, 1, 1)
    assert gap[0, 0, 0, 0, 0] == sum(range(8)) / 8
    assert gap[0, 1, 0, 0, 0] == sum(range(8, 16)) / 8


def test_activation_bounds():
    x = Tensor(np.linspace(-30, 30, 101))
    assert np.all(relu(x).data >= 0)
    s = sigmoid(x).data
    assert np.all((s > 0) & (s < 1))


def test_backward_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        loss = sum_(x)
    grads = backward(loss)
    np.testing.assert_array_equal(grads[x.id], [1, 1, 1])
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_mean_relu():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    with Tape():
        loss = mean(relu(x))
    np.testing.assert_array_equal(backward(loss)[x.id], [0.0, 0.5])


def test_non_contributing_leaf_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    with Tape():
        unused = y * 2.0  # recorded, but not part of the loss
        loss = sum_(x * x)
    grads = backward(loss)
    np.testing.assert_array_equal(grads[y.id], [0.0])
    assert unused.shape == (1,)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y)


def test_backward_linearity():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def f1():
        return mean(relu(x) * 3.0)

    def f2():
        return sum_(sigmoid(x))

    with Tape():
        g1 = backward(f1())[x.id]
    with Tape():
        g2 = backward(f2())[x.id]
    with Tape():
        g12 = backward(f1() + f2())[x.id]
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-14, atol=1e-15)


def test_tape_topological_and_cleared():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = (x * 2.0) + 1.0
        loss = sum_(y * y)
    produced = [e.output_id for e in tape.entries]
    for pos, e in enumerate(tape.entries):
        # every input is a leaf or the output of an earlier entry
        assert all(i not in produced or produced.index(i) < pos for i in e.input_ids)
    backward(loss)
    tape.clear()
    assert len(tape) == 0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            _ = x * 2.0
    assert len(tape) == 0


def test_concat_shape_error():
    with pytest.raises(DimensionError):
        concat([Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 2)))], axis=1)


def test_check_finite_mode(monkeypatch):
    monkeypatch.setenv("PVCKIT_CHECK_FINITE", "1")
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    monkeypatch.setenv("PVCKIT_CHECK_FINITE", "0")
    assert np.isnan(Tensor([np.nan]).data[0])


@pytest.mark.parametrize("kind", [k for k, _ in CASES])
def test_gradients_each_kind(kind):
    seed = [k for k, _ in CASES].index(kind)
    _, fn, tensors = make_case(seed)
    assert check_gradients(fn, tensors) < 1e-4


@settings(max_examples=120, deadline=None, database=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_gradients_property(seed):
    _, fn, tensors = make_case(seed)
    assert check_gradients(fn, tensors, max_probes=6, rng=np.random.default_rng(seed)) < 1e-4
