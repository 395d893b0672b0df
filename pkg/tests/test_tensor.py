import numpy as np
import pytest

from pournet.exceptions import ContractError, ShapeError
from pournet.services import tensor
from pournet.services.tensor import (
    Tensor,
    add,
    add_n,
    concat_channels,
    conv3d,
    dense,
    global_avg_pool,
    gradcheck,
    mse,
    mul,
    parameter,
    relu,
    resample,
    scale_channels,
    sigmoid,
    slice_channels,
    tanh,
)

TOL = 1e-3


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def scalar(t: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted sum via mse against zeros, so every entry receives a distinct gradient."""
    return mse(mul(t, Tensor(weights)), Tensor(np.zeros(t.shape)))


def test_add_mul_gradients(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    assert gradcheck(lambda: scalar(mul(add(a, b), b), w), [a, b]) < TOL


def test_elementwise_suite(rng):
    u = rng.uniform(-1, 1, size=(2, 3, 4))
    # keep every entry clear of the ReLU kink at 0
    x = Tensor(np.sign(u) * (0.1 + np.abs(u)), requires_grad=True)
    w = rng.normal(size=(2, 3, 4))
    for op in (sigmoid, tanh, relu):
        assert gradcheck(lambda: scalar(op(x), w), [x]) < TOL


def test_backward_requires_scalar(rng):
    with pytest.raises(ContractError):
        add(leaf(rng, 2), leaf(rng, 2)).backward()


def test_shapes_never_broadcast(rng):
    with pytest.raises(ShapeError):
        add(leaf(rng, 2, 3), leaf(rng, 3))


def test_repeated_backward_accumulates(rng):
    x = leaf(rng, 4)
    loss = mse(x, Tensor(np.zeros(4)))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * first)
    x.zero_grad()
    assert not x.grad.any()


def test_shared_subexpression_gradient(rng):
    x = leaf(rng, 5)
    y = mul(x, x)
    loss = mse(add(y, y), Tensor(np.zeros(5)))
    loss.backward()
    # d/dx mean((2x^2)^2) = 16 x^3 / n
    np.testing.assert_allclose(x.grad, 16 * x.data**3 / 5)


def test_mse_value():
    loss = mse(Tensor(np.ones((2, 2)) + 1.0), Tensor(np.ones((2, 2))))
    assert loss.item() == pytest.approx(1.0)


def test_channel_ops_gradients(rng):
    a, b = leaf(rng, 1, 2, 2, 2, 2), leaf(rng, 1, 3, 2, 2, 2)
    w = rng.normal(size=(1, 5, 2, 2, 2))
    assert gradcheck(lambda: scalar(concat_channels([a, b]), w), [a, b]) < TOL

    x = leaf(rng, 1, 4, 2, 2, 2)
    ws = rng.normal(size=(1, 2, 2, 2, 2))
    assert gradcheck(lambda: scalar(slice_channels(x, 1, 3), ws), [x]) < TOL


def test_squeeze_excitation_pieces(rng):
    x = leaf(rng, 2, 3, 2, 2, 2)
    weight, bias = leaf(rng, 4, 3), leaf(rng, 4)
    w = rng.normal(size=(2, 4))
    fn = lambda: scalar(dense(global_avg_pool(x), weight, bias), w)  # noqa: E731
    assert gradcheck(fn, [x, weight, bias]) < TOL

    s = leaf(rng, 2, 3)
    w5 = rng.normal(size=(2, 3, 2, 2, 2))
    assert gradcheck(lambda: scalar(scale_channels(x, s), w5), [x, s]) < TOL


@pytest.mark.parametrize("padding", [0, 1])
def test_conv3d_gradients(rng, padding):
    x = leaf(rng, 2, 2, 4, 4, 4)
    weight, bias = leaf(rng, 3, 2, 3, 3, 3), leaf(rng, 3)
    out_extent = 4 if padding else 2
    w = rng.normal(size=(2, 3, out_extent, out_extent, out_extent))
    fn = lambda: scalar(conv3d(x, weight, bias, padding=padding), w)  # noqa: E731
    assert gradcheck(fn, [x, weight, bias]) < TOL


def test_conv3d_matches_direct_sum(rng):
    x = rng.normal(size=(1, 2, 3, 3, 3))
    weight = rng.normal(size=(1, 2, 3, 3, 3))
    out = conv3d(Tensor(x), Tensor(weight), Tensor(np.array([0.5])))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == pytest.approx(float(np.sum(x * weight)) + 0.5)


def test_conv3d_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 4, 4, 4))
    weight = np.zeros((1, 1, 3, 3, 3))
    weight[0, 0, 1, 1, 1] = 1.0
    out = conv3d(Tensor(x), Tensor(weight), Tensor(np.zeros(1)), padding=1)
    np.testing.assert_allclose(out.data, x)


def test_conv3d_stride(rng):
    x = Tensor(rng.normal(size=(1, 1, 5, 5, 5)))
    out = conv3d(x, Tensor(np.ones((2, 1, 3, 3, 3))), Tensor(np.zeros(2)), stride=2)
    assert out.shape == (1, 2, 2, 2, 2)


def test_conv3d_rejects_bad_extent(rng):
    x = Tensor(rng.normal(size=(1, 1, 4, 4, 4)))
    with pytest.raises(ShapeError, match="extent"):
        conv3d(x, Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)), stride=2)
    with pytest.raises(ShapeError):
        conv3d(x, Tensor(np.ones((1, 2, 3, 3, 3))), Tensor(np.zeros(1)))


@pytest.mark.parametrize("factor", [2, 4, 0.5, 0.25])
def test_resample_gradients(rng, factor):
    x = leaf(rng, 1, 2, 4, 4, 4)
    out_extent = int(4 * factor)
    w = rng.normal(size=(1, 2, out_extent, out_extent, out_extent))
    assert gradcheck(lambda: scalar(resample(x, factor), w), [x]) < TOL


def test_resample_shapes(rng):
    x = Tensor(rng.normal(size=(1, 1, 8, 8, 8)))
    assert resample(x, 2).shape == (1, 1, 16, 16, 16)
    assert resample(x, 4).shape == (1, 1, 32, 32, 32)
    assert resample(x, 0.5).shape == (1, 1, 4, 4, 4)
    assert resample(x, 0.25).shape == (1, 1, 2, 2, 2)
    with pytest.raises(ShapeError):
        resample(x, 3)
    with pytest.raises(ShapeError):
        resample(Tensor(np.zeros((1, 1, 6, 6, 6))), 0.25)


def test_resample_round_trip_reproduces_ramp():
    ramp = np.broadcast_to(np.arange(16, dtype=np.float64), (16, 16, 16)).copy()
    x = Tensor(ramp[None, None])
    back = resample(resample(x, 0.5), 2).data[0, 0]
    interior = (slice(2, -2),) * 3
    np.testing.assert_allclose(back[interior], ramp[interior], atol=1e-9)


def test_upsample_preserves_constants():
    x = Tensor(np.full((1, 1, 3, 3, 3), 2.5))
    np.testing.assert_allclose(resample(x, 4).data, 2.5)


def test_parameter_bounds(rng):
    p = parameter((64, 8), fan_in=16, rng=rng)
    assert p.requires_grad and p.is_leaf
    assert np.all(np.abs(p.data) <= 0.25 + 1e-6)
    assert p.dtype == np.float32


def test_add_n(rng):
    a, b, c = leaf(rng, 3), leaf(rng, 3), leaf(rng, 3)
    np.testing.assert_allclose(add_n([a, b, c]).data, a.data + b.data + c.data)
    with pytest.raises(ContractError):
        add_n([])


def test_conv3d_zero_shell_kernel():
    x = np.arange(1, 9, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    weight = np.zeros((1, 1, 3, 3, 3))
    weight[0, 0, 1:, 1:, 1:] = 1.0
    out = conv3d(Tensor(x), Tensor(weight), Tensor(np.zeros(1)), padding=1).data[0, 0]
    # each output sums the input block at and after its own position
    expected = np.zeros((2, 2, 2))
    for i, j, k in np.ndindex(2, 2, 2):
        expected[i, j, k] = x[0, 0, i:, j:, k:].sum()
    np.testing.assert_allclose(out, expected)
    assert out[0, 0, 0] == 36.0


def test_scalar_mse_gradient():
    w = Tensor(np.array(1.5), requires_grad=True)
    x, y = Tensor(np.array(2.0)), Tensor(np.array(1.0))
    mse(mul(w, x), y).backward()
    assert w.grad == pytest.approx(2 * 2.0 * (1.5 * 2.0 - 1.0))


def test_sigmoid_at_zero():
    np.testing.assert_array_equal(sigmoid(Tensor(np.zeros(3))).data, 0.5)


def test_mse_gradient_vanishes_at_target(rng):
    x = leaf(rng, 2, 3)
    loss = mse(x, Tensor(x.data.copy()))
    loss.backward()
    assert loss.item() == 0.0
    assert not x.grad.any()


def test_detached_branch_receives_no_gradient(rng):
    x = leaf(rng, 4)
    zeros = Tensor(np.zeros(4))
    mse(mul(x.detach(), x.detach()), zeros).backward()
    assert not x.grad.any()

    # only the attached operand contributes: d/dx mean((x + c)^2) = 2 (x + c) / n
    mse(add(x, x.detach()), zeros).backward()
    np.testing.assert_allclose(x.grad, 2 * (2 * x.data) / 4)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0)])
def test_conv3d_depth_chunks_match_single_block(rng, monkeypatch, stride, padding):
    x = leaf(rng, 2, 2, 5, 5, 5)
    weight, bias = leaf(rng, 3, 2, 3, 3, 3), leaf(rng, 3)

    def run():
        for t in (x, weight, bias):
            t.zero_grad()
        out = conv3d(x, weight, bias, stride=stride, padding=padding)
        mse(out, Tensor(np.zeros(out.shape))).backward()
        return out.data, x.grad.copy(), weight.grad.copy(), bias.grad.copy()

    whole = run()
    # one output depth per chunk
    monkeypatch.setattr(tensor, "_UNFOLD_BUDGET", 1)
    chunked = run()
    for expected, actual in zip(whole, chunked):
        np.testing.assert_allclose(actual, expected, rtol=1e-12, atol=1e-12)
