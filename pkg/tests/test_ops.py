import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medmusnet import ops
from medmusnet.gradcheck import check_gradients
from medmusnet.ops import ConvParams
from medmusnet.tensor import NonFiniteError, ShapeError, Tensor

TOL = 1e-5
SHAPES = [(1, 2, 3, 4, 5), (2, 1, 4, 4, 4), (2, 3, 2, 6, 4)]


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def weighted_sum(y, w):
    # scalar probe <y, w> built from differentiable ops
    return ops.dice_probe(y, w) if hasattr(ops, "dice_probe") else _dot(y, w)


def _dot(y, w):
    wt = Tensor(w)
    prod = ops.elementwise_mul(y, wt)
    # sum of all entries through a fixed all-ones 1x1x1 conv + global reduction
    return _sum(prod)


def _sum(t):
    s = t.data.sum()

    def backward(g):
        t._accumulate(np.full_like(t.data, float(g)))

    return Tensor._from_op(np.asarray(s), [t], backward, "sum")


# ---------------------------------------------------------------------------
# conv3d


def test_identity_kernel_returns_input(rng):
    x = T(rng.standard_normal((2, 3, 4, 5, 6)))
    k = np.zeros((3, 3, 1, 1, 1))
    for c in range(3):
        k[c, c] = 1.0
    y = ops.conv3d(x, ConvParams(T(k), T(np.zeros(3))))
    np.testing.assert_array_equal(y.data, x.data)


def test_all_ones_kernel_center_voxel():
    x = T(np.ones((1, 1, 3, 3, 3)))
    y = ops.conv3d(x, ConvParams(T(np.ones((1, 1, 3, 3, 3))), None, 1, 1))
    assert y.data[0, 0, 1, 1, 1] == 27.0
    assert y.shape == (1, 1, 3, 3, 3)


@pytest.mark.parametrize(
    "size,k,stride,pad",
    [((7, 7, 7), 3, 1, 1), ((8, 6, 7), 3, 2, 1), ((5, 6, 4), 2, 2, 0), ((9, 5, 6), (3, 1, 2), (1, 2, 1), (0, 1, 1))],
)
def test_conv_output_size(size, k, stride, pad):
    kk = ops._triple(k)
    x = T(np.zeros((1, 1) + size))
    y = ops.conv3d(x, ConvParams(T(np.zeros((1, 1) + kk)), None, stride, pad))
    s, p = ops._triple(stride), ops._triple(pad)
    assert y.shape[2:] == tuple((n + 2 * pp - kd) // ss + 1 for n, kd, ss, pp in zip(size, kk, s, p))


def test_conv_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.conv3d(T(np.zeros((1, 2, 4, 4, 4))), ConvParams(T(np.zeros((1, 3, 3, 3, 3)))))


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 2, 5, 4, 6))
    w = rng.standard_normal((3, 2, 3, 2, 3))
    b = rng.standard_normal(3)
    y = ops.conv3d(T(x), ConvParams(T(w), T(b), (2, 1, 2), (1, 0, 1))).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(3):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    for l in range(y.shape[4]):
                        patch = xp[n, :, 2 * i : 2 * i + 3, j : j + 2, 2 * l : 2 * l + 3]
                        ref[n, o, i, j, l] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv3d_gradient(rng, shape, stride, pad):
    x = T(rng.standard_normal(shape))
    w = T(rng.standard_normal((2, shape[1], 3, 3, 3)) * 0.5)
    b = T(rng.standard_normal(2))
    if min(shape[2:]) + 2 * pad < 3:
        pytest.skip("too small")
    probe = rng.standard_normal(ops.conv3d(x, ConvParams(w, b, stride, pad)).shape)
    errs = check_gradients(lambda: _dot(ops.conv3d(x, ConvParams(w, b, stride, pad)), probe), [x, w, b])
    assert max(errs.values()) < TOL


# ---------------------------------------------------------------------------
# transposed conv


def _adjoint_gap(rng, shape, cout, k, stride, pad):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1]) + k)
    p = ConvParams(T(w, False), None, stride, pad)
    y = ops.conv3d(T(x, False), p).data
    r = rng.standard_normal(y.shape)
    lhs = float((y * r).sum())
    xt = ops.conv_transpose3d(T(r, False), p).data
    assert xt.shape == x.shape
    rhs = float((x * xt).sum())
    return abs(lhs - rhs) / max(1.0, abs(lhs))


@pytest.mark.parametrize(
    "shape,cout,k,stride,pad",
    [
        ((2, 3, 6, 5, 4), 2, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ((1, 2, 7, 7, 5), 4, (3, 3, 3), (2, 2, 2), (1, 1, 1)),
        ((2, 2, 4, 6, 8), 3, (2, 2, 2), (2, 2, 2), (0, 0, 0)),
    ],
)
def test_adjoint_identity(rng, shape, cout, k, stride, pad):
    assert _adjoint_gap(rng, shape, cout, k, stride, pad) < 1e-10


def test_transpose_doubles_dims_for_stride_two():
    x = T(np.ones((1, 4, 3, 5, 2)))
    y = ops.conv_transpose3d(x, ConvParams(T(np.ones((4, 2, 2, 2, 2))), None, 2, 0))
    assert y.shape == (1, 2, 6, 10, 4)


@pytest.mark.parametrize("shape", [(1, 3, 2, 3, 2), (2, 2, 3, 3, 3), (1, 1, 4, 2, 3)])
def test_conv_transpose_gradient(rng, shape):
    x = T(rng.standard_normal(shape))
    w = T(rng.standard_normal((shape[1], 2, 2, 2, 2)))
    b = T(rng.standard_normal(2))
    p = ConvParams(w, b, 2, 0)
    probe = rng.standard_normal(ops.conv_transpose3d(x, p).shape)
    errs = check_gradients(lambda: _dot(ops.conv_transpose3d(x, p), probe), [x, w, b])
    assert max(errs.values()) < TOL


def test_conv_transpose_gradient_padded_stride_one(rng):
    x = T(rng.standard_normal((1, 2, 3, 4, 3)))
    w = T(rng.standard_normal((2, 3, 3, 3, 3)))
    p = ConvParams(w, None, 1, 1)
    probe = rng.standard_normal(ops.conv_transpose3d(x, p).shape)
    errs = check_gradients(lambda: _dot(ops.conv_transpose3d(x, p), probe), [x, w])
    assert max(errs.values()) < TOL


# ---------------------------------------------------------------------------
# normalisation, activations


def test_instance_norm_constant_input_is_zero():
    y = ops.instance_norm(T(np.full((2, 3, 2, 2, 2), 4.2)))
    np.testing.assert_array_equal(y.data, 0.0)


def test_instance_norm_moments(rng):
    y = ops.instance_norm(T(rng.standard_normal((2, 3, 4, 5, 6)) * 3 + 2), eps=1e-5).data
    np.testing.assert_allclose(y.mean(axis=(2, 3, 4)), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(2, 3, 4)), 1.0, atol=1e-5)


@pytest.mark.parametrize("shape", SHAPES)
def test_instance_norm_gradient(rng, shape):
    x = T(rng.standard_normal(shape))
    g = T(rng.standard_normal(shape[1]))
    b = T(rng.standard_normal(shape[1]))
    probe = rng.standard_normal(shape)
    errs = check_gradients(lambda: _dot(ops.instance_norm(x, g, b), probe), [x, g, b])
    assert max(errs.values()) < TOL


def test_leaky_relu_values():
    y = ops.leaky_relu(T([1.0, -1.0]), 0.01).data
    np.testing.assert_allclose(y, [1.0, -0.01])


@pytest.mark.parametrize("shape", SHAPES)
def test_leaky_relu_gradient(rng, shape):
    v = rng.standard_normal(shape)
    v = np.where(np.abs(v) < 0.05, 0.5, v)  # stay away from the kink
    x = T(v)
    probe = rng.standard_normal(shape)
    assert check_gradients(lambda: _dot(ops.leaky_relu(x), probe), [x])[0] < TOL


def test_softmax_equal_logits():
    y = ops.softmax_channels(T(np.zeros((1, 2, 1, 1, 1)))).data
    np.testing.assert_allclose(y.ravel(), [0.5, 0.5])


@given(st.floats(-50, 50), st.integers(0, 2**16))
def test_softmax_shift_invariance(c, seed):
    x = np.random.default_rng(seed).standard_normal((1, 3, 2, 2, 2)) * 4
    a = ops.softmax_channels(T(x)).data
    b = ops.softmax_channels(T(x + c)).data
    assert np.abs(a - b).max() < 1e-12
    assert np.all((a > 0) & (a < 1))
    assert np.abs(a.sum(axis=1) - 1).max() < 1e-9


@pytest.mark.parametrize("shape", SHAPES)
def test_softmax_gradient(rng, shape):
    x = T(rng.standard_normal(shape))
    probe = rng.standard_normal(shape)
    assert check_gradients(lambda: _dot(ops.softmax_channels(x), probe), [x])[0] < TOL


# ---------------------------------------------------------------------------
# structural ops


def test_concat_channel_counts(rng):
    a, b = T(rng.standard_normal((2, 3, 2, 2, 2))), T(rng.standard_normal((2, 4, 2, 2, 2)))
    assert ops.concat_channels(a, b).shape == (2, 7, 2, 2, 2)
    probe = rng.standard_normal((2, 7, 2, 2, 2))
    errs = check_gradients(lambda: _dot(ops.concat_channels(a, b), probe), [a, b])
    assert max(errs.values()) < TOL


def test_concat_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.concat_channels(T(np.zeros((1, 1, 2, 2, 2))), T(np.zeros((1, 1, 2, 2, 4))))


def test_mul_gradient(rng):
    a, b = T(rng.standard_normal((1, 2, 3, 2, 2))), T(rng.standard_normal((1, 2, 3, 2, 2)))
    probe = rng.standard_normal(a.shape)
    errs = check_gradients(lambda: _dot(ops.elementwise_mul(a, b), probe), [a, b])
    assert max(errs.values()) < TOL
    with pytest.raises(ShapeError):
        ops.elementwise_mul(a, T(np.zeros((1, 2, 3, 2, 1))))


def test_mean_downsample_of_constant_block():
    y = ops.downsample(T(np.full((1, 1, 2, 2, 2), 3.5)), "mean").data
    assert y.shape == (1, 1, 1, 1, 1) and y.item() == 3.5


def test_nearest_up_down_identity_on_blocky_inputs():
    # every 2x2x2-blocky 0/1 tensor of shape (1, 1, 4, 2, 2): 2^4 block patterns
    for bits in range(16):
        coarse = np.array([(bits >> i) & 1 for i in range(4)], dtype=float).reshape(1, 1, 2, 1, 2)
        blocky = coarse.repeat(2, 2).repeat(2, 3).repeat(2, 4)
        x = T(blocky)
        y = ops.upsample(ops.downsample(x, "nearest"), "nearest").data
        np.testing.assert_array_equal(y, blocky)


@pytest.mark.parametrize("mode", ["mean", "nearest"])
def test_downsample_gradient(rng, mode):
    x = T(rng.standard_normal((2, 2, 4, 2, 6)))
    probe = rng.standard_normal((2, 2, 2, 1, 3))
    assert check_gradients(lambda: _dot(ops.downsample(x, mode), probe), [x])[0] < TOL


@pytest.mark.parametrize("mode", ["trilinear", "nearest"])
@pytest.mark.parametrize("shape", [(1, 1, 2, 3, 1), (2, 2, 3, 2, 4), (1, 3, 1, 1, 2)])
def test_upsample_gradient(rng, mode, shape):
    x = T(rng.standard_normal(shape))
    probe = rng.standard_normal(shape[:2] + tuple(2 * s for s in shape[2:]))
    assert check_gradients(lambda: _dot(ops.upsample(x, mode), probe), [x])[0] < TOL


def test_trilinear_upsample_preserves_constants_and_linear_ramps():
    x = np.arange(4, dtype=float).reshape(1, 1, 4, 1, 1) * np.ones((1, 1, 4, 3, 2))
    y = ops.upsample(T(x), "trilinear").data
    # interior samples of a ramp are reproduced exactly
    expect = (np.arange(8) + 0.5) / 2 - 0.5
    np.testing.assert_allclose(y[0, 0, 1:-1, 0, 0], expect[1:-1])
    c = ops.upsample(T(np.full((1, 2, 2, 3, 2), 0.3)), "trilinear").data
    np.testing.assert_allclose(c, 0.3)


def test_channel_sum_gradient(rng):
    x = T(rng.standard_normal((2, 3, 2, 2, 2)))
    probe = rng.standard_normal((2, 1, 2, 2, 2))
    assert check_gradients(lambda: _dot(ops.channel_sum(x, 1), probe), [x])[0] < TOL


# ---------------------------------------------------------------------------
# losses


def test_perfect_prediction_losses():
    labels = np.array([[[[0, 1], [1, 0]]]])
    oh = ops.one_hot(labels, 2)
    p = T(oh)
    assert ops.dice_loss(p, oh).item() <= 1e-12
    assert ops.ce_loss(p, oh).item() == 0.0


def test_uniform_ce_is_ln2():
    labels = np.zeros((1, 2, 2, 2), dtype=int)
    p = T(np.full((1, 2, 2, 2, 2), 0.5))
    assert abs(ops.ce_loss(p, ops.one_hot(labels, 2)).item() - np.log(2)) < 1e-15


def test_dice_loss_closed_form(rng):
    p = rng.random((2, 3, 2, 3, 2))
    p /= p.sum(axis=1, keepdims=True)
    lab = rng.integers(0, 3, (2, 2, 3, 2))
    oh = ops.one_hot(lab, 3)
    eps = 1e-5
    ratios = []
    for c in (1, 2):
        inter = (p[:, c] * oh[:, c]).sum()
        ratios.append((2 * inter + eps) / (p[:, c].sum() + oh[:, c].sum() + eps))
    assert abs(ops.dice_loss(T(p), oh, eps).item() - (1 - np.mean(ratios))) < 1e-14


def test_loss_gradients_through_softmax(rng):
    x = T(rng.standard_normal((2, 3, 2, 3, 2)))
    w = T(rng.standard_normal((3, 3, 1, 1, 1)))
    lab = rng.integers(0, 3, (2, 2, 3, 2))
    oh = ops.one_hot(lab, 3)

    def loss():
        p = ops.softmax_channels(ops.conv3d(x, ConvParams(w)))
        return ops.add(ops.dice_loss(p, oh), ops.ce_loss(p, oh))

    assert max(check_gradients(loss, [x, w]).values()) < TOL


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.dice_loss(T(np.ones((1, 2, 2, 2, 2))), np.ones((1, 2, 2, 2, 1)))


def test_one_hot_rejects_out_of_range():
    with pytest.raises(ValueError):
        ops.one_hot(np.array([[[[2]]]]), 2)


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        ops.scale(T(np.array([1e308])), 1e10)


def test_forward_backward_bit_reproducible():
    def run():
        r = np.random.default_rng(7)
        x = T(r.standard_normal((2, 2, 4, 4, 4)))
        w = T(r.standard_normal((3, 2, 3, 3, 3)))
        y = ops.softmax_channels(ops.instance_norm(ops.conv3d(x, ConvParams(w, None, 1, 1))))
        loss = ops.ce_loss(y, ops.one_hot(r.integers(0, 3, (2, 4, 4, 4)), 3))
        loss.backward()
        return loss.data.copy(), w.grad.copy(), x.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_transpose_output_size_selects_adjoint_of_lossy_stride(rng):
    # a stride-2 conv maps 7 and 8 onto the same output length
    p = ConvParams(T(rng.standard_normal((2, 3, 3, 3, 3))), None, 2, 1)
    x = rng.standard_normal((1, 3, 8, 7, 6))
    y = ops.conv3d(T(x, False), p).data
    r = rng.standard_normal(y.shape)
    xt = ops.conv_transpose3d(T(r, False), p, output_size=(8, 7, 6)).data
    assert abs((y * r).sum() - (x * xt).sum()) < 1e-10 * max(1, abs((y * r).sum()))
    with pytest.raises(ShapeError):
        ops.conv_transpose3d(T(r, False), p, output_size=(10, 7, 6))
    xg = T(r)
    probe = rng.standard_normal(x.shape)
    assert check_gradients(lambda: _dot(ops.conv_transpose3d(xg, p, output_size=(8, 7, 6)), probe), [xg, p.kernel])[0] < TOL
