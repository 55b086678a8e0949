import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from disqhnet import ndgrad as nd
from disqhnet.errors import NumericsError, ShapeError

SEEDS = range(20)


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return nd.Tensor(x, requires_grad=True)


# --- elementwise and reduction ops ------------------------------------------

UNARY = {
    "exp": nd.exp,
    "tanh": nd.tanh,
    "softplus": nd.softplus,
    "neg": nd.neg,
    "mish": lambda t: nd.mish(nd.reshape(t, (1, 2, 2, 3))),
    "pow3": lambda t: nd.pow(t, 3.0),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(seed, name):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    nd.gradcheck(lambda: nd.sum(nd.mul(nd.reshape(UNARY[name](x), (3, 4)), w)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_positive_domain_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4, positive=True)
    nd.gradcheck(lambda: nd.sum(nd.add(nd.log(x), nd.mul(nd.sqrt(x), 0.3))), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_binary_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b0 = leaf(rng, 3, 4), leaf(rng, 1, 4, positive=True)
    w = rng.normal(size=(3, 4))

    def fn():
        b = nd.expand(b0, (3, 4))
        y = nd.add(nd.mul(a, b), nd.div(a, b))
        return nd.sum(nd.mul(nd.sub(y, b), w))

    nd.gradcheck(fn, [a, b0])


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 4, 3), leaf(rng, 3, 5)
    w = rng.normal(size=(4, 5))
    nd.gradcheck(lambda: nd.sum(nd.mul(nd.softmax(nd.matmul(a, b), axis=1), w)), [a, b])
    nd.gradcheck(lambda: nd.sum(nd.mul(nd.log_softmax(nd.matmul(a, b), axis=0), w)), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_shape_op_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    w = rng.normal(size=(3, 4))

    def fn():
        c = nd.concat([a, b], axis=0)                      # [4, 3]
        t = nd.transpose(c)                                # [3, 4]
        s = nd.slice(nd.stack([t, t], axis=0), (1,))       # [3, 4]
        m = nd.mean(nd.mul(s, w), axis=1, keepdims=True)   # [3, 1]
        e = nd.expand(m, (3, 4))
        return nd.sum(nd.mul(nd.take(e, np.array([2, 0, 2]), axis=0), w))

    nd.gradcheck(fn, [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_piecewise_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 5, 4), leaf(rng, 5, 4)
    # keep inputs away from kinks
    a.data[np.abs(a.data - b.data) < 1e-2] += 0.1
    a.data[np.abs(a.data) < 1e-2] += 0.1
    w = rng.normal(size=(5, 4))

    def fn():
        y = nd.add(nd.maximum(a, b), nd.minimum(a, b))
        y = nd.add(y, nd.abs(a))
        y = nd.add(y, nd.where(a.data > 0, a, b))
        return nd.sum(nd.mul(nd.add(y, nd.clamp_min(a, 0.0)), w))

    nd.gradcheck(fn, [a, b])


# --- volumetric ops -----------------------------------------------------------

def scipy_conv(x, w, padding):
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3)
    outs = []
    for co in range(w.shape[0]):
        acc = sum(ndimage.correlate(xp[ci], w[co, ci], mode="constant") for ci in range(w.shape[1]))
        k = w.shape[2] // 2
        outs.append(acc[k:acc.shape[0] - k, k:acc.shape[1] - k, k:acc.shape[2] - k])
    return np.stack(outs)


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("method", ["direct", "fft"])
def test_conv3d_matches_scipy(k, method):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 6, 7, 5))
    w = rng.normal(size=(3, 2, k, k, k))
    got = nd.conv3d(nd.Tensor(x), nd.Tensor(w), padding=k // 2, method=method).data
    np.testing.assert_allclose(got, scipy_conv(x, w, k // 2), atol=1e-10)


@pytest.mark.parametrize("method", ["direct", "fft"])
def test_conv3d_stride_two_subsamples(method):
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 8, 8, 8)), rng.normal(size=(2, 2, 3, 3, 3))
    full = nd.conv3d(nd.Tensor(x), nd.Tensor(w), padding=1, method=method).data
    strided = nd.conv3d(nd.Tensor(x), nd.Tensor(w), padding=1, stride=2, method=method).data
    np.testing.assert_allclose(strided, full[:, ::2, ::2, ::2], atol=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d_gradients(seed):
    rng = np.random.default_rng(seed)
    k = (1, 3, 5)[seed % 3]
    stride = 1 + seed % 2
    method = ("direct", "fft")[(seed // 2) % 2]
    x, w, b = leaf(rng, 2, 5, 4, 6), leaf(rng, 2, 2, k, k, k), leaf(rng, 2)
    out_shape = nd.conv3d(x, w, b, stride, k // 2, method).shape
    g = rng.normal(size=out_shape)
    nd.gradcheck(lambda: nd.sum(nd.mul(nd.conv3d(x, w, b, stride, k // 2, method), g)), [x, w, b],
                 max_coords=25, rng=rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_volume_op_gradients(seed):
    rng = np.random.default_rng(seed)
    x, kern = leaf(rng, 2, 4, 3, 5), leaf(rng, 1, 2, 3, 3, 3)
    target = (6, 2, 5)

    def fn():
        y = nd.instance_norm(nd.replicate_pad(x, 1))
        y = nd.trilinear_resize(y, target)
        big = nd.embed_kernel(kern, 5)
        z = nd.conv3d(nd.mish(y), big, padding=2)
        return nd.sum(nd.mul(z, z))

    nd.gradcheck(fn, [x, kern], max_coords=30, rng=rng)


def test_embed_kernel_is_equivalent_to_padding_the_conv():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(1, 6, 6, 6)), rng.normal(size=(1, 1, 3, 3, 3))
    small = nd.conv3d(nd.Tensor(x), nd.Tensor(w), padding=1).data
    big = nd.conv3d(nd.Tensor(x), nd.embed_kernel(nd.Tensor(w), 7), padding=3).data
    np.testing.assert_allclose(big, small, atol=1e-12)


def test_trilinear_resize_preserves_constants_and_identity():
    x = nd.Tensor(np.full((2, 3, 4, 5), 1.7))
    np.testing.assert_allclose(nd.trilinear_resize(x, (7, 2, 9)).data, 1.7)
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 4, 4, 4))
    np.testing.assert_array_equal(nd.trilinear_resize(nd.Tensor(v), (4, 4, 4)).data, v)


def test_linear_resize_rows_are_convex():
    for n_in, n_out in [(4, 8), (8, 4), (5, 3), (3, 7)]:
        m = nd.linear_resize_matrix(n_in, n_out)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert (m >= 0).all()


# --- tape semantics -------------------------------------------------------------

def test_shared_subexpression_accumulates_gradient():
    x = nd.Tensor(np.array([2.0]), requires_grad=True)
    y = nd.mul(x, x)
    nd.add(y, y).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_accumulates_across_calls():
    x = nd.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nd.sum(nd.mul(x, 3.0)).backward()
    nd.sum(nd.mul(x, 3.0)).backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_no_grad_records_nothing():
    x = nd.Tensor(np.ones(3), requires_grad=True)
    with nd.no_grad():
        y = nd.mul(x, 2.0)
    assert y.parents == () and not y.requires_grad


def test_detach_stops_gradient():
    x = nd.Tensor(np.array([3.0]), requires_grad=True)
    nd.mul(x, x.detach()).backward()
    np.testing.assert_allclose(x.grad, [3.0])


def test_scope_is_recorded_on_tensors():
    with nd.scope("encoder"):
        with nd.scope("ru"):
            t = nd.mul(nd.Tensor(np.ones(2)), 2.0)
    assert t.scope == "encoder/ru"
    assert nd.current_scope() == ""


def test_non_finite_values_are_rejected():
    with pytest.raises(NumericsError):
        nd.Tensor(np.array([np.nan]))


def test_shape_errors():
    with pytest.raises(ShapeError):
        nd.conv3d(nd.Tensor(np.ones((1, 4, 4))), nd.Tensor(np.ones((1, 1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        nd.conv3d(nd.Tensor(np.ones((2, 4, 4, 4))), nd.Tensor(np.ones((1, 1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        nd.embed_kernel(nd.Tensor(np.ones((1, 1, 3, 3, 3))), 4)


def test_gradcheck_detects_wrong_gradient():
    x = nd.Tensor(np.array([0.3, -0.4]), requires_grad=True)
    wrong = lambda: nd.record(x.data * 2.0, (x,), lambda g: (g,), "bad").sum()  # noqa: E731
    with pytest.raises(AssertionError):
        nd.gradcheck(wrong, [x])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_product_rule_property(xs, ys):
    n = min(len(xs), len(ys))
    a = nd.Tensor(np.array(xs[:n]), requires_grad=True)
    b = nd.Tensor(np.array(ys[:n]), requires_grad=True)
    nd.sum(nd.mul(a, b)).backward()
    np.testing.assert_allclose(a.grad, b.data)
    np.testing.assert_allclose(b.grad, a.data)
