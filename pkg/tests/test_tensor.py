import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from osparse.errors import ContractError, DegeneratePrototype, NumericError, ShapeError
from osparse.tensor import (
    Tensor,
    backward,
    concat_channels,
    conv2d,
    cosine_map,
    cross_entropy,
    grad_check,
    relu,
    resize_bilinear,
    softmax_channels,
)

finite = st.floats(-3, 3, allow_nan=False, width=64)


def loop_conv(x, k, b, stride, pad):
    """Six nested loops, straight from the definition of cross-correlation."""
    H, W, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((H + 2 * pad, W + 2 * pad, cin))
    xp[pad : pad + H, pad : pad + W] = x
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for u in range(kh):
                    for v in range(kw):
                        for c in range(cin):
                            acc += xp[i * stride + u, j * stride + v, c] * k[u, v, c, o]
                out[i, j, o] = acc
    return out


def bilinear_pixel(img, a, b, H2, W2):
    """Half-pixel-centre bilinear sample of ``img`` at output pixel (a, b)."""
    H, W = img.shape
    y = min(max((a + 0.5) * H / H2 - 0.5, 0.0), H - 1)
    x = min(max((b + 0.5) * W / W2 - 0.5, 0.0), W - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    fy, fx = y - y0, x - x0
    top = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
    bot = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
    return (1 - fy) * top + fy * bot


# conv2d -----------------------------------------------------------------------


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 4, 2))
    k = rng.normal(size=(3, 3, 2, 1))
    b = rng.normal(size=1)
    got = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=1, padding=1).data
    np.testing.assert_allclose(got, loop_conv(x, k, b, 1, 1), atol=1e-12, rtol=0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (2, 0), (3, 2)])
def test_conv_strided_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(7, 6, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    got = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, loop_conv(x, k, b, stride, pad), atol=1e-12, rtol=0)


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(5, 5, 3))
    k = np.eye(3).reshape(1, 1, 3, 3)
    out = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(out, x)


def test_conv_box_filter_keeps_constants():
    x = np.full((6, 6, 1), 2.5)
    k = np.full((3, 3, 1, 1), 1.0 / 9.0)
    out = conv2d(Tensor(x), Tensor(k), padding=1).data
    np.testing.assert_allclose(out[1:-1, 1:-1], 2.5, atol=1e-14)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 5, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    both = conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    for i in range(2):
        np.testing.assert_allclose(both[i], conv2d(Tensor(x[i]), Tensor(k), stride=2, padding=1).data, atol=1e-13)


def test_conv_errors():
    x = Tensor(np.zeros((4, 4, 2)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((3, 3, 3, 1))))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((2, 2, 2, 1))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((3, 3, 2, 1))))
    with pytest.raises(NumericError):
        conv2d(Tensor(np.full((4, 4, 2), np.nan)), Tensor(np.zeros((1, 1, 2, 1))))


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, (4, 5, 2), elements=finite),
    arrays(np.float64, (4, 5, 2), elements=finite),
    finite,
    finite,
)
def test_conv_is_linear_in_input(x, y, a, b):
    k = Tensor(np.random.default_rng(3).normal(size=(3, 3, 2, 3)))
    lhs = conv2d(Tensor(a * x + b * y), k, padding=1).data
    rhs = a * conv2d(Tensor(x), k, padding=1).data + b * conv2d(Tensor(y), k, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# relu, softmax, concat --------------------------------------------------------


def test_relu_values_and_subgradient():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert not relu(Tensor(-np.ones((3, 3)))).data.any()
    x = Tensor([-1.0, 2.0], requires_grad=True)
    backward(relu(x).sum())
    np.testing.assert_array_equal(x.grad, [0, 1])
    z = Tensor([0.0], requires_grad=True)
    backward(relu(z).sum())
    assert z.grad[0] == 0.0


def test_softmax_examples():
    np.testing.assert_allclose(softmax_channels(Tensor(np.zeros((2, 2, 3)))).data, 1 / 3)
    p = softmax_channels(Tensor(np.tile([1.0, 0.0], (2, 2, 1)))).data
    e = np.e
    np.testing.assert_allclose(p[..., 0], e / (e + 1), atol=1e-15)
    np.testing.assert_allclose(p[0, 0], [0.7311, 0.2689], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2, 4), elements=st.floats(-50, 50, width=64)), arrays(np.float64, (3, 2, 1), elements=finite))
def test_softmax_is_distribution_and_shift_invariant(z, shift):
    p = softmax_channels(Tensor(z)).data
    assert (p >= 0).all() and (p <= 1).all()
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax_channels(Tensor(z + shift)).data, p, atol=1e-12)


def test_softmax_survives_huge_logits():
    p = softmax_channels(Tensor(np.array([[[1000.0, 0.0]]]))).data
    assert np.isfinite(p).all() and p[0, 0, 0] == 1.0


def test_concat_examples_and_gradient():
    a = Tensor(np.ones((2, 3, 1)), requires_grad=True)
    b = Tensor(np.zeros((2, 3, 1)), requires_grad=True)
    c = concat_channels(a, b)
    assert (c.data[..., 0] == 1).all() and (c.data[..., 1] == 0).all()
    np.testing.assert_array_equal(c.data[..., :1], a.data)
    backward(c.sum())
    np.testing.assert_array_equal(a.grad, 1.0)
    np.testing.assert_array_equal(b.grad, 1.0)
    with pytest.raises(ShapeError):
        concat_channels(a, Tensor(np.zeros((3, 3, 1))))


# cosine -----------------------------------------------------------------------


def test_cosine_examples():
    p = np.array([1.0, 2.0, -1.0])
    orth = np.array([2.0, -1.0, 0.0])
    h = np.stack([p, -p, orth, 3 * p]).reshape(2, 2, 3)
    m = cosine_map(Tensor(h), Tensor(p)).data
    np.testing.assert_allclose(m, [[1.0, -1.0], [0.0, 1.0]], atol=1e-15)


def test_cosine_zero_pixel_is_zero_without_gradient():
    h = Tensor(np.array([[[0.0, 0.0], [1.0, 1.0]]]), requires_grad=True)
    m = cosine_map(h, Tensor(np.array([1.0, 0.0])))
    assert m.data[0, 0] == 0.0
    backward(m.sum())
    np.testing.assert_array_equal(h.grad[0, 0], [0.0, 0.0])
    assert np.abs(h.grad[0, 1]).sum() > 0


def test_cosine_rejects_zero_prototype():
    with pytest.raises(DegeneratePrototype):
        cosine_map(Tensor(np.ones((2, 2, 3))), Tensor(np.zeros(3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3, 4), elements=st.floats(-1e3, 1e3, width=64)), arrays(np.float64, 4, elements=finite))
@example(np.full((3, 3, 4), 1e-300), np.full(4, 3.2e-282))  # squares underflow
def test_cosine_bounded(h, p):
    if not np.any(p):
        p = p + 1.0
    m = cosine_map(Tensor(h), Tensor(p)).data
    assert np.isfinite(m).all()
    assert (np.abs(m) <= 1 + 1e-12).all()


# backward ---------------------------------------------------------------------


def test_backward_simple_gradients():
    x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    backward((3 * x).sum())
    np.testing.assert_array_equal(x.grad, 3.0)
    y = Tensor([1.0, 2.0], requires_grad=True)
    backward((y * y).sum())
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2)


def test_backward_twice_does_not_accumulate():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_shared_subgraph_gradients_add():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    backward((y + y * 3).sum())
    np.testing.assert_allclose(x.grad, [16.0])


def test_frozen_inputs_build_no_graph():
    out = conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((1, 1, 1, 1))))
    assert not out.requires_grad and out.is_leaf


def test_composite_grad_check():
    rng = np.random.default_rng(4)
    k = Tensor(rng.normal(size=(3, 3, 2, 3)))
    b = Tensor(rng.normal(size=3))
    target = rng.integers(0, 3, size=(4, 4))

    def f(x):
        return cross_entropy(softmax_channels(relu(conv2d(x, k, b, padding=1))), target)

    assert grad_check(f, rng.normal(size=(4, 4, 2))) < 1e-3

    x0 = Tensor(rng.normal(size=(4, 4, 2)))

    def g(kern):
        return cross_entropy(softmax_channels(relu(conv2d(x0, kern, b, padding=1))), target)

    assert grad_check(g, k.data) < 1e-3


def test_grad_check_linear_is_exact():
    w = np.random.default_rng(5).normal(size=(3, 4))
    assert grad_check(lambda x: (x * w).sum(), np.ones((3, 4))) < 1e-8


def test_softmax_xent_gradient_is_p_minus_onehot():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(2, 3, 4))
    t = rng.integers(0, 4, size=(2, 3))
    x = Tensor(z, requires_grad=True)
    backward(cross_entropy(softmax_channels(x), t, eps=0.0))
    p = softmax_channels(Tensor(z)).data
    onehot = np.eye(4)[t]
    np.testing.assert_allclose(x.grad, (p - onehot) / t.size, atol=1e-14)
    assert grad_check(lambda v: cross_entropy(softmax_channels(v), t, eps=0.0), z) < 1e-8


@pytest.mark.parametrize(
    "name,fn",
    [
        ("relu", lambda x: (relu(x) * x).sum()),
        ("softmax", lambda x: (softmax_channels(x) * Tensor(np.arange(24.0).reshape(2, 3, 4))).sum()),
        ("cosine", lambda x: (cosine_map(x, Tensor(np.array([0.3, -1.0, 2.0, 0.5]))) * Tensor(np.arange(6.0).reshape(2, 3))).sum()),
        ("concat", lambda x: (concat_channels(x, x * 2) * Tensor(np.linspace(-1, 1, 48).reshape(2, 3, 8))).sum()),
        ("resize", lambda x: (resize_bilinear(x, 5, 2) * Tensor(np.linspace(0, 1, 40).reshape(5, 2, 4))).sum()),
        ("conv", lambda x: (conv2d(x, Tensor(np.linspace(-1, 1, 96).reshape(3, 1, 4, 8)), padding=1, stride=2)).sum()),
    ],
)
def test_grad_check_every_op(name, fn):
    rng = np.random.default_rng(7)
    for _ in range(10):
        assert grad_check(fn, rng.normal(size=(2, 3, 4))) < 1e-3, name


def test_cosine_grad_wrt_prototype():
    rng = np.random.default_rng(8)
    h = Tensor(rng.normal(size=(3, 3, 4)))
    w = Tensor(rng.normal(size=(3, 3)))
    for _ in range(10):
        assert grad_check(lambda p: (cosine_map(h, p) * w).sum(), rng.normal(size=4)) < 1e-3


# resize -----------------------------------------------------------------------


def test_resize_half_pixel_oracle():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    got = resize_bilinear(Tensor(img[..., None]), 3, 3).data[..., 0]
    want = np.array([[bilinear_pixel(img, a, b, 3, 3) for b in range(3)] for a in range(3)])
    np.testing.assert_allclose(got, want, atol=1e-15)
    np.testing.assert_allclose(got, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 9), st.integers(1, 9), st.data())
def test_resize_matches_pixel_oracle(H, W, H2, W2, data):
    img = data.draw(arrays(np.float64, (H, W), elements=finite))
    got = resize_bilinear(Tensor(img[..., None]), H2, W2).data[..., 0]
    want = np.array([[bilinear_pixel(img, a, b, H2, W2) for b in range(W2)] for a in range(H2)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_resize_identity_and_constant():
    img = np.random.default_rng(9).normal(size=(4, 5, 2))
    np.testing.assert_allclose(resize_bilinear(Tensor(img), 4, 5).data, img, atol=1e-15)
    const = np.full((3, 4, 2), 1.25)
    np.testing.assert_allclose(resize_bilinear(Tensor(const), 7, 2).data, 1.25, atol=1e-14)
