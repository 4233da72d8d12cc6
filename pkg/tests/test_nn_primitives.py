import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from neuropipe.boxes import BoundingBox
from neuropipe.errors import (
    BadLabel,
    NegativeWeight,
    RoiOutOfBounds,
    RoiTooSmall,
    ShapeMismatch,
    WindowTooLarge,
)
from neuropipe.nn_primitives import (
    L2Pool2d,
    PoolSpec,
    Roi,
    hinge_loss_torch,
    l2pool_backward,
    l2pool_backward_reference,
    l2pool_forward,
    l2pool_forward_reference,
    max_relative_error,
    multiclass_hinge_loss,
    multitask_loss,
    numeric_gradient,
    parameter_gradient_check,
    roi_spp_pool,
    roi_spp_pool_reference,
    smooth_l1,
    smooth_l1_torch,
    softmax_ce,
)


def brute_l2pool(x, kh, kw, sh, sw):
    # independent oracle: numpy slicing per output cell
    c, h, w = x.shape
    oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
    out = np.zeros((c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            win = x[:, i * sh : i * sh + kh, j * sw : j * sw + kw]
            out[:, i, j] = np.sqrt((win**2).sum(axis=(1, 2)))
    return out


# --- l2 pooling -------------------------------------------------------------


def test_l2pool_examples():
    spec = PoolSpec((1, 2), (1, 2))
    x = np.array([[[3.0, 4.0]]])
    assert l2pool_forward_reference(x, spec)[0, 0, 0] == 5.0
    assert l2pool_forward(x, spec)[0, 0, 0] == 5.0
    assert l2pool_forward(np.zeros((1, 2, 2)), PoolSpec(2, 2))[0, 0, 0] == 0.0
    np.testing.assert_allclose(l2pool_backward_reference(x, spec, np.ones((1, 1, 1))), [[[0.6, 0.8]]])
    np.testing.assert_allclose(l2pool_backward(x, spec, np.ones((1, 1, 1))), [[[0.6, 0.8]]])


def test_l2pool_zero_window_gradient_is_zero():
    x = np.zeros((1, 4, 4))
    x[0, 2:, 2:] = 1.0
    g = l2pool_backward(x, PoolSpec(2, 2), np.ones((1, 2, 2)))
    assert np.all(g[0, :2, :2] == 0.0) and np.all(np.isfinite(g))
    assert np.array_equal(g, l2pool_backward_reference(x, PoolSpec(2, 2), np.ones((1, 2, 2))))


def test_l2pool_random_matches_brute_force():
    x = np.random.default_rng(0).normal(size=(1, 6, 6))
    spec = PoolSpec(2, 2)
    y = l2pool_forward(x, spec)
    assert y.shape == (1, 3, 3)
    np.testing.assert_allclose(y, brute_l2pool(x, 2, 2, 2, 2), rtol=0, atol=1e-12)
    np.testing.assert_allclose(l2pool_forward_reference(x, spec), brute_l2pool(x, 2, 2, 2, 2), rtol=0, atol=1e-12)


@pytest.mark.parametrize("window,stride", [((2, 2), (2, 2)), ((3, 3), (1, 1)), ((2, 3), (1, 2))])
def test_l2pool_backward_finite_differences(window, stride):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 6))
    spec = PoolSpec(window, stride)
    g = rng.normal(size=l2pool_forward_reference(x, spec).shape)

    def f(z):
        return float((l2pool_forward_reference(z, spec) * g).sum())

    num = numeric_gradient(f, x, 1e-3)
    assert max_relative_error(l2pool_backward_reference(x, spec, g), num) < 1e-4
    assert max_relative_error(l2pool_backward(x, spec, g), num) < 1e-4


@settings(max_examples=40, deadline=None)
@given(
    c=st.integers(1, 3),
    h=st.integers(1, 8),
    w=st.integers(1, 8),
    kh=st.integers(1, 4),
    kw=st.integers(1, 4),
    sh=st.integers(1, 3),
    sw=st.integers(1, 3),
    seed=st.integers(0, 10_000),
)
def test_l2pool_vectorized_agrees_with_reference(c, h, w, kh, kw, sh, sw, seed):
    spec = PoolSpec((kh, kw), (sh, sw))
    x = np.random.default_rng(seed).normal(size=(c, h, w))
    if kh > h or kw > w:
        with pytest.raises(WindowTooLarge):
            l2pool_forward(x, spec)
        return
    y_ref = l2pool_forward_reference(x, spec)
    np.testing.assert_allclose(l2pool_forward(x, spec), y_ref, rtol=0, atol=1e-10)
    g = np.random.default_rng(seed + 1).normal(size=y_ref.shape)
    np.testing.assert_allclose(
        l2pool_backward(x, spec, g), l2pool_backward_reference(x, spec, g), rtol=0, atol=1e-10
    )


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(-50, 50).filter(lambda a: a != 0))
def test_l2pool_sign_and_homogeneity(seed, alpha):
    x = np.random.default_rng(seed).normal(size=(2, 5, 5))
    spec = PoolSpec(2, 1)
    y = l2pool_forward(x, spec)
    np.testing.assert_allclose(l2pool_forward(-x, spec), y, rtol=0, atol=1e-12)
    np.testing.assert_allclose(l2pool_forward(alpha * x, spec), abs(alpha) * y, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(l2pool_forward(x, PoolSpec(1, 1)), np.abs(x), rtol=0, atol=1e-12)


def test_l2pool_errors():
    with pytest.raises(WindowTooLarge):
        l2pool_forward(np.zeros((1, 2, 2)), PoolSpec(3, 1))
    with pytest.raises(ShapeMismatch):
        l2pool_backward(np.zeros((1, 4, 4)), PoolSpec(2, 2), np.zeros((1, 3, 3)))
    with pytest.raises(ShapeMismatch):
        l2pool_backward_reference(np.zeros((1, 4, 4)), PoolSpec(2, 2), np.zeros((1, 3, 3)))
    with pytest.raises(ValueError):
        PoolSpec(0, 1)


def test_l2pool_module_gradcheck():
    x = torch.randn(2, 3, 7, 7, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(L2Pool2d(3, 2), (x,))
    assert L2Pool2d(3, 2)(x).shape == (2, 3, 3, 3)


# --- ROI pooling --------------------------------------------------------------


def test_roi_examples():
    ramp = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    full = BoundingBox(0, 0, 4, 4)
    np.testing.assert_array_equal(roi_spp_pool(ramp, Roi(full, (2, 2)))[0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(roi_spp_pool_reference(ramp, Roi(full, (2, 2)))[0], [[5, 7], [13, 15]])
    x = np.random.default_rng(2).normal(size=(3, 5, 6))
    np.testing.assert_array_equal(roi_spp_pool(x, Roi(BoundingBox(0, 0, 6, 5), (1, 1)))[:, 0, 0], x.max(axis=(1, 2)))
    with pytest.raises(RoiTooSmall):
        roi_spp_pool(ramp, Roi(BoundingBox(1, 1, 2, 2), (2, 2)))
    with pytest.raises(RoiTooSmall):
        roi_spp_pool_reference(ramp, Roi(BoundingBox(1, 1, 2, 2), (2, 2)))
    with pytest.raises(RoiOutOfBounds):
        roi_spp_pool(ramp, Roi(BoundingBox(0, 0, 6, 4), (1, 1)))


def test_roi_snapping_rounds_half_up():
    ramp = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    # 0.5 snaps to 1 and 2.4 snaps to 2: a single cell at row 1, col 1
    assert roi_spp_pool(ramp, Roi(BoundingBox(0.5, 0.5, 2.4, 2.4), (1, 1)))[0, 0, 0] == 5.0


@pytest.mark.parametrize("k", [1, 2, 3])
def test_roi_full_map_reproduces_max_pool(k):
    x = torch.randn(2, 6, 6, dtype=torch.float64)
    out = roi_spp_pool(x, Roi(BoundingBox(0, 0, 6, 6), (6 // k, 6 // k)))
    assert torch.equal(out, F.max_pool2d(x.unsqueeze(0), k).squeeze(0))


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    x0=st.floats(0, 9),
    y0=st.floats(0, 9),
    bw=st.floats(0.5, 10),
    bh=st.floats(0.5, 10),
    ph=st.integers(1, 4),
    pw=st.integers(1, 4),
)
def test_roi_vectorized_agrees_with_reference(seed, x0, y0, bw, bh, ph, pw):
    x = np.random.default_rng(seed).normal(size=(2, 10, 10))
    box = BoundingBox(x0, y0, min(x0 + bw, 10.0), min(y0 + bh, 10.0))
    roi = Roi(box, (ph, pw))
    try:
        ref = roi_spp_pool_reference(x, roi)
    except (RoiTooSmall, RoiOutOfBounds) as e:
        with pytest.raises(type(e)):
            roi_spp_pool(x, roi)
        return
    np.testing.assert_allclose(roi_spp_pool(x, roi), ref, rtol=0, atol=1e-10)


def test_roi_pool_gradient_finite_differences():
    x = np.random.default_rng(3).normal(size=(2, 7, 7))
    roi = Roi(BoundingBox(1, 0, 7, 6), (2, 3))
    g = np.random.default_rng(4).normal(size=(2, 2, 3))
    t = torch.tensor(x, requires_grad=True)
    (roi_spp_pool(t, roi) * torch.tensor(g)).sum().backward()
    num = numeric_gradient(lambda z: float((roi_spp_pool_reference(z, roi) * g).sum()), x, 1e-3)
    assert max_relative_error(t.grad.numpy(), num) < 1e-4


# --- losses -------------------------------------------------------------------


def test_hinge_examples():
    assert multiclass_hinge_loss([10, 0, 0, 0, 0], 0, 1.0)[0] == 0.0
    loss, grad = multiclass_hinge_loss([0, 0], 0, 1.0)
    assert loss == 1.0
    np.testing.assert_array_equal(grad, [-1.0, 1.0])
    # a term exactly on its hinge gets no gradient
    loss, grad = multiclass_hinge_loss([1.0, 0.0], 0, 1.0)
    assert loss == 0.0 and np.all(grad == 0.0)
    with pytest.raises(BadLabel):
        multiclass_hinge_loss([0, 0], 2)
    with pytest.raises(BadLabel):
        multiclass_hinge_loss([0, 0], -1)


def _away_from_kinks(values, pivot, margin, tol=1e-2):
    return all(abs(margin + v - pivot) > tol for v in values)


def test_hinge_finite_differences():
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 20:
        s = rng.normal(size=5)
        y = int(rng.integers(5))
        others = [v for i, v in enumerate(s) if i != y]
        if not _away_from_kinks(others, s[y], 1.0):
            continue
        num = numeric_gradient(lambda z: multiclass_hinge_loss(z, y)[0], s, 1e-3)
        assert max_relative_error(multiclass_hinge_loss(s, y)[1], num) < 1e-4
        checked += 1


def test_hinge_torch_matches_reference():
    rng = np.random.default_rng(6)
    s = rng.normal(size=(8, 5))
    y = rng.integers(5, size=8)
    t = torch.tensor(s, requires_grad=True)
    hinge_loss_torch(t, torch.tensor(y)).backward()
    refs = [multiclass_hinge_loss(s[i], int(y[i])) for i in range(8)]
    assert abs(hinge_loss_torch(torch.tensor(s), torch.tensor(y)).item() - np.mean([r[0] for r in refs])) < 1e-12
    np.testing.assert_allclose(t.grad.numpy(), np.stack([r[1] for r in refs]) / 8, atol=1e-12)


def test_smooth_l1_examples():
    assert smooth_l1([1, 2, 3, 4], [1, 2, 3, 4])[0] == 0.0
    assert smooth_l1([0.5, 0, 0, 0], [0, 0, 0, 0])[0] == 0.125
    assert smooth_l1([2, 0, 0, 0], [0, 0, 0, 0])[0] == 1.5
    assert smooth_l1([-2, 0, 0, 0], [0, 0, 0, 0])[0] == 1.5


def test_smooth_l1_finite_differences_and_torch():
    rng = np.random.default_rng(7)
    for _ in range(10):
        p, t = rng.normal(scale=2, size=4), rng.normal(scale=2, size=4)
        if np.any(np.abs(np.abs(p - t) - 1.0) < 1e-2):
            continue
        num = numeric_gradient(lambda z: smooth_l1(z, t)[0], p, 1e-3)
        assert max_relative_error(smooth_l1(p, t)[1], num) < 1e-4
        assert abs(smooth_l1_torch(torch.tensor(p), torch.tensor(t)).item() - smooth_l1(p, t)[0]) < 1e-12


def test_softmax_ce_examples():
    assert abs(softmax_ce([0.3] * 4, 2)[0] - math.log(4)) < 1e-15
    loss, grad = softmax_ce([1000.0, 0.0], 0)
    assert np.isfinite(loss) and loss < 1e-12
    assert np.all(np.isfinite(grad))
    with pytest.raises(BadLabel):
        softmax_ce([1.0, 2.0], 5)


def test_softmax_ce_gradient():
    rng = np.random.default_rng(8)
    for _ in range(10):
        s = rng.normal(scale=3, size=6)
        y = int(rng.integers(6))
        loss, grad = softmax_ce(s, y)
        num = numeric_gradient(lambda z: softmax_ce(z, y)[0], s, 1e-3)
        assert max_relative_error(grad, num) < 1e-4
        ref = F.cross_entropy(torch.tensor(s)[None], torch.tensor([y]))
        assert abs(loss - ref.item()) < 1e-12


def test_multitask_examples():
    assert multitask_loss(2.5, 7.0, 9.0, (1, 0, 0)) == 2.5
    assert multitask_loss(1, 2, 3, (1, 1, 1)) == 6
    assert multitask_loss(2, 1, 0.5, (0.5, 1, 2)) == 3.0
    assert multitask_loss(2, 1, None, (0.5, 1, 2)) == 2.0
    with pytest.raises(NegativeWeight):
        multitask_loss(1, 1, 1, (1, -0.1, 1))


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(0, 100),
    b=st.floats(0, 100),
    c=st.floats(0, 100),
    d=st.floats(0, 100),
    w=st.tuples(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5)),
)
def test_multitask_linear_in_each_component(a, b, c, d, w):
    base = multitask_loss(a, b, c, w)
    assert math.isclose(multitask_loss(a + d, b, c, w) - base, w[0] * d, abs_tol=1e-9)
    assert math.isclose(multitask_loss(a, b + d, c, w) - base, w[1] * d, abs_tol=1e-9)
    assert math.isclose(multitask_loss(a, b, c + d, w) - base, w[2] * d, abs_tol=1e-9)


def test_parameter_gradient_check_on_linear_layer():
    torch.manual_seed(0)
    lin = torch.nn.Linear(4, 3).double()
    x = torch.randn(5, 4, dtype=torch.float64)
    y = torch.randint(0, 3, (5,))
    err = parameter_gradient_check(lambda: F.cross_entropy(lin(x), y), lin.weight)
    assert err < 1e-6


def test_max_relative_error_scale():
    assert max_relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert max_relative_error([2.0, 0.0], [1.0, 0.0]) == 0.5
    assert max_relative_error([0.0], [0.0]) == 0.0
