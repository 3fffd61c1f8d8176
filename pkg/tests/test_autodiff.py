import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from inrslam import autodiff as ad
from inrslam.autodiff import Adam, AdamState, DivergedError, ParameterBlock, adam_step, finite_diff_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def grad(fn, x0):
    b = ParameterBlock("x", x0)
    with ad.Tape() as tape:
        loss = fn(ad.param(b))
    ad.backward(tape, loss)
    return b.grad.copy(), float(ad.value(loss))


UNARY = {
    "exp": (ad.exp, np.exp),
    "sin": (ad.sin, np.sin),
    "cos": (ad.cos, np.cos),
    "sigmoid": (ad.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "square": (ad.square, np.square),
    "neg": (ad.neg, np.negative),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_central_differences(name, rng):
    f_ad, f_np = UNARY[name]
    x0 = rng.normal(size=(4, 3))
    g, _ = grad(lambda x: ad.sum(ad.mul(f_ad(x), x)), x0)
    num = numeric_grad(lambda x: float(np.sum(f_np(x) * x)), x0)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-8)


def test_log_sqrt_div_on_positive_inputs(rng):
    x0 = rng.uniform(0.5, 2.0, size=5)
    g, _ = grad(lambda x: ad.sum(ad.div(ad.log(x), ad.sqrt(x))), x0)
    num = numeric_grad(lambda x: float(np.sum(np.log(x) / np.sqrt(x))), x0)
    np.testing.assert_allclose(g, num, rtol=1e-6)


def test_broadcasting_is_unbroadcast_in_gradients(rng):
    a0, b0 = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
    A, B = ParameterBlock("a", a0), ParameterBlock("b", b0)
    with ad.Tape() as tape:
        loss = ad.sum(ad.square(ad.add(ad.param(A), ad.mul(ad.param(B), 2.0))))
    ad.backward(tape, loss)
    assert B.grad.shape == (1, 3)
    np.testing.assert_allclose(B.grad, (4 * (a0 + 2 * b0)).sum(0, keepdims=True))


def test_matmul_and_mlp_agree_with_reference(rng):
    from inrslam.model import MLPHead
    head = MLPHead("h", 5, 4, hidden=8, layers=2, rng=rng)
    x = rng.normal(size=(30, 5))
    with ad.Tape() as t1:
        l1 = ad.sum(ad.square(head(x)))
    ad.backward(t1, l1)
    g1 = [b.grad.copy() for b in head.blocks]
    with ad.Tape() as t2:
        l2 = ad.sum(ad.square(head.reference(x)))
    ad.backward(t2, l2)
    g2 = [b.grad.copy() for b in head.blocks]
    assert float(ad.value(l1)) == pytest.approx(float(ad.value(l2)), rel=1e-12)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_cumsum_and_cumprod_exclusive(rng):
    x0 = rng.uniform(0.1, 0.9, size=(3, 6))
    v = ad.value(ad.cumprod_exclusive(x0))
    ref = np.concatenate([np.ones((3, 1)), np.cumprod(x0, axis=1)[:, :-1]], axis=1)
    np.testing.assert_allclose(v, ref)
    g, _ = grad(lambda x: ad.sum(ad.mul(ad.cumprod_exclusive(x), np.arange(6.0))), x0)
    num = numeric_grad(lambda x: float(np.sum(np.concatenate(
        [np.ones((3, 1)), np.cumprod(x, axis=1)[:, :-1]], axis=1) * np.arange(6.0))), x0)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)
    ex = ad.value(ad.cumsum(x0, exclusive=True))
    np.testing.assert_allclose(ex[:, 0], 0.0)
    np.testing.assert_allclose(ex[:, 1:], np.cumsum(x0, axis=1)[:, :-1])


def test_take_and_scatter_rows_roundtrip(rng):
    x0 = rng.normal(size=(5, 2))
    rows = np.array([0, 2, 2, 4])
    g, _ = grad(lambda x: ad.sum(ad.take_rows(x, rows)), x0)
    np.testing.assert_allclose(g, np.array([1, 0, 2, 0, 1])[:, None] * np.ones((5, 2)))
    s = ad.value(ad.scatter_rows(x0[:2], np.array([1, 3]), 4, fill=7.0))
    np.testing.assert_allclose(s[[0, 2]], 7.0)
    np.testing.assert_allclose(s[[1, 3]], x0[:2])


def test_backward_overwrites_and_unreached_blocks_get_zero():
    a, b = ParameterBlock("a", [1.0, 2.0]), ParameterBlock("b", [3.0])
    b.grad[...] = 99.0
    with ad.Tape() as tape:
        pa, _ = ad.param(a), ad.param(b)
        loss = ad.sum(ad.square(pa))
    ad.backward(tape, loss)
    ad.backward(tape, loss)
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])
    np.testing.assert_array_equal(b.grad, [0.0])


def test_backward_rejects_non_scalar_loss():
    a = ParameterBlock("a", [1.0, 2.0])
    with ad.Tape() as tape:
        y = ad.square(ad.param(a))
    with pytest.raises(ValueError):
        ad.backward(tape, y)


def test_no_tape_degrades_to_numpy():
    out = ad.add(np.ones(3), 2.0)
    assert isinstance(out, np.ndarray)


def test_watch_restricts_leaves():
    a, b = ParameterBlock("a", [1.0]), ParameterBlock("b", [2.0])
    with ad.Tape(watch=[a]) as tape:
        loss = ad.sum(ad.mul(ad.param(a), ad.param(b)))
    ad.backward(tape, loss)
    assert a.grad[0] == 2.0
    assert b.grad[0] == 0.0


@given(arrays(np.float64, (3, 4), elements=finite))
def test_sum_mean_gradients_are_constant(x0):
    g, _ = grad(lambda x: ad.mean(x), x0)
    np.testing.assert_allclose(g, np.full_like(x0, 1 / x0.size))


@given(arrays(np.float64, 6, elements=finite), st.floats(-1, 0), st.floats(0.01, 1))
def test_clip_gradient_vanishes_outside(x0, lo, width):
    hi = lo + width
    g, _ = grad(lambda x: ad.sum(ad.clip(x, lo, hi)), x0)
    inside = (x0 > lo) & (x0 < hi)
    np.testing.assert_array_equal(g[~((x0 >= lo) & (x0 <= hi))], 0.0)
    np.testing.assert_array_equal(g[inside], 1.0)


def test_adam_first_step_is_lr_times_sign():
    b = ParameterBlock("p", [0.0, 0.0, 0.0])
    b.grad[...] = [3.0, -0.5, 0.0]
    adam_step(b, AdamState(lr=0.1))
    np.testing.assert_allclose(b.values, [-0.1, 0.1, 0.0], atol=1e-6)
    np.testing.assert_array_equal(b.grad, 0.0)


def test_adam_clips_global_norm_and_rejects_nan():
    b = ParameterBlock("p", np.zeros(2))
    opt = Adam([b], [1.0], clip_norm=1.0)
    b.grad[...] = [30.0, 40.0]
    assert opt.global_norm() == pytest.approx(50.0)
    opt.step()
    np.testing.assert_allclose(opt.states[0].m, 0.1 * np.array([0.6, 0.8]))
    b.grad[...] = [np.nan, 0.0]
    with pytest.raises(DivergedError):
        opt.step()


def test_adam_minimises_a_quadratic():
    b = ParameterBlock("p", [5.0, -3.0])
    opt = Adam([b], [0.1])
    for _ in range(400):
        with ad.Tape() as tape:
            loss = ad.sum(ad.square(ad.sub(ad.param(b), [1.0, 2.0])))
        ad.backward(tape, loss)
        opt.step()
    np.testing.assert_allclose(b.values, [1.0, 2.0], atol=1e-2)


def test_finite_diff_check_reports_small_error(rng):
    b = ParameterBlock("p", rng.normal(size=4))

    def f():
        return float(np.sum(np.sin(b.values) * b.values))

    with ad.Tape() as tape:
        x = ad.param(b)
        loss = ad.sum(ad.mul(ad.sin(x), x))
    ad.backward(tape, loss)
    assert finite_diff_check(f, b) < 1e-8
    assert finite_diff_check(f, b, analytic=b.grad + 1.0) > 0.5
