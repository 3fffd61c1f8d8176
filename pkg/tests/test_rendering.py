import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from inrslam import autodiff as ad
from inrslam.rendering import (RenderFunctionConfig, composite, compute_weights, density_sigma, surface_alpha,
                               weights_density, weights_direct, weights_from_alpha, weights_surface)

sdf_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 12)),
                  elements=st.floats(-3, 3, allow_nan=False))


def test_direct_weight_at_zero_is_a_quarter():
    cfg = RenderFunctionConfig("direct", normalize_weights=False)
    assert ad.value(weights_direct(np.zeros((1, 1)), cfg))[0, 0] == 0.25


@given(sdf_rows)
def test_direct_weight_symmetric(s):
    cfg = RenderFunctionConfig("direct", normalize_weights=False)
    np.testing.assert_array_equal(ad.value(weights_direct(s, cfg)), ad.value(weights_direct(-s, cfg)))


@given(sdf_rows)
def test_direct_normalised_weights_sum_to_one(s):
    w = ad.value(weights_direct(s, RenderFunctionConfig("direct")))
    np.testing.assert_allclose(w.sum(-1), 1.0, rtol=1e-12)


@given(sdf_rows, st.floats(0.5, 50))
def test_density_transmittance_non_increasing_and_sum_bounded(s, beta):
    cfg = RenderFunctionConfig("density", beta_init=beta)
    sigma = ad.value(density_sigma(np.clip(s, -1.1, 1.1), beta))
    trans = np.exp(-np.concatenate([np.zeros((len(s), 1)), np.cumsum(sigma, -1)[:, :-1]], -1))
    assert np.all(np.diff(trans, axis=-1) <= 0)
    w = ad.value(weights_density(s, cfg))
    assert np.all(w >= 0)
    assert np.all(w.sum(-1) <= 1 + 1e-12)


@given(sdf_rows)
def test_surface_weights_sum_bounded(s):
    w = ad.value(weights_surface(s, RenderFunctionConfig("surface")))
    assert np.all(w >= 0)
    assert np.all(w.sum(-1) <= 1 + 1e-12)


def test_surface_alpha_telescoping_example():
    w = ad.value(weights_from_alpha(np.array([[0.5, 1.0]])))
    np.testing.assert_allclose(w, [[0.5, 0.5]])


def test_surface_alpha_clamped_and_last_zero():
    a = ad.value(surface_alpha(np.array([[-0.5, 0.5, 0.2]])))
    assert a[0, 0] == 0.0  # sdf increasing: no occupancy
    assert a[0, -1] == 0.0
    assert 0 < a[0, 1] < 1


def test_masked_samples_carry_no_weight():
    s = np.array([[1.0, 0.05, -0.05, -1.0]])
    m = np.array([[True, False, True, True]])
    for kind in ("direct", "density", "surface"):
        w = ad.value(compute_weights(s, RenderFunctionConfig(kind), m))
        assert w[0, 1] == 0.0


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        RenderFunctionConfig("nerf")


def test_composite_depth_and_colour():
    w = np.array([[0.25, 0.75]])
    col = np.array([[[1.0, 0, 0], [0, 1.0, 0]]])
    d = np.array([[1.0, 2.0]])
    r = composite(w, col, d)
    np.testing.assert_allclose(ad.value(r.color), [[0.25, 0.75, 0]])
    np.testing.assert_allclose(ad.value(r.depth), [1.75])
    # unnormalised weights: depth divided by the weight sum
    r2 = composite(0.5 * w, col, d)
    np.testing.assert_allclose(ad.value(r2.depth), [1.75])


def test_direct_peak_near_zero_crossing():
    s = np.linspace(1, -1, 41)[None]
    w = ad.value(weights_direct(s, RenderFunctionConfig("direct")))
    assert abs(s[0, np.argmax(w)]) < 0.06
