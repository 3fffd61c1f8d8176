import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from inrslam import autodiff as ad
from inrslam.autodiff import ParameterBlock
from inrslam.encodings import (AABB, DenseGridEncoding, FactorizationEncoding, HashGridEncoding, HybridEncoding,
                               PositionalEncoding, QueryOutOfBounds, TriPlaneEncoding, corner_counts, hash_index,
                               lattice_interp, make_encoding)

BOX = AABB((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
points = arrays(np.float64, (8, 3), elements=st.floats(-1, 1, allow_nan=False))


def test_corner_counts_cover_extent():
    assert corner_counts(np.array([2.0, 2.0, 2.0]), 0.5) == (5, 5, 5)
    assert corner_counts(np.array([2.0]), 0.3) == (8,)


def test_interpolation_reproduces_linear_field(rng):
    # a table holding a*x + b*y + c*z + d at corners is reproduced exactly by trilinear interpolation
    enc = DenseGridEncoding(BOX, (0.25,), dim=1, rng=rng)
    n = enc.counts[0]
    g = np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), -1).reshape(-1, 3) * 0.25 - 1.0
    coef = np.array([0.3, -1.2, 2.0])
    enc.tables[0].values[:, 0] = g @ coef + 0.5
    p = rng.uniform(-1, 1, size=(50, 3))
    np.testing.assert_allclose(ad.value(enc(p))[:, 0], p @ coef + 0.5, atol=1e-12)


@given(points)
def test_interpolation_is_a_convex_combination(p):
    enc = DenseGridEncoding(BOX, (0.5,), dim=2, rng=np.random.default_rng(0))
    tv = enc.tables[0].values
    out = ad.value(enc(p))
    assert np.all(out <= tv.max(0) + 1e-12) and np.all(out >= tv.min(0) - 1e-12)


def test_hash_index_in_range_and_deterministic(rng):
    c = rng.integers(0, 1000, size=(100, 3))
    h = hash_index(c, 1 << 10)
    assert h.min() >= 0 and h.max() < 1 << 10
    np.testing.assert_array_equal(h, hash_index(c, 1 << 10))
    assert hash_index(np.array([[0, 0, 0]]), 16)[0] == 0


@pytest.mark.parametrize("kind", ["dense", "hash", "triplane", "factor", "hybrid"])
def test_feature_and_point_gradients(kind, rng):
    enc = make_encoding(kind, BOX, (0.5, 0.25), 2, rng, "e", log2_hash=8)
    p0 = rng.uniform(-0.9, 0.9, size=(6, 3))
    wts = rng.normal(size=(6, enc.out_dim))
    P = ParameterBlock("p", p0)
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(enc(ad.param(P)), wts))
    ad.backward(tape, loss)

    def f():
        return float(np.sum(ad.value(enc(P.values)) * wts))

    for b in enc.blocks:
        idx = np.flatnonzero(b.grad.reshape(-1))[:10]
        assert ad.finite_diff_check(f, b, h=1e-6, indices=idx) < 1e-7
    assert ad.finite_diff_check(f, P, h=1e-7) < 1e-5


def test_out_of_bounds_query_raises(rng):
    enc = DenseGridEncoding(BOX, (0.5,), rng=rng)
    with pytest.raises(QueryOutOfBounds):
        enc(np.array([[0.0, 0.0, 1.5]]))


def test_output_dims(rng):
    assert TriPlaneEncoding(BOX, (0.5, 0.25), 3, rng=rng).out_dim == 6
    assert FactorizationEncoding(BOX, (0.5, 0.25), 2, rng=rng).out_dim == 4
    assert HybridEncoding(BOX, (0.5, 0.25), 2, rng=rng).out_dim == 6
    assert HashGridEncoding(BOX, (0.5,), 2, log2_table=6, rng=rng).tables[0].values.shape == (64, 2)


def test_positional_encoding_layout():
    pe = PositionalEncoding(2)
    out = ad.value(pe(np.array([[0.25, 0.0, 0.5]])))
    assert out.shape == (1, pe.out_dim) == (1, 15)
    np.testing.assert_allclose(out[0, 3:6], np.sin(np.pi * np.array([0.25, 0.0, 0.5])), atol=1e-15)


def test_lattice_interp_at_corner_returns_corner(rng):
    table = rng.normal(size=(9, 2))
    out = lattice_interp(table, np.array([[0.5, 0.5, 0.0]]), (0.0, 0.0, 0.0), 0.5, (3, 3), (0, 1))
    np.testing.assert_allclose(out, table[[4]])
