"""Spatial feature encodings: positional encoding, dense/hash grids, planes, lines.

All lattice encodings share :func:`lattice_interp`, a primitive that is
differentiable with respect to both the feature table and the query point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterBlock

HASH_PRIMES = (1, 2654435761, 805459861)


class QueryOutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class AABB:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi, float) - np.asarray(self.lo, float)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p)
        return np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)

    def normalize(self, p):
        lo = np.asarray(self.lo, float)
        return ad.div(ad.sub(p, lo), self.extent)

    def check(self, p) -> None:
        pv = ad.value(p)
        if pv.size and not np.all(self.contains(pv)):
            raise QueryOutOfBounds("query point outside the scene bounding box")


def corner_counts(extent: np.ndarray, cell: float) -> tuple[int, ...]:
    """Corners per axis so that the lattice covers ``extent`` (ceil(extent/cell) + 1)."""
    return tuple(int(math.ceil(e / cell - 1e-9)) + 1 for e in np.atleast_1d(extent))


def hash_index(coords: np.ndarray, table_size: int) -> np.ndarray:
    """XOR of coordinate-times-prime, modulo a power-of-two table size."""
    c = coords.astype(np.uint64)
    h = c[..., 0] * np.uint64(HASH_PRIMES[0])
    h ^= c[..., 1] * np.uint64(HASH_PRIMES[1])
    h ^= c[..., 2] * np.uint64(HASH_PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def _corner_weights(t: np.ndarray, with_grad: bool = True):
    """Multilinear corner weights and their partials w.r.t. the local coords.

    Returns offsets (K, D), weights (n, K) and dweights (n, K, D) (``None``
    unless ``with_grad``).
    """
    n, d = t.shape
    offsets = np.array(list(product((0, 1), repeat=d)), dtype=np.int64)
    lo, hi = 1.0 - t, t
    # per-axis factor for each corner, gathered column-wise to avoid (n, K, D) temporaries
    cols = [[hi[:, a] if o else lo[:, a] for a, o in enumerate(off)] for off in offsets]
    weights = np.empty((n, len(offsets)))
    for k, fs in enumerate(cols):
        w = fs[0].copy()
        for f in fs[1:]:
            w *= f
        weights[:, k] = w
    if not with_grad:
        return offsets, weights, None
    dweights = np.empty((n, len(offsets), d))
    for k, fs in enumerate(cols):
        for a in range(d):
            g = np.ones(n) if d == 1 else None
            for b in range(d):
                if b != a:
                    g = fs[b].copy() if g is None else g * fs[b]
            dweights[:, k, a] = g if offsets[k, a] else -g
    return offsets, weights, dweights


def lattice_interp(table, p, origin, cell: float, counts, axes, hash_size: int | None = None):
    """Multilinear interpolation of a corner-feature table at points ``p``.

    ``axes`` picks which coordinates of ``p`` span the lattice (1, 2 or 3 of
    them); ``counts`` are the corner counts along those axes.  With
    ``hash_size`` the corner features are fetched through :func:`hash_index`.
    """
    tv = ad.value(table)
    pv = ad.value(p)
    axes = tuple(axes)
    u = (pv[:, axes] - np.asarray(origin, float)[list(axes)]) / cell
    hi = np.asarray(counts) - 2
    i0 = np.clip(np.floor(u).astype(np.int64), 0, hi)
    t = u - i0
    offsets, w, dw = _corner_weights(t, with_grad=isinstance(p, ad.Node))
    if hash_size is not None:
        ids = hash_index(i0[:, None, :] + offsets[None, :, :], hash_size)
    else:
        strides = np.cumprod((tuple(counts)[1:] + (1,))[::-1])[::-1]
        ids = (i0 @ strides)[:, None] + (offsets @ strides)[None, :]
    feats = tv[ids]  # n,K,F
    out = np.einsum("nk,nkf->nf", w, feats)

    def vjp(g):
        g_table = None
        if isinstance(table, ad.Node):
            vals = w[:, :, None] * g[:, None, :]
            g_table = ad.scatter_rows_add(tv.shape[0], ids.reshape(-1), vals.reshape(-1, tv.shape[1]))
        g_p = None
        if isinstance(p, ad.Node):
            gf = np.einsum("nf,nkf->nk", g, feats)
            g_p = np.zeros_like(pv)
            g_p[:, axes] = np.einsum("nk,nka->na", gf, dw) / cell
        return g_table, g_p

    return ad.custom(out, (table, p), vjp)


def _init_table(rng: np.random.Generator, n: int, dim: int, scale: float = 1e-2) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(n, dim))


class PositionalEncoding:
    """Frequency encoding of AABB-normalised coordinates."""

    def __init__(self, num_frequencies: int, include_input: bool = True, input_dim: int = 3):
        self.num_frequencies = num_frequencies
        self.include_input = include_input
        self.input_dim = input_dim

    @property
    def out_dim(self) -> int:
        return self.input_dim * (2 * self.num_frequencies + int(self.include_input))

    def __call__(self, p):
        parts = [p] if self.include_input else []
        for k in range(self.num_frequencies):
            arg = ad.mul(p, (2.0 ** k) * np.pi)
            parts.append(ad.sin(arg))
            parts.append(ad.cos(arg))
        return ad.concat(parts, axis=-1)

    @property
    def blocks(self) -> list[ParameterBlock]:
        return []


class Encoding:
    """Base class: per-level feature interpolation + parameter bookkeeping."""

    aabb: AABB
    dim: int
    cells: tuple[float, ...]

    @property
    def blocks(self) -> list[ParameterBlock]:
        raise NotImplementedError

    @property
    def out_dim(self) -> int:
        raise NotImplementedError

    def levels(self, p) -> list:
        raise NotImplementedError

    def __call__(self, p):
        self.aabb.check(p)
        lv = self.levels(p)
        return lv[0] if len(lv) == 1 else ad.concat(lv, axis=-1)


class NoEncoding(Encoding):
    """Placeholder for the pure-MLP model (positional encoding only)."""

    def __init__(self, aabb: AABB):
        self.aabb = aabb
        self.dim = 0
        self.cells = ()

    @property
    def blocks(self):
        return []

    @property
    def out_dim(self):
        return 0

    def __call__(self, p):
        return np.zeros((len(ad.value(p)), 0))


class DenseGridEncoding(Encoding):
    def __init__(self, aabb: AABB, cells=(0.24, 0.02), dim: int = 2, rng=None, prefix: str = "dense"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.aabb, self.cells, self.dim = aabb, tuple(cells), dim
        self.counts = [corner_counts(aabb.extent, c) for c in self.cells]
        self.tables = [
            ParameterBlock(f"{prefix}.level{i}", _init_table(rng, int(np.prod(n)), dim))
            for i, n in enumerate(self.counts)
        ]

    @property
    def blocks(self):
        return list(self.tables)

    @property
    def out_dim(self):
        return self.dim * len(self.cells)

    def level(self, i: int, p):
        return lattice_interp(ad.param(self.tables[i]), p, self.aabb.lo, self.cells[i], self.counts[i], (0, 1, 2))

    def levels(self, p):
        return [self.level(i, p) for i in range(len(self.cells))]


class HashGridEncoding(Encoding):
    def __init__(self, aabb: AABB, cells=(0.24, 0.02), dim: int = 2, log2_table: int = 13, rng=None,
                 prefix: str = "hash"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.aabb, self.cells, self.dim = aabb, tuple(cells), dim
        self.table_size = 1 << log2_table
        self.counts = [corner_counts(aabb.extent, c) for c in self.cells]
        self.tables = [
            ParameterBlock(f"{prefix}.level{i}", _init_table(rng, self.table_size, dim))
            for i in range(len(self.cells))
        ]

    @property
    def blocks(self):
        return list(self.tables)

    @property
    def out_dim(self):
        return self.dim * len(self.cells)

    def levels(self, p):
        return [
            lattice_interp(ad.param(t), p, self.aabb.lo, c, n, (0, 1, 2), hash_size=self.table_size)
            for t, c, n in zip(self.tables, self.cells, self.counts)
        ]


PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
# each line pairs with the plane spanned by the other two axes
LINE_PLANE = {0: "yz", 1: "xz", 2: "xy"}


class TriPlaneEncoding(Encoding):
    """Three axis-aligned feature planes per level, summed."""

    def __init__(self, aabb: AABB, cells=(0.24, 0.02), dim: int = 2, rng=None, prefix: str = "tri"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.aabb, self.cells, self.dim = aabb, tuple(cells), dim
        ext = aabb.extent
        self.plane_counts = []
        self.planes = []
        for i, c in enumerate(self.cells):
            counts = {k: corner_counts(ext[list(ax)], c) for k, ax in PLANE_AXES.items()}
            self.plane_counts.append(counts)
            self.planes.append({
                k: ParameterBlock(f"{prefix}.level{i}.{k}", _init_table(rng, int(np.prod(n)), dim))
                for k, n in counts.items()
            })

    @property
    def blocks(self):
        return [b for lv in self.planes for b in lv.values()]

    @property
    def out_dim(self):
        return self.dim * len(self.cells)

    def plane(self, i: int, key: str, p):
        ax = PLANE_AXES[key]
        lo = np.asarray(self.aabb.lo, float)
        return lattice_interp(ad.param(self.planes[i][key]), p, lo, self.cells[i], self.plane_counts[i][key], ax)

    def level(self, i: int, p):
        xy, xz, yz = (self.plane(i, k, p) for k in ("xy", "xz", "yz"))
        return ad.add(ad.add(xy, xz), yz)

    def levels(self, p):
        return [self.level(i, p) for i in range(len(self.cells))]


class FactorizationEncoding(TriPlaneEncoding):
    """Planes plus per-axis feature lines, combined as sum over axes of plane * line."""

    def __init__(self, aabb: AABB, cells=(0.24, 0.02), dim: int = 2, rng=None, prefix: str = "fac"):
        rng = np.random.default_rng(0) if rng is None else rng
        super().__init__(aabb, cells, dim, rng=rng, prefix=prefix)
        ext = aabb.extent
        self.line_counts = []
        self.lines = []
        for i, c in enumerate(self.cells):
            counts = {a: corner_counts(ext[[a]], c) for a in range(3)}
            self.line_counts.append(counts)
            self.lines.append({
                a: ParameterBlock(f"{prefix}.level{i}.line{'xyz'[a]}", _init_table(rng, counts[a][0], dim))
                for a in range(3)
            })

    @property
    def blocks(self):
        return super().blocks + [b for lv in self.lines for b in lv.values()]

    def line(self, i: int, axis: int, p):
        lo = np.asarray(self.aabb.lo, float)
        return lattice_interp(ad.param(self.lines[i][axis]), p, lo, self.cells[i], self.line_counts[i][axis], (axis,))

    def level(self, i: int, p):
        out = None
        for a in range(3):
            term = ad.mul(self.plane(i, LINE_PLANE[a], p), self.line(i, a, p))
            out = term if out is None else ad.add(out, term)
        return out


class HybridEncoding(Encoding):
    """Coarse tri-plane + coarse grid, fine grid only; segments concatenated."""

    def __init__(self, aabb: AABB, cells=(0.24, 0.02), dim: int = 2, rng=None, prefix: str = "hybrid"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.aabb, self.cells, self.dim = aabb, tuple(cells), dim
        self.coarse_planes = TriPlaneEncoding(aabb, (cells[0],), dim, rng=rng, prefix=f"{prefix}.coarse_tri")
        self.coarse_grid = DenseGridEncoding(aabb, (cells[0],), dim, rng=rng, prefix=f"{prefix}.coarse_grid")
        self.fine_grid = DenseGridEncoding(aabb, (cells[1],), dim, rng=rng, prefix=f"{prefix}.fine_grid")

    @property
    def blocks(self):
        return self.coarse_planes.blocks + self.coarse_grid.blocks + self.fine_grid.blocks

    @property
    def out_dim(self):
        return 3 * self.dim

    def levels(self, p):
        return [self.coarse_planes.level(0, p), self.coarse_grid.level(0, p), self.fine_grid.level(0, p)]


ENCODINGS = {
    "mlp": NoEncoding,
    "dense": DenseGridEncoding,
    "hash": HashGridEncoding,
    "triplane": TriPlaneEncoding,
    "factor": FactorizationEncoding,
    "hybrid": HybridEncoding,
}


def make_encoding(kind: str, aabb: AABB, cells, dim: int, rng, prefix: str, log2_hash: int = 13) -> Encoding:
    if kind == "mlp":
        return NoEncoding(aabb)
    if kind == "hash":
        return HashGridEncoding(aabb, cells, dim, log2_table=log2_hash, rng=rng, prefix=prefix)
    if kind == "explicit-hybrid":
        return DenseGridEncoding(aabb, (cells[-1],), dim, rng=rng, prefix=prefix)
    try:
        cls = ENCODINGS[kind]
    except KeyError:
        raise ValueError(f"unknown encoding {kind!r}") from None
    return cls(aabb, cells, dim, rng=rng, prefix=prefix)
