"""Sparse octree holding a fused projective SDF prior.

The tree is stored linearly: leaves at the finest depth are kept as sorted
packed integer keys, interior nodes are implied by key prefixes, and corner
SDF values are shared between neighbouring leaves.  Leaves are only allocated
inside the truncation band around observed surfaces.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .encodings import AABB, _corner_weights


class OctreeSDFPrior:
    def __init__(self, aabb: AABB, leaf_size: float = 0.04, truncation: float = 0.1,
                 max_weight: float = 100.0, near: float = 0.05):
        self.aabb = aabb
        self.leaf_size = float(leaf_size)
        self.truncation = float(truncation)
        self.max_weight = float(max_weight)
        self.near = near
        self.max_depth = max(0, int(math.ceil(math.log2(float(aabb.extent.max()) / leaf_size - 1e-9))))
        self.root_size = self.leaf_size * (1 << self.max_depth)
        self.origin = np.asarray(aabb.lo, float)
        self._n = 1 << self.max_depth
        self.leaf_keys = np.zeros(0, np.int64)
        self.corner_keys = np.zeros(0, np.int64)
        self.corner_sdf = np.zeros(0)
        self.corner_weight = np.zeros(0)

    # -- key packing ---------------------------------------------------------
    def _pack_leaf(self, c: np.ndarray) -> np.ndarray:
        n = self._n
        return (c[..., 0] * n + c[..., 1]) * n + c[..., 2]

    def _unpack_leaf(self, k: np.ndarray) -> np.ndarray:
        n = self._n
        return np.stack([k // (n * n), (k // n) % n, k % n], axis=-1)

    def _pack_corner(self, c: np.ndarray) -> np.ndarray:
        m = self._n + 1
        return (c[..., 0] * m + c[..., 1]) * m + c[..., 2]

    def _unpack_corner(self, k: np.ndarray) -> np.ndarray:
        m = self._n + 1
        return np.stack([k // (m * m), (k // m) % m, k % m], axis=-1)

    def corner_positions(self) -> np.ndarray:
        return self.origin + self._unpack_corner(self.corner_keys) * self.leaf_size

    @property
    def num_leaves(self) -> int:
        return len(self.leaf_keys)

    def nodes_at_level(self, level: int) -> np.ndarray:
        """Integer coordinates of occupied nodes at ``level`` (0 = root)."""
        shift = self.max_depth - level
        return np.unique(self._unpack_leaf(self.leaf_keys) >> shift, axis=0)

    def children(self, level: int, coord) -> np.ndarray:
        """Occupied child coordinates (level + 1) of the node at ``coord``."""
        kids = self.nodes_at_level(level + 1)
        return kids[np.all(kids >> 1 == np.asarray(coord), axis=1)]

    # -- fusion --------------------------------------------------------------
    def _allocate(self, points_band: np.ndarray) -> None:
        c = np.floor((points_band - self.origin) / self.leaf_size).astype(np.int64)
        ok = np.all((c >= 0) & (c < self._n), axis=1)
        new_leaves = np.unique(self._pack_leaf(c[ok]))
        new_leaves = np.setdiff1d(new_leaves, self.leaf_keys, assume_unique=True)
        if not len(new_leaves):
            return
        self.leaf_keys = np.union1d(self.leaf_keys, new_leaves)
        lc = self._unpack_leaf(new_leaves)
        offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        ck = np.unique(self._pack_corner((lc[:, None, :] + offs[None]).reshape(-1, 3)))
        fresh = np.setdiff1d(ck, self.corner_keys, assume_unique=True)
        if len(fresh):
            keys = np.concatenate([self.corner_keys, fresh])
            order = np.argsort(keys, kind="stable")
            self.corner_keys = keys[order]
            self.corner_sdf = np.concatenate([self.corner_sdf, np.zeros(len(fresh))])[order]
            self.corner_weight = np.concatenate([self.corner_weight, np.zeros(len(fresh))])[order]

    def fuse(self, depth: np.ndarray, intrinsics, c2w: np.ndarray) -> "OctreeSDFPrior":
        """Integrate one posed depth image (z-depth, metres; 0 = invalid)."""
        fx, fy, cx, cy = intrinsics
        h, w = depth.shape
        rows, cols = np.nonzero(depth > 0)
        if len(rows):
            d = depth[rows, cols]
            dirs = np.stack([(cols + 0.5 - cx) / fx, (rows + 0.5 - cy) / fy, np.ones_like(d)], axis=1)
            step = 0.5 * self.leaf_size
            offsets = np.arange(-self.truncation, self.truncation + 1e-12, step)
            z = d[:, None] + offsets[None, :]
            pts_cam = dirs[:, None, :] * z[..., None]
            pts = pts_cam.reshape(-1, 3) @ c2w[:3, :3].T + c2w[:3, 3]
            self._allocate(pts)
        if not len(self.corner_keys):
            return self
        w2c = np.linalg.inv(c2w)
        pc = self.corner_positions() @ w2c[:3, :3].T + w2c[:3, 3]
        z = pc[:, 2]
        front = z > self.near
        zs = np.where(front, z, 1.0)
        u = np.floor(fx * pc[:, 0] / zs + cx).astype(np.int64)
        v = np.floor(fy * pc[:, 1] / zs + cy).astype(np.int64)
        inside = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        dx = np.zeros_like(z)
        dx[inside] = depth[v[inside], u[inside]]
        sdf = dx - z
        upd = inside & (dx > 0) & (sdf >= -self.truncation)
        s = np.clip(sdf[upd], -self.truncation, self.truncation)
        wt = self.corner_weight[upd]
        self.corner_sdf[upd] = (self.corner_sdf[upd] * wt + s) / (wt + 1.0)
        self.corner_weight[upd] = np.minimum(wt + 1.0, self.max_weight)
        return self

    # -- queries -------------------------------------------------------------
    def _lookup(self, p: np.ndarray):
        u = (p - self.origin) / self.leaf_size
        c = np.floor(u).astype(np.int64)
        in_root = np.all((c >= 0) & (c < self._n), axis=1)
        c = np.clip(c, 0, self._n - 1)
        t = u - c
        leaf = self._pack_leaf(c)
        pos = np.searchsorted(self.leaf_keys, leaf)
        pos_c = np.minimum(pos, max(len(self.leaf_keys) - 1, 0))
        has_leaf = in_root & (len(self.leaf_keys) > 0)
        if len(self.leaf_keys):
            has_leaf &= self.leaf_keys[pos_c] == leaf
        offsets, w, dw = _corner_weights(t)
        ck = self._pack_corner(c[:, None, :] + offsets[None])
        slot = np.searchsorted(self.corner_keys, ck)
        slot = np.minimum(slot, max(len(self.corner_keys) - 1, 0))
        if len(self.corner_keys):
            found = self.corner_keys[slot] == ck
            vals = self.corner_sdf[slot]
            wts = np.where(found, self.corner_weight[slot], 0.0)
        else:
            vals = np.zeros_like(w)
            wts = np.zeros_like(w)
        known = has_leaf & np.all(wts > 0, axis=1)
        return known, w, dw, vals

    def query(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear SDF (metres) and a known-mask; unknown points report ``T``."""
        p = np.atleast_2d(np.asarray(p, float))
        known, w, _, vals = self._lookup(p)
        sdf = np.where(known, np.sum(w * vals, axis=1), self.truncation)
        return sdf, known

    def query_node(self, p):
        """Differentiable (w.r.t. ``p``) version of :meth:`query`'s SDF."""
        pv = ad.value(p)
        known, w, dw, vals = self._lookup(pv)
        sdf = np.where(known, np.sum(w * vals, axis=1), self.truncation)

        def vjp(g):
            gp = np.einsum("nk,nka->na", vals, dw) / self.leaf_size
            return (np.where(known[:, None], gp * g[:, None], 0.0),)

        return ad.custom(sdf, (p,), vjp)

    # -- serialisation -------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "leaf_keys": self.leaf_keys.astype(np.float64),
            "corner_keys": self.corner_keys.astype(np.float64),
            "corner_sdf": self.corner_sdf.copy(),
            "corner_weight": self.corner_weight.copy(),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.leaf_keys = arrays["leaf_keys"].astype(np.int64)
        self.corner_keys = arrays["corner_keys"].astype(np.int64)
        self.corner_sdf = np.asarray(arrays["corner_sdf"], float).copy()
        self.corner_weight = np.asarray(arrays["corner_weight"], float).copy()
