"""Metrics: PSNR, depth L1, ATE, marching cubes, culling and mesh accuracy/completion."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import CORNERS, EDGE_CORNERS, TRIANGLES

PSNR_CAP = 99.0


# --------------------------------------------------------------------------
# image metrics
# --------------------------------------------------------------------------

def psnr(rendered: np.ndarray, reference: np.ndarray, cap: float = PSNR_CAP) -> float:
    rendered = np.asarray(rendered, float)
    reference = np.asarray(reference, float)
    if rendered.shape != reference.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {reference.shape}")
    mse = float(np.mean((rendered - reference) ** 2))
    if mse == 0.0:
        return cap
    return min(-10.0 * math.log10(mse), cap)


def depth_l1(rendered: np.ndarray, reference: np.ndarray) -> float | None:
    """Mean absolute depth error in cm over pixels with reference depth; None if there are none."""
    rendered = np.asarray(rendered, float)
    reference = np.asarray(reference, float)
    m = reference > 0
    if not m.any():
        return None
    return float(100.0 * np.mean(np.abs(rendered[m] - reference[m])))


# --------------------------------------------------------------------------
# trajectory
# --------------------------------------------------------------------------

def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimising ``sum |R src_i + t - dst_i|^2`` (Kabsch, no scale)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def ate_rmse(estimated, reference) -> float | None:
    """Translational RMSE (cm) after rigid alignment of ``estimated`` onto ``reference``."""
    est = np.array([np.asarray(p)[:3, 3] if np.ndim(p) == 2 else p for p in estimated], float)
    ref = np.array([np.asarray(p)[:3, 3] if np.ndim(p) == 2 else p for p in reference], float)
    if est.shape != ref.shape:
        raise ValueError("trajectories must have matching length")
    if len(est) < 3:
        return None
    R, t = rigid_align(est, ref)
    res = est @ R.T + t - ref
    return float(100.0 * np.sqrt(np.mean(np.sum(res**2, axis=1))))


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) metres
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def lattice(lo, hi, voxel: float) -> tuple[np.ndarray, tuple[int, int, int]]:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    counts = tuple(int(math.floor((h - l) / voxel + 1e-9)) + 1 for l, h in zip(lo, hi))
    axes = [lo[a] + voxel * np.arange(counts[a]) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return grid, counts


def marching_cubes_grid(values: np.ndarray, origin, voxel: float, iso: float = 0.0) -> Mesh:
    """Triangulate the ``iso`` level set of a regular scalar grid.

    Vertices on shared lattice edges are merged; NaN samples count as outside.
    """
    vals = np.where(np.isnan(values), np.inf, values) - iso
    nx, ny, nz = vals.shape
    if min(nx, ny, nz) < 2:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    below = vals < 0
    case = np.zeros((nx - 1, ny - 1, nz - 1), np.int64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << k
    cells = np.argwhere((case > 0) & (case < 255))
    if not len(cells):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    rows = TRIANGLES[case[cells[:, 0], cells[:, 1], cells[:, 2]]]  # (m, 16)
    tri_edges, tri_cells = [], []
    for s in range(5):
        e = rows[:, 3 * s:3 * s + 3]
        ok = e[:, 0] >= 0
        tri_edges.append(e[ok])
        tri_cells.append(cells[ok])
    tri_edges = np.concatenate(tri_edges)  # (T, 3)
    tri_cells = np.concatenate(tri_cells)  # (T, 3)
    # global id of each lattice edge: (min corner, axis)
    ca = CORNERS[EDGE_CORNERS[:, 0]]
    cb = CORNERS[EDGE_CORNERS[:, 1]]
    e_origin = np.minimum(ca, cb)  # (12, 3)
    e_axis = np.argmax(np.abs(cb - ca), axis=1)  # (12,)
    org = tri_cells[:, None, :] + e_origin[tri_edges]  # (T, 3, 3)
    gid = (np.ravel_multi_index((org[..., 0], org[..., 1], org[..., 2]), (nx, ny, nz)) * 3 + e_axis[tri_edges])
    uniq, inv = np.unique(gid.reshape(-1), return_inverse=True)
    base = np.stack(np.unravel_index(uniq // 3, (nx, ny, nz)), axis=1)
    axis = uniq % 3
    tip = base.copy()
    tip[np.arange(len(tip)), axis] += 1
    v0 = vals[base[:, 0], base[:, 1], base[:, 2]]
    v1 = vals[tip[:, 0], tip[:, 1], tip[:, 2]]
    frac = np.clip(v0 / (v0 - v1), 0.0, 1.0)
    frac = np.where(np.isfinite(frac), frac, 0.5)
    frac = np.where(frac < 1e-9, 0.0, np.where(frac > 1.0 - 1e-9, 1.0, frac))
    verts = np.asarray(origin, float) + voxel * (base + frac[:, None] * (tip - base))
    # vertices landing exactly on a lattice point are shared by several edges; merge them
    snapped = np.where((frac == 0.0)[:, None], base, np.where((frac == 1.0)[:, None], tip, -1))
    on_point = snapped[:, 0] >= 0
    key = np.where(on_point, np.ravel_multi_index(tuple(np.maximum(snapped, 0).T), (nx, ny, nz)),
                   -1 - np.arange(len(frac)))
    _, merged = np.unique(key, return_inverse=True)
    first = np.zeros(merged.max() + 1, np.int64)
    first[merged[::-1]] = np.arange(len(merged))[::-1]
    faces = merged[inv.reshape(-1, 3)]
    mesh = Mesh(verts[first], faces)
    return drop_degenerate(mesh)


def drop_degenerate(mesh: Mesh, eps: float = 1e-14) -> Mesh:
    f = mesh.faces
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    if len(f):
        ok &= mesh.areas() > eps
    return compact(Mesh(mesh.vertices, f[ok]))


def compact(mesh: Mesh) -> Mesh:
    """Drop unreferenced vertices and reindex faces."""
    used = np.unique(mesh.faces)
    remap = np.full(len(mesh.vertices), -1, np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[mesh.faces])


def marching_cubes(sdf, lo, hi, voxel: float = 0.02, chunk: int = 500_000) -> Mesh:
    """Zero level set of ``sdf`` (callable on (n, 3) points, or a model with ``sdf_metric``)."""
    fn = sdf.sdf_metric if hasattr(sdf, "sdf_metric") else sdf
    grid, counts = lattice(lo, hi, voxel)
    pts = grid.reshape(-1, 3)
    vals = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        vals[s:s + chunk] = fn(pts[s:s + chunk])
    return marching_cubes_grid(vals.reshape(counts), lo, voxel)


def edge_use_counts(mesh: Mesh) -> np.ndarray:
    """How many faces use each undirected edge."""
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def cull_mesh(mesh: Mesh, poses, intrinsics, depths, truncation: float = 0.1, near: float = 0.05) -> Mesh:
    """Keep faces with a vertex inside some frame's frustum and not behind its observed depth + T."""
    if mesh.empty:
        return mesh
    fx, fy, cx, cy = intrinsics
    v = mesh.vertices
    seen = np.zeros(len(v), bool)
    for P, D in zip(poses, depths):
        h, w = D.shape
        Rw, tw = P[:3, :3], P[:3, 3]
        pc = (v - tw) @ Rw  # world -> camera
        z = pc[:, 2]
        front = z > near
        zs = np.where(front, z, 1.0)
        u = np.floor(fx * pc[:, 0] / zs + cx).astype(np.int64)
        r = np.floor(fy * pc[:, 1] / zs + cy).astype(np.int64)
        inside = front & (u >= 0) & (u < w) & (r >= 0) & (r < h)
        d = np.zeros(len(v))
        d[inside] = D[r[inside], u[inside]]
        seen |= inside & (d > 0) & (z <= d + truncation)
    keep = seen[mesh.faces].any(axis=1)
    return compact(Mesh(v, mesh.faces[keep]))


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform random points on the mesh."""
    if mesh.empty:
        return np.zeros((0, 3))
    a = mesh.areas()
    tri = rng.choice(len(a), size=n, p=a / a.sum())
    u, w = rng.random(n), rng.random(n)
    flip = u + w > 1
    u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
    v = mesh.vertices[mesh.faces[tri]]
    return v[:, 0] + u[:, None] * (v[:, 1] - v[:, 0]) + w[:, None] * (v[:, 2] - v[:, 0])


# --------------------------------------------------------------------------
# nearest neighbours
# --------------------------------------------------------------------------

class GridIndex:
    """Exact nearest-neighbour queries (k-d tree backed)."""

    def __init__(self, points: np.ndarray, cell: float = 0.05):
        self.points = np.asarray(points, float).reshape(-1, 3)
        if not len(self.points):
            raise ValueError("empty point set")
        self.cell = float(cell)  # kept for config compatibility; the tree needs no bucket size
        self._tree = cKDTree(self.points)

    def query(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(q, float).reshape(-1, 3)
        dist, idx = self._tree.query(q, k=1)
        return np.asarray(dist, float), np.asarray(idx, np.int64)


def brute_force_nn(points: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.linalg.norm(q[:, None, :] - points[None, :, :], axis=-1)
    i = d.argmin(1)
    return d[np.arange(len(q)), i], i


@dataclass
class MeshScores:
    accuracy_cm: float | None
    completion_cm: float | None
    completion_ratio: float


def mesh_scores_from_samples(recon_pts: np.ndarray, ref_pts: np.ndarray, threshold: float = 0.05,
                             cell: float = 0.05) -> MeshScores:
    if not len(recon_pts) or not len(ref_pts):
        return MeshScores(None, None, 0.0)
    d_acc, _ = GridIndex(ref_pts, cell).query(recon_pts)
    d_comp, _ = GridIndex(recon_pts, cell).query(ref_pts)
    return MeshScores(float(100 * d_acc.mean()), float(100 * d_comp.mean()),
                      float(100 * np.mean(d_comp < threshold)))


def mesh_scores(recon: Mesh, reference: Mesh, n: int = 100_000, seed: int = 0,
                threshold: float = 0.05) -> MeshScores:
    """Accuracy (cm), completion (cm) and completion ratio (% of reference samples within ``threshold``)."""
    if recon.empty or reference.empty:
        return MeshScores(None, None, 0.0)
    # independent but identically seeded streams: identical meshes yield identical samples
    a = sample_surface(recon, n, np.random.default_rng(seed))
    b = sample_surface(reference, n, np.random.default_rng(seed))
    return mesh_scores_from_samples(a, b, threshold)


def mesh_accuracy(recon: Mesh, reference: Mesh, **kw) -> float | None:
    return mesh_scores(recon, reference, **kw).accuracy_cm


def mesh_completion(recon: Mesh, reference: Mesh, **kw) -> float | None:
    return mesh_scores(recon, reference, **kw).completion_cm


def completion_ratio(recon: Mesh, reference: Mesh, **kw) -> float:
    return mesh_scores(recon, reference, **kw).completion_ratio


# --------------------------------------------------------------------------
# I/O and reports
# --------------------------------------------------------------------------

def write_ply(path, mesh: Mesh) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\nproperty float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.faces)}\nproperty list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(x)) for x in v) + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path) -> Mesh:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    nv = nf = 0
    i = 1
    while lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        i += 1
    body = lines[i + 1:]
    verts = np.array([[float(x) for x in l.split()[:3]] for l in body[:nv]]).reshape(-1, 3)
    faces = np.array([[int(x) for x in l.split()[1:4]] for l in body[nv:nv + nf]], np.int64).reshape(-1, 3)
    return Mesh(verts, faces)


@dataclass
class MetricsReport:
    ate_cm: float | None = None
    psnr_db: float | None = None
    depth_l1_cm: float | None = None
    acc_cm: float | None = None
    comp_cm: float | None = None
    comp_pct: float | None = None
    track_ms: float | None = None
    map_ms: float | None = None
    param_bytes: int | None = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, float) and not math.isfinite(v):
                v = None
            out[k] = v
        return out
