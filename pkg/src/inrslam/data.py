"""Procedural SDF scenes, oracle RGB-D rendering, trajectories and on-disk sequences."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import look_at, pose_to_tum, tum_to_pose
from .pipeline import Frame


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

class Primitive:
    def sdf(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Sphere(Primitive):
    center: tuple[float, float, float]
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class Box(Primitive):
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass
class Plane(Primitive):
    """Half-space ``n . p >= offset`` is outside (positive)."""

    normal: tuple[float, float, float]
    offset: float

    def sdf(self, p):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        return p @ n - self.offset


@dataclass
class Subtract(Primitive):
    base: Primitive
    cut: Primitive

    def sdf(self, p):
        return np.maximum(self.base.sdf(p), -self.cut.sdf(p))


@dataclass
class SyntheticScene:
    """Union of primitives, each with an RGB albedo."""

    primitives: list[Primitive]
    albedos: list[tuple[float, float, float]]
    aabb_lo: tuple[float, float, float] = (-2.0, -2.0, -2.0)
    aabb_hi: tuple[float, float, float] = (2.0, 2.0, 2.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = "scene"

    def __post_init__(self):
        if len(self.primitives) != len(self.albedos):
            raise ValueError("one albedo per primitive")
        a = np.asarray(self.albedos, float)
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("albedo must lie in [0, 1]")

    def _all(self, p):
        return np.stack([pr.sdf(p) for pr in self.primitives], axis=-1)

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return self._all(p).min(axis=-1)

    def albedo(self, p) -> np.ndarray:
        idx = self._all(np.asarray(p, float)).argmin(axis=-1)
        return np.asarray(self.albedos, float)[idx]

    def normal(self, p, eps: float = 1e-4) -> np.ndarray:
        p = np.asarray(p, float)
        g = np.stack([self.sdf(p + eps * e) - self.sdf(p - eps * e) for e in np.eye(3)], axis=-1)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.subtract(self.aabb_hi, self.aabb_lo)))


def room_planes(half: float) -> list[Plane]:
    """Six inward-facing walls of a cube room of half-size ``half``."""
    return [Plane(tuple(s * e), -half) for e in np.eye(3) for s in (1.0, -1.0)]


def lab_scene() -> SyntheticScene:
    walls = room_planes(1.8)
    wall_albedo = [(0.85, 0.80, 0.70), (0.55, 0.65, 0.80), (0.75, 0.85, 0.60),
                   (0.80, 0.60, 0.55), (0.45, 0.40, 0.35), (0.90, 0.90, 0.90)]
    objects = [
        Box((0.0, 0.0, -1.2), (0.35, 0.35, 0.6)),
        Sphere((0.0, 0.0, -0.25), 0.35),
        Subtract(Box((1.1, -1.1, -1.4), (0.3, 0.3, 0.4)), Sphere((1.1, -1.1, -1.0), 0.25)),
        Box((-1.2, 1.1, -1.5), (0.25, 0.4, 0.3)),
    ]
    obj_albedo = [(0.6, 0.4, 0.2), (0.9, 0.2, 0.2), (0.2, 0.6, 0.9), (0.3, 0.8, 0.3)]
    return SyntheticScene(walls + objects, wall_albedo + obj_albedo, name="lab")


def practical_scene() -> SyntheticScene:
    walls = room_planes(1.8)
    wall_albedo = [(0.70, 0.70, 0.75), (0.60, 0.55, 0.50), (0.80, 0.75, 0.65),
                   (0.55, 0.70, 0.60), (0.40, 0.40, 0.45), (0.95, 0.95, 0.95)]
    objects = [
        Box((0.3, 0.0, -1.35), (0.6, 0.4, 0.45)),
        Sphere((0.1, 0.1, -0.6), 0.3),
        Box((-1.0, -0.9, -1.2), (0.3, 0.3, 0.6)),
    ]
    obj_albedo = [(0.5, 0.35, 0.2), (0.2, 0.3, 0.9), (0.85, 0.75, 0.2)]
    return SyntheticScene(walls + objects, wall_albedo + obj_albedo, name="practical")


def sphere_scene(radius: float = 0.5) -> SyntheticScene:
    """A single sphere in an open box; used for the explicit-hybrid experiment."""
    return SyntheticScene([Sphere((0.0, 0.0, 0.0), radius)], [(0.8, 0.5, 0.3)],
                          aabb_lo=(-1.0, -1.0, -1.0), aabb_hi=(1.0, 1.0, 1.0), name="sphere")


SCENES = {"lab": lab_scene, "practical": practical_scene, "sphere": sphere_scene}


# --------------------------------------------------------------------------
# oracle rendering
# --------------------------------------------------------------------------

def default_intrinsics(width: int = 64, height: int = 48, fov_deg: float = 65.0):
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return (f, f, width / 2.0, height / 2.0)


def sphere_trace(scene: SyntheticScene, origins: np.ndarray, dirs: np.ndarray, t_max: float,
                 tol: float = 1e-5, max_steps: int = 256, t_min: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """March unit-direction rays; returns (t, hit)."""
    n = len(dirs)
    t = np.full(n, t_min)
    hit = np.zeros(n, bool)
    alive = np.ones(n, bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        d = scene.sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = np.abs(d) < tol
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, d)
        gone = done | (t[idx] > t_max)
        alive[idx[gone]] = False
    return t, hit


def render_oracle_frame(scene: SyntheticScene, pose: np.ndarray, intrinsics, size: tuple[int, int],
                        index: int = 0, ambient: float = 0.4, tol: float = 1e-5, max_steps: int = 256) -> Frame:
    """Ground-truth colour and z-depth by sphere tracing; misses get depth 0."""
    w, h = size
    fx, fy, cx, cy = intrinsics
    rows, cols = np.divmod(np.arange(h * w), w)
    d_cam = np.stack([(cols + 0.5 - cx) / fx, (rows + 0.5 - cy) / fy, np.ones(h * w)], axis=-1)
    norm = np.linalg.norm(d_cam, axis=-1)
    d_unit = d_cam / norm[:, None]
    dirs = d_unit @ pose[:3, :3].T
    origins = np.broadcast_to(pose[:3, 3], dirs.shape)
    t, hit = sphere_trace(scene, origins, dirs, t_max=scene.diameter * 2, tol=tol, max_steps=max_steps)
    depth = np.where(hit, t / norm, 0.0)
    pts = origins + t[:, None] * dirs
    color = np.zeros((h * w, 3))
    if hit.any():
        n = scene.normal(pts[hit])
        lam = np.abs(np.sum(n * dirs[hit], axis=-1))
        color[hit] = scene.albedo(pts[hit]) * (ambient + (1.0 - ambient) * lam)[:, None]
    color = np.round(np.clip(color, 0, 1) * 255) / 255
    return Frame(index, color.reshape(h, w, 3), depth.reshape(h, w), tuple(intrinsics), pose.copy())


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------

@dataclass
class SequenceSpec:
    scenario: str = "lab"
    width: int = 64
    height: int = 48
    n_frames: int = 30
    fov_deg: float = 65.0
    radius: float = 1.2
    height_amp: float = 0.15
    cam_z: float = 0.0
    arc_deg: float = 60.0
    start_deg: float = 0.0
    ramp: float = 0.2  # fraction of the sequence spent accelerating from rest
    noise_k: float = 0.005
    dropout: float = 0.01
    seed: int = 0
    scene: str | None = None

    def __post_init__(self):
        if self.scenario not in ("lab", "practical"):
            raise ValueError(f"unknown scenario {self.scenario!r}")

    @property
    def intrinsics(self):
        return default_intrinsics(self.width, self.height, self.fov_deg)

    @property
    def scene_name(self) -> str:
        return self.scene or self.scenario


def ease(t: np.ndarray, ramp: float = 0.2) -> np.ndarray:
    """Progress in [0, 1]: constant acceleration from rest over ``ramp``, then constant speed."""
    t = np.asarray(t, float)
    if ramp <= 0:
        return t
    c = 1.0 / (1.0 - ramp / 2)
    head = np.minimum(t, ramp) ** 2 / (2 * ramp)
    return c * np.where(t < ramp, head, t - ramp / 2)


def generate_trajectory(spec: SequenceSpec, center=(0.0, 0.0, 0.0)) -> list[np.ndarray]:
    """Lab: closed orbit with sinusoidal height; practical: open arc of ``arc_deg``."""
    n = spec.n_frames
    t = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    s = ease(t, spec.ramp)
    span = 2 * np.pi if spec.scenario == "lab" else math.radians(spec.arc_deg)
    ang = math.radians(spec.start_deg) + span * s
    z = spec.cam_z + spec.height_amp * np.sin(2 * np.pi * s)
    if spec.scenario == "practical":
        z = spec.cam_z + spec.height_amp * np.sin(np.pi * s)
    c = np.asarray(center, float)
    poses = []
    for a, zz in zip(ang, z):
        eye = c + np.array([spec.radius * math.cos(a), spec.radius * math.sin(a), zz])
        poses.append(look_at(eye, c))
    if spec.scenario == "lab" and n > 1:
        poses[-1] = poses[0].copy()
    return poses


def add_depth_noise(frame: Frame, k: float, dropout: float, rng: np.random.Generator) -> Frame:
    """Gaussian noise with std ``k * d^2`` plus random pixel dropout to 0."""
    d = frame.depth
    noisy = d + rng.standard_normal(d.shape) * k * d**2
    drop = rng.random(d.shape) < dropout
    noisy = np.where((d > 0) & ~drop, np.maximum(noisy, 0.0), 0.0)
    return Frame(frame.index, frame.color, noisy, frame.intrinsics, frame.gt_pose)


def generate_sequence(spec: SequenceSpec) -> tuple[SyntheticScene, list[Frame]]:
    scene = SCENES[spec.scene_name]()
    poses = generate_trajectory(spec, scene.center)
    rng = np.random.default_rng(spec.seed)
    frames = []
    for i, P in enumerate(poses):
        f = render_oracle_frame(scene, P, spec.intrinsics, (spec.width, spec.height), index=i)
        if spec.scenario == "practical":
            f = add_depth_noise(f, spec.noise_k, spec.dropout, rng)
        frames.append(f)
    return scene, frames


# --------------------------------------------------------------------------
# on-disk format
# --------------------------------------------------------------------------

class SequenceLoadError(IOError):
    pass


DEPTH_SCALE = 1000.0


def write_tum(path, poses: list[np.ndarray], stamps=None) -> None:
    stamps = range(len(poses)) if stamps is None else stamps
    with open(path, "w") as fh:
        for s, P in zip(stamps, poses):
            fh.write(" ".join(repr(float(v)) for v in [s, *pose_to_tum(P)]) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[np.ndarray]]:
    stamps, poses = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            v = [float(x) for x in line.split()]
            if len(v) != 8:
                raise SequenceLoadError(f"{path}: expected 8 values per line, got {len(v)}")
            stamps.append(v[0])
            poses.append(tum_to_pose(v[1:]))
    return np.asarray(stamps), poses


def save_sequence(path, frames: list[Frame], poses: list[np.ndarray] | None = None) -> None:
    root = Path(path)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    h, w = frames[0].shape
    manifest = {"intrinsics": list(frames[0].intrinsics), "frame_count": len(frames),
                "depth_scale": DEPTH_SCALE, "width": w, "height": h}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    limit = 65535 / DEPTH_SCALE
    for f in frames:
        rgb = np.round(np.clip(f.color, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "color" / f"{f.index:06d}.png")
        if np.any(f.depth > limit):
            warnings.warn(f"frame {f.index}: depth beyond {limit} m clamped to the 16-bit range")
        mm = np.round(np.clip(f.depth, 0, limit) * DEPTH_SCALE).astype(np.uint16)
        Image.fromarray(mm).save(root / "depth" / f"{f.index:06d}.png")
    if poses is None:
        poses = [f.gt_pose for f in frames]
    if all(p is not None for p in poses):
        write_tum(root / "groundtruth.txt", poses, [f.index for f in frames])


def load_sequence(path) -> list[Frame]:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise SequenceLoadError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        intr = tuple(float(x) for x in manifest["intrinsics"])
        n = int(manifest["frame_count"])
        scale = float(manifest.get("depth_scale", DEPTH_SCALE))
    except (ValueError, KeyError) as exc:
        raise SequenceLoadError(f"corrupt manifest {mpath}: {exc}") from exc
    poses = None
    gt = root / "groundtruth.txt"
    if gt.is_file():
        _, poses = read_tum(gt)
        if len(poses) != n:
            raise SequenceLoadError(f"{gt}: {len(poses)} poses for {n} frames")
    frames = []
    for i in range(n):
        cp, dp = root / "color" / f"{i:06d}.png", root / "depth" / f"{i:06d}.png"
        try:
            color = np.asarray(Image.open(cp).convert("RGB"), dtype=np.float64) / 255.0
            depth = np.asarray(Image.open(dp), dtype=np.float64) / scale
        except (OSError, ValueError) as exc:
            raise SequenceLoadError(f"cannot read frame {i}: {exc}") from exc
        frames.append(Frame(i, color, depth, intr, None if poses is None else poses[i]))
    return frames
