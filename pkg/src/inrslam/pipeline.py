"""SLAM loop: ray sampling, batched rendering, tracking, mapping and the sequence driver."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, DivergedError, ParameterBlock
from .geometry import pixel_directions, reorthonormalize, se3_exp, se3_exp_node
from .model import SceneModel
from .objective import LossWeights, compute_losses, total_loss
from .rendering import RenderFunctionConfig, RenderResult, compute_weights, composite

log = logging.getLogger(__name__)


@dataclass
class SamplingConfig:
    n_trunc: int = 12
    n_free: int = 48
    truncation: float = 0.1
    near: float = 0.05
    far: float | None = None  # None: scene AABB diagonal
    track_pixels: int = 1024
    map_pixels: int = 2048
    init_iters: int = 500
    track_iters: int = 20
    map_iters: int = 20
    keyframe_stride: int = 5
    cache_fraction: float = 0.05

    @property
    def n_samples(self) -> int:
        return self.n_trunc + self.n_free


@dataclass
class OptimConfig:
    lr_feature: float = 1e-2
    lr_mlp: float = 1e-3
    lr_beta: float = 1e-3
    lr_pose: float = 1e-3
    lr_track: float | None = None  # tracking twist lr; None falls back to lr_pose
    track_decay: float = 1.0  # final/initial lr ratio within one tracking call (geometric)
    track_outlier: float | None = 10.0  # drop tracking rays whose depth residual exceeds this x median
    track_resample: bool = False  # fresh pixels and samples every iteration; returns the last iterate
    clip_norm: float = 10.0


@dataclass
class Frame:
    index: int
    color: np.ndarray  # H, W, 3 in [0, 1]
    depth: np.ndarray  # H, W metres, 0 = invalid
    intrinsics: tuple[float, float, float, float]
    gt_pose: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")
        if min(self.intrinsics) <= 0:
            raise ValueError("intrinsics must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class Keyframe:
    frame: Frame
    pose: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    @property
    def colors(self) -> np.ndarray:
        return self.frame.color[self.rows, self.cols]

    @property
    def depths(self) -> np.ndarray:
        return self.frame.depth[self.rows, self.cols]


def make_keyframe(frame: Frame, pose: np.ndarray, fraction: float, rng: np.random.Generator) -> Keyframe:
    h, w = frame.shape
    n = max(1, int(round(fraction * h * w)))
    flat = np.sort(rng.choice(h * w, size=n, replace=False))
    rows, cols = np.divmod(flat, w)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return Keyframe(frame, pose.copy(), rows, cols)


def select_keyframe(index: int, stride: int = 5) -> bool:
    return index % stride == 0


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _stratified(lo: np.ndarray, hi: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform sample per equal-width bin of ``[lo, hi]`` (per row)."""
    if n == 0:
        return np.zeros((len(lo), 0))
    u = (np.arange(n)[None, :] + rng.random((len(lo), n))) / n
    return lo[:, None] + (hi - lo)[:, None] * u


def stratified_sample_rays(depth: np.ndarray, cfg: SamplingConfig, far: float,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample distances (R, N) sorted ascending and a validity mask.

    Rays with depth get ``n_trunc`` samples in ``[d - T, d + T]`` and ``n_free``
    in ``[near, d - T]``; rays without depth get ``N`` samples in ``[near, far]``.
    When ``d - T <= near`` the free span is empty and its samples are masked out.
    """
    depth = np.asarray(depth, float)
    r, n, T = len(depth), cfg.n_samples, cfg.truncation
    dists = np.empty((r, n))
    mask = np.ones((r, n), bool)
    has = depth > 0
    if (~has).any():
        k = int((~has).sum())
        dists[~has] = _stratified(np.full(k, cfg.near), np.full(k, far), n, rng)
    if has.any():
        d = depth[has]
        trunc = _stratified(d - T, d + T, cfg.n_trunc, rng)
        hi = d - T
        ok = hi > cfg.near
        lo = np.where(ok, cfg.near, 0.5 * np.maximum(hi, 1e-4))
        hi_eff = np.where(ok, hi, np.maximum(hi, 1e-4))
        free = _stratified(lo, hi_eff, cfg.n_free, rng)
        both = np.concatenate([free, trunc], axis=1)
        fmask = np.concatenate([np.repeat(ok[:, None], cfg.n_free, 1), np.ones_like(trunc, bool)], axis=1)
        order = np.argsort(both, axis=1, kind="stable")
        dists[has] = np.take_along_axis(both, order, 1)
        mask[has] = np.take_along_axis(fmask, order, 1)
    return dists, mask


def stratified_sample_ray(depth: float, cfg: SamplingConfig, far: float, rng) -> np.ndarray:
    return stratified_sample_rays(np.array([depth]), cfg, far, rng)[0][0]


# --------------------------------------------------------------------------
# batched rendering
# --------------------------------------------------------------------------

@dataclass
class RayBatch:
    group: np.ndarray  # (R,) index into the pose list, sorted ascending
    dirs: np.ndarray  # (R, 3) camera-frame, unit z
    colors: np.ndarray  # (R, 3)
    depths: np.ndarray  # (R,)

    def __len__(self) -> int:
        return len(self.group)


def rays_from_pixels(group: int, frame: Frame, rows, cols) -> RayBatch:
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    return RayBatch(
        group=np.full(len(rows), group, np.int64),
        dirs=pixel_directions(rows, cols, frame.intrinsics),
        colors=frame.color[rows, cols],
        depths=frame.depth[rows, cols],
    )


def concat_batches(batches: list[RayBatch]) -> RayBatch:
    b = RayBatch(*(np.concatenate([getattr(x, f) for x in batches]) for f in ("group", "dirs", "colors", "depths")))
    order = np.argsort(b.group, kind="stable")
    return RayBatch(b.group[order], b.dirs[order], b.colors[order], b.depths[order])


@dataclass
class ForwardResult:
    render: RenderResult
    sdf: object
    dists: np.ndarray
    mask: np.ndarray


def world_points(poses: list, batch: RayBatch, dists: np.ndarray):
    """Sample points (R*N, 3) for rays grouped by pose; differentiable in the poses."""
    parts = []
    n = dists.shape[1]
    for g in np.unique(batch.group):
        sel = batch.group == g
        P = poses[g]
        R = ad.index(P, (slice(0, 3), slice(0, 3)))
        t = ad.index(P, (slice(0, 3), 3))
        dw = ad.matmul(batch.dirs[sel], ad.transpose(R))
        r = int(sel.sum())
        pts = ad.add(ad.mul(ad.reshape(dw, (r, 1, 3)), dists[sel][..., None]), t)
        parts.append(ad.reshape(pts, (r * n, 3)))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def forward_batch(model: SceneModel, render_cfg: RenderFunctionConfig, poses: list, batch: RayBatch,
                  dists: np.ndarray, mask: np.ndarray) -> ForwardResult:
    r, n = dists.shape
    pts = world_points(poses, batch, dists)
    inside = model.aabb.contains(ad.value(pts))
    mask = mask & inside.reshape(r, n)
    idx = np.flatnonzero(mask)
    sub = ad.take_rows(pts, idx)
    out = model.eval_points(sub)
    sdf = ad.reshape(ad.scatter_rows(ad.reshape(out.sdf, (len(idx), 1)), idx, r * n, fill=1.0), (r, n))
    col = ad.reshape(ad.scatter_rows(out.color, idx, r * n, fill=0.0), (r, n, 3))
    w = compute_weights(sdf, render_cfg, mask)
    res = composite(w, col, dists, mask)
    return ForwardResult(res, sdf, dists, mask)


def batch_loss(model, render_cfg, poses, batch, dists, mask, weights: LossWeights, truncation: float):
    fwd = forward_batch(model, render_cfg, poses, batch, dists, mask)
    br = compute_losses(fwd.render, batch.colors, batch.depths, fwd.sdf, fwd.dists, truncation, weights, fwd.mask)
    return total_loss(br, weights), br, fwd


def render_frame(model: SceneModel, render_cfg: RenderFunctionConfig, frame: Frame, pose: np.ndarray,
                 cfg: SamplingConfig, rng: np.random.Generator, chunk: int = 4096,
                 use_depth: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Full-image colour and depth. Without ``use_depth`` rays are sampled depth-free."""
    h, w = frame.shape
    rows, cols = np.divmod(np.arange(h * w), w)
    color = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    far = cfg.far or model.aabb.diagonal
    for s in range(0, h * w, chunk):
        b = rays_from_pixels(0, frame, rows[s:s + chunk], cols[s:s + chunk])
        d_in = b.depths if use_depth else np.zeros(len(b))
        dists, mask = stratified_sample_rays(d_in, _eval_sampling(cfg, use_depth), far, rng)
        fwd = forward_batch(model, render_cfg, [pose], b, dists, mask)
        color[s:s + chunk] = ad.value(fwd.render.color)
        depth[s:s + chunk] = ad.value(fwd.render.depth)
    return color.reshape(h, w, 3), depth.reshape(h, w)


def _eval_sampling(cfg: SamplingConfig, use_depth: bool) -> SamplingConfig:
    if use_depth:
        return cfg
    # dense uniform sampling so the depth-free render resolves the surface
    return SamplingConfig(**{**cfg.__dict__, "n_trunc": 0, "n_free": max(cfg.n_samples, 256)})


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

def model_optimizer(model: SceneModel, render_cfg: RenderFunctionConfig, opt: OptimConfig) -> Adam:
    blocks, lrs = [], []
    for b in model.feature_blocks:
        blocks.append(b)
        lrs.append(opt.lr_feature)
    for b in model.mlp_blocks:
        blocks.append(b)
        lrs.append(opt.lr_mlp)
    for b in render_cfg.blocks:
        blocks.append(b)
        lrs.append(opt.lr_beta)
    return Adam(blocks, lrs, clip_norm=opt.clip_norm)


def apply_twist(xi: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Left-composed update ``exp(xi) P``."""
    return reorthonormalize(se3_exp(xi) @ P)


def _pose_list(poses: list[np.ndarray], twists: dict[int, ParameterBlock]) -> list:
    out = []
    for i, P in enumerate(poses):
        if i in twists:
            out.append(ad.matmul(se3_exp_node(ad.param(twists[i])), P))
        else:
            out.append(P)
    return out


@dataclass
class TrackResult:
    pose: np.ndarray
    loss: float
    flagged: bool = False
    losses: list[float] = field(default_factory=list)


class Coverage:
    """Voxels of the scene volume observed by mapped frames.

    ``surface`` marks voxels holding back-projected depth points; ``free``
    marks voxels that observed rays crossed in front of their surface band.
    """

    def __init__(self, lo, hi, cell: float = 0.1, truncation: float = 0.1, near: float = 0.05):
        self.lo = np.asarray(lo, float)
        self.cell = float(cell)
        self.truncation = truncation
        self.near = near
        self.dims = np.maximum(np.ceil((np.asarray(hi, float) - self.lo) / self.cell).astype(int), 1)
        self.surface = np.zeros(tuple(self.dims), bool)
        self.free = np.zeros(tuple(self.dims), bool)

    def _cells(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = np.floor((pts - self.lo) / self.cell).astype(np.int64)
        ok = np.all((c >= 0) & (c < self.dims), axis=1)
        return c, ok

    def _mark(self, grid: np.ndarray, pts: np.ndarray) -> None:
        c, ok = self._cells(pts)
        grid[tuple(c[ok].T)] = True

    def _lookup(self, grid: np.ndarray, pts) -> np.ndarray:
        c, ok = self._cells(np.asarray(pts, float).reshape(-1, 3))
        out = np.zeros(len(c), bool)
        out[ok] = grid[tuple(c[ok].T)]
        return out

    def add_frame(self, frame: Frame, pose: np.ndarray) -> None:
        h, w = frame.shape
        rows, cols = np.divmod(np.arange(h * w), w)
        d = frame.depth.reshape(-1)
        has = d > 0
        dirs = pixel_directions(rows[has], cols[has], frame.intrinsics) @ pose[:3, :3].T
        d = d[has]
        self._mark(self.surface, dirs * d[:, None] + pose[:3, 3])
        step = self.cell / 2
        ts = np.arange(self.near, max(d.max() - self.truncation, self.near), step)
        for t in ts:
            sel = t < d - self.truncation
            self._mark(self.free, dirs[sel] * t + pose[:3, 3])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return self._lookup(self.surface, pts)

    def contains_free(self, pts: np.ndarray) -> np.ndarray:
        return self._lookup(self.free, pts)

    @property
    def fraction(self) -> float:
        return float(self.surface.mean())


def surface_points(frame: Frame, pose: np.ndarray) -> np.ndarray:
    """World-space back-projection of every pixel with valid depth."""
    h, w = frame.shape
    rows, cols = np.divmod(np.arange(h * w), w)
    d = frame.depth.reshape(-1)
    dirs = pixel_directions(rows, cols, frame.intrinsics)
    has = d > 0
    return (dirs[has] * d[has, None]) @ pose[:3, :3].T + pose[:3, 3]


def _inlier_rays(model, render_cfg, pose, batch, dists, mask, factor: float) -> np.ndarray:
    """Rays whose rendered depth at ``pose`` lies within ``factor`` x the median residual.

    Rays through parts of the scene the map has not seen yet render arbitrary
    depth and would otherwise pull the pose toward the unmapped geometry.
    """
    with ad.Tape(watch=[]) as tape:
        fwd = forward_batch(model, render_cfg, [pose], batch, dists, mask)
        depth = np.array(ad.value(fwd.render.depth))
    tape.clear()
    has = batch.depths > 0
    res = np.abs(depth - batch.depths)
    if not has.any():
        return np.ones(len(batch), bool)
    thr = factor * np.median(res[has])
    return ~has | (res <= thr)


def _subset(batch: RayBatch, keep: np.ndarray) -> RayBatch:
    return RayBatch(batch.group[keep], batch.dirs[keep], batch.colors[keep], batch.depths[keep])


def tracking_batch(model: SceneModel, render_cfg: RenderFunctionConfig, frame: Frame, init_pose: np.ndarray,
                   cfg: SamplingConfig, opt: OptimConfig, rng: np.random.Generator,
                   coverage: Coverage | None = None) -> tuple[RayBatch, np.ndarray, np.ndarray]:
    """Pixels, sample distances and sample mask used by one tracking call."""
    h, w = frame.shape
    n = min(cfg.track_pixels, h * w)
    flat = rng.choice(h * w, size=n, replace=False)
    rows, cols = np.divmod(flat, w)
    batch = rays_from_pixels(0, frame, rows, cols)
    far = cfg.far or model.aabb.diagonal
    dists, mask = stratified_sample_rays(batch.depths, cfg, far, rng)
    if coverage is not None:
        has = batch.depths > 0
        pts = (batch.dirs * batch.depths[:, None]) @ init_pose[:3, :3].T + init_pose[:3, 3]
        keep = ~has | coverage.contains(pts)
        if keep[has].sum() >= max(16, has.sum() // 10):
            batch = _subset(batch, keep)
            dists, mask = dists[keep], mask[keep]
        # free-space samples only where mapped rays have already seen empty space
        sample_pts = (batch.dirs[:, None, :] * dists[..., None]) @ init_pose[:3, :3].T + init_pose[:3, 3]
        in_front = dists < (batch.depths[:, None] - cfg.truncation)
        known = coverage.contains_free(sample_pts.reshape(-1, 3)).reshape(dists.shape)
        mask = mask & (~in_front | known)
    if opt.track_outlier is not None:
        keep = _inlier_rays(model, render_cfg, init_pose, batch, dists, mask, opt.track_outlier)
        batch = _subset(batch, keep)
        dists, mask = dists[keep], mask[keep]
    return batch, dists, mask


def track_frame(model: SceneModel, render_cfg: RenderFunctionConfig, frame: Frame, init_pose: np.ndarray,
                cfg: SamplingConfig, opt: OptimConfig, weights: LossWeights,
                rng: np.random.Generator, coverage: Coverage | None = None) -> TrackResult:
    """Optimise a left-composed twist on ``init_pose`` with the scene frozen.

    By default pixels and sample distances are drawn once per call so that
    iterate losses are comparable and the best-loss pose is returned. With
    ``opt.track_resample`` every iteration draws a fresh batch, which averages
    sampling noise over the descent, and the last iterate is returned. With
    ``coverage`` the rays whose observed surface point (at ``init_pose``) falls
    outside the mapped volume are left out.
    """
    batch, dists, mask = tracking_batch(model, render_cfg, frame, init_pose, cfg, opt, rng, coverage)
    twist = ParameterBlock("track.twist", np.zeros(6))
    lr = opt.lr_track if opt.lr_track is not None else opt.lr_pose
    adam = Adam([twist], [lr], clip_norm=opt.clip_norm)
    best_pose, best_loss = init_pose.copy(), np.inf
    losses = []
    iters = cfg.track_iters
    try:
        for it in range(iters + 1):
            if opt.track_resample and it > 0:
                batch, dists, mask = tracking_batch(model, render_cfg, frame, init_pose, cfg, opt, rng, coverage)
            with ad.Tape(watch=[twist]) as tape:
                poses = _pose_list([init_pose], {0: twist})
                loss, _, _ = batch_loss(model, render_cfg, poses, batch, dists, mask, weights, cfg.truncation)
            lv = float(ad.value(loss))
            losses.append(lv)
            if it == iters or not np.isfinite(lv):
                tape.clear()
            if not np.isfinite(lv):
                raise DivergedError("non-finite tracking loss")
            if lv < best_loss or (opt.track_resample and it == iters):
                best_loss = lv
                best_pose = apply_twist(twist.values, init_pose)
            if it == iters:
                break
            ad.backward(tape, loss)
            tape.clear()
            scale = opt.track_decay ** (it / max(iters - 1, 1))
            adam.step(lr_scale=scale)
    except DivergedError:
        log.warning("tracking diverged on frame %d; keeping the initial pose", frame.index)
        return TrackResult(init_pose.copy(), np.inf, True, losses)
    return TrackResult(best_pose, best_loss, False, losses)


@dataclass
class Mapper:
    """Owns the scene model, rendering function, optimiser state and keyframe set."""

    model: SceneModel
    render_cfg: RenderFunctionConfig
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    keyframes: list[Keyframe] = field(default_factory=list)
    optimize_poses: bool = True

    def __post_init__(self):
        self.adam = model_optimizer(self.model, self.render_cfg, self.optim)
        self.coverage = Coverage(self.model.aabb.lo, self.model.aabb.hi, truncation=self.sampling.truncation,
                                 near=self.sampling.near)

    @property
    def far(self) -> float:
        return self.sampling.far or self.model.aabb.diagonal

    # -- pixel pool ----------------------------------------------------------
    def pixel_pool(self, frame: Frame | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(source, row, col) of every pixel in the keyframe caches plus the current frame.

        Sources index keyframes; the current frame (if not already a keyframe)
        has source ``len(keyframes)``.
        """
        src, rows, cols = [], [], []
        for i, kf in enumerate(self.keyframes):
            src.append(np.full(len(kf.rows), i))
            rows.append(kf.rows)
            cols.append(kf.cols)
        if frame is not None and not any(kf.frame is frame for kf in self.keyframes):
            h, w = frame.shape
            r, c = np.divmod(np.arange(h * w), w)
            src.append(np.full(h * w, len(self.keyframes)))
            rows.append(r)
            cols.append(c)
        return np.concatenate(src), np.concatenate(rows), np.concatenate(cols)

    def draw_pixels(self, frame: Frame | None, n: int, rng: np.random.Generator):
        src, rows, cols = self.pixel_pool(frame)
        pick = rng.choice(len(src), size=min(n, len(src)), replace=False)
        return src[pick], rows[pick], cols[pick]

    # -- optimisation --------------------------------------------------------
    def _snapshot(self):
        return ([b.values.copy() for b in self.adam.blocks], copy.deepcopy(self.adam.states),
                [kf.pose.copy() for kf in self.keyframes])

    def _restore(self, snap) -> None:
        vals, states, poses = snap
        for b, v in zip(self.adam.blocks, vals):
            b.values[...] = v
            b.zero_grad()
        self.adam.states = states
        for kf, p in zip(self.keyframes, poses):
            kf.pose = p

    def optimize(self, frame: Frame | None, frame_pose: np.ndarray | None, iters: int, n_pixels: int,
                 rng: np.random.Generator, optimize_poses: bool | None = None) -> dict:
        """Joint optimisation of the scene (and keyframe poses but the first) on pooled pixels."""
        optimize_poses = self.optimize_poses if optimize_poses is None else optimize_poses
        snap = self._snapshot()
        frames = [kf.frame for kf in self.keyframes]
        poses = [kf.pose for kf in self.keyframes]
        if frame is not None and not any(kf.frame is frame for kf in self.keyframes):
            frames.append(frame)
            poses.append(frame_pose)
        twists: dict[int, ParameterBlock] = {}
        if optimize_poses:
            for i in range(1, len(self.keyframes)):
                twists[i] = ParameterBlock(f"ba.twist{i}", np.zeros(6))
        pose_adam = Adam(list(twists.values()), [self.optim.lr_pose] * len(twists), clip_norm=self.optim.clip_norm) \
            if twists else None
        losses = []
        try:
            for _ in range(iters):
                src, rows, cols = self.draw_pixels(frame, n_pixels, rng)
                batch = concat_batches([rays_from_pixels(g, frames[g], rows[src == g], cols[src == g])
                                        for g in np.unique(src)])
                dists, mask = stratified_sample_rays(batch.depths, self.sampling, self.far, rng)
                with ad.Tape() as tape:
                    plist = _pose_list(poses, twists)
                    loss, _, _ = batch_loss(self.model, self.render_cfg, plist, batch, dists, mask,
                                            self.weights, self.sampling.truncation)
                lv = float(ad.value(loss))
                if not np.isfinite(lv):
                    tape.clear()
                    raise DivergedError("non-finite mapping loss")
                losses.append(lv)
                ad.backward(tape, loss)
                tape.clear()
                self.adam.step()
                if pose_adam is not None:
                    pose_adam.step()
        except DivergedError:
            log.warning("mapping diverged; reverting to the pre-update state")
            self._restore(snap)
            return {"losses": losses, "flagged": True}
        for i, tw in twists.items():
            self.keyframes[i].pose = apply_twist(tw.values, self.keyframes[i].pose)
        if frame is not None and frame_pose is not None:
            self.coverage.add_frame(frame, frame_pose)
        return {"losses": losses, "flagged": False}

    def map_update(self, frame: Frame, frame_pose: np.ndarray, rng: np.random.Generator) -> dict:
        return self.optimize(frame, frame_pose, self.sampling.map_iters, self.sampling.map_pixels, rng)

    def add_keyframe(self, frame: Frame, pose: np.ndarray, rng: np.random.Generator) -> Keyframe:
        kf = make_keyframe(frame, pose, self.sampling.cache_fraction, rng)
        self.keyframes.append(kf)
        return kf


def initialize(mapper: Mapper, frame: Frame, pose: np.ndarray, rng: np.random.Generator,
               iters: int | None = None) -> dict:
    """Fit the scene to the first posed frame (pose held fixed)."""
    iters = mapper.sampling.init_iters if iters is None else iters
    if not mapper.keyframes:
        mapper.add_keyframe(frame, pose, rng)
    saved, mapper.keyframes = mapper.keyframes, []
    try:
        out = mapper.optimize(frame, pose, iters, mapper.sampling.map_pixels, rng, optimize_poses=False)
    finally:
        mapper.keyframes = saved
    return out


@dataclass
class SequenceResult:
    poses: list[np.ndarray]
    flagged: list[int]
    track_ms: list[float]
    map_ms: list[float]
    init_ms: float
    keyframe_indices: list[int]


def constant_velocity(poses: list[np.ndarray]) -> np.ndarray:
    if len(poses) < 2:
        return poses[-1].copy()
    rel = poses[-1] @ np.linalg.inv(poses[-2])
    return reorthonormalize(rel @ poses[-1])


def run_sequence(mapper: Mapper, frames: list[Frame], rng: np.random.Generator, first_pose: np.ndarray | None = None,
                 track: bool = True, init_iters: int | None = None, on_frame=None) -> SequenceResult:
    """Initialise on frame 0, then track / keyframe / map every later frame.

    With ``track=False`` ground-truth poses are replayed (mapping only).
    """
    if not frames:
        raise ValueError("empty sequence")
    stride = mapper.sampling.keyframe_stride
    p0 = first_pose if first_pose is not None else frames[0].gt_pose
    if p0 is None:
        p0 = np.eye(4)
    t0 = time.perf_counter()
    mapper.add_keyframe(frames[0], p0, rng)
    initialize(mapper, frames[0], p0, rng, init_iters)
    init_ms = 1e3 * (time.perf_counter() - t0)
    poses = [p0.copy()]
    kf_idx = [0]
    flagged, track_ms, map_ms = [], [], []
    for k, frame in enumerate(frames[1:], start=1):
        t = time.perf_counter()
        if track:
            res = track_frame(mapper.model, mapper.render_cfg, frame, constant_velocity(poses),
                              mapper.sampling, mapper.optim, mapper.weights, rng, mapper.coverage)
            pose = res.pose
            if res.flagged:
                flagged.append(k)
        else:
            pose = frame.gt_pose.copy()
        track_ms.append(1e3 * (time.perf_counter() - t))
        poses.append(pose)
        t = time.perf_counter()
        if select_keyframe(k, stride):
            mapper.add_keyframe(frame, pose, rng)
            kf_idx.append(k)
        out = mapper.map_update(frame, pose, rng)
        if out["flagged"]:
            flagged.append(k)
        map_ms.append(1e3 * (time.perf_counter() - t))
        # keyframe poses may have been refined by bundle adjustment
        for kf, i in zip(mapper.keyframes, kf_idx):
            poses[i] = kf.pose.copy()
        if on_frame is not None:
            on_frame(k, poses)
    return SequenceResult(poses, sorted(set(flagged)), track_ms, map_ms, init_ms, kf_idx)
