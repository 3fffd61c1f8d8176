"""Training objective: photometric, depth, truncated-SDF and free-space terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DivergedError


@dataclass
class LossWeights:
    photometric: float = 5.0
    depth: float = 1.0
    sdf_tail: float = 200.0
    sdf_center: float = 50.0
    free_space: float = 10.0
    center_fraction: float = 0.4  # |d_x - d_i| < center_fraction * T counts as "center"

    def __post_init__(self):
        for k in ("photometric", "depth", "sdf_tail", "sdf_center", "free_space"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.photometric * factor, self.depth * factor, self.sdf_tail * factor,
                           self.sdf_center * factor, self.free_space * factor, self.center_fraction)


@dataclass
class LossBreakdown:
    photometric: object = 0.0
    depth: object = 0.0
    sdf_center: object = 0.0
    sdf_tail: object = 0.0
    free_space: object = 0.0
    n_pixels: int = 0
    n_depth_pixels: int = 0
    n_center: int = 0
    n_tail: int = 0
    n_free: int = 0

    def values(self) -> dict[str, float]:
        return {k: float(ad.value(getattr(self, k)))
                for k in ("photometric", "depth", "sdf_center", "sdf_tail", "free_space")}


def _masked_mean(x, mask: np.ndarray):
    """Mean of ``x`` over rows selected by ``mask``; 0 when the mask is empty."""
    n = int(mask.sum())
    if n == 0:
        return 0.0
    return ad.div(ad.sum(ad.mul(x, mask.astype(float))), float(n))


def photometric_loss(rendered, observed: np.ndarray, valid: np.ndarray | None = None):
    """Mean over pixels of the squared RGB error summed over channels."""
    obs = np.asarray(observed, float)
    valid = np.ones(len(obs), bool) if valid is None else np.asarray(valid, bool)
    per_px = ad.sum(ad.square(ad.sub(rendered, obs)), axis=-1)
    return _masked_mean(per_px, valid)


def geometric_loss(rendered_depth, observed_depth: np.ndarray, valid: np.ndarray | None = None):
    """Mean squared depth error over pixels with observed depth."""
    d = np.asarray(observed_depth, float)
    m = d > 0
    if valid is not None:
        m &= np.asarray(valid, bool)
    return _masked_mean(ad.square(ad.sub(rendered_depth, d)), m)


def _per_ray_mean(err_sq, sel: np.ndarray):
    """Average ``err_sq`` over selected samples of each ray, then over rays with any selection."""
    cnt = sel.sum(axis=-1)
    rays = cnt > 0
    if not rays.any():
        return 0.0
    inv = np.where(rays, 1.0 / np.maximum(cnt, 1), 0.0)[:, None] * sel
    return ad.div(ad.sum(ad.mul(err_sq, inv)), float(rays.sum()))


def truncation_masks(dists: np.ndarray, depth: np.ndarray, truncation: float, center_fraction: float,
                     mask: np.ndarray | None = None):
    """Boolean (center, tail, free) sample sets for each ray."""
    d = np.asarray(depth, float)[:, None]
    has = d > 0
    valid = np.ones(dists.shape, bool) if mask is None else np.asarray(mask, bool)
    gap = np.abs(d - dists)
    trunc = has & valid & (gap < truncation)
    center = trunc & (gap < center_fraction * truncation)
    tail = trunc & ~center
    free = has & valid & (dists < d - truncation)
    return center, tail, free


def sdf_loss(sdf, dists: np.ndarray, depth: np.ndarray, truncation: float, center_fraction: float = 0.4,
             mask: np.ndarray | None = None):
    """``e = d_i + s*T - d_x`` squared, split into centre and tail sets."""
    center, tail, _ = truncation_masks(dists, depth, truncation, center_fraction, mask)
    target = np.asarray(depth, float)[:, None] - dists
    err = ad.sub(ad.mul(sdf, truncation), np.where(center | tail, target, 0.0))
    err_sq = ad.square(err)
    return _per_ray_mean(err_sq, center), _per_ray_mean(err_sq, tail)


def free_space_loss(sdf, dists: np.ndarray, depth: np.ndarray, truncation: float,
                    mask: np.ndarray | None = None):
    """Mean of ``(s - 1)^2`` over samples between the camera and the truncation band."""
    _, _, free = truncation_masks(dists, depth, truncation, 0.4, mask)
    return _per_ray_mean(ad.square(ad.sub(sdf, 1.0)), free)


def compute_losses(render, colors_obs: np.ndarray, depth_obs: np.ndarray, sdf, dists: np.ndarray,
                   truncation: float, weights: LossWeights, mask: np.ndarray | None = None) -> LossBreakdown:
    valid = np.asarray(render.valid, bool)
    depth_obs = np.asarray(depth_obs, float)
    if mask is None:
        mask = np.ones(dists.shape, bool)
    mask = mask & valid[:, None]
    c_sdf, t_sdf = sdf_loss(sdf, dists, depth_obs, truncation, weights.center_fraction, mask)
    center, tail, free = truncation_masks(dists, depth_obs, truncation, weights.center_fraction, mask)
    return LossBreakdown(
        photometric=photometric_loss(render.color, colors_obs, valid),
        depth=geometric_loss(render.depth, depth_obs, valid),
        sdf_center=c_sdf,
        sdf_tail=t_sdf,
        free_space=free_space_loss(sdf, dists, depth_obs, truncation, mask),
        n_pixels=int(valid.sum()),
        n_depth_pixels=int((valid & (depth_obs > 0)).sum()),
        n_center=int(center.sum()),
        n_tail=int(tail.sum()),
        n_free=int(free.sum()),
    )


def total_loss(b: LossBreakdown, w: LossWeights):
    """Weighted sum of the five terms; raises DivergedError on a non-finite term."""
    terms = [(w.photometric, b.photometric), (w.depth, b.depth), (w.sdf_tail, b.sdf_tail),
             (w.sdf_center, b.sdf_center), (w.free_space, b.free_space)]
    for _, t in terms:
        if not np.all(np.isfinite(ad.value(t))):
            raise DivergedError("non-finite loss component")
    total = 0.0
    for lam, t in terms:
        if lam != 0.0:
            total = ad.add(total, ad.mul(t, lam))
    return total
