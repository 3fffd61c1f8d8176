"""Geometric rendering functions mapping per-sample SDF to weights, and compositing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterBlock

RENDER_KINDS = ("direct", "density", "surface")
SDF_CLAMP = 1.1


@dataclass
class RenderFunctionConfig:
    kind: str = "direct"
    tr: float = 0.1
    beta_init: float = 10.0
    normalize_weights: bool | None = None
    # direct: divide the normalised SDF by tr (False) or the metric SDF s*T by tr (True)
    metric_input: bool = False
    truncation: float = 0.1
    beta: ParameterBlock = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in RENDER_KINDS:
            raise ValueError(f"unknown rendering function {self.kind!r}")
        if self.tr <= 0 or self.beta_init <= 0:
            raise ValueError("tr and beta must be positive")
        if self.normalize_weights is None:
            self.normalize_weights = self.kind == "direct"
        if self.beta is None:
            self.beta = ParameterBlock("render.beta", np.array([self.beta_init]),
                                       learnable=self.kind == "density")

    @property
    def blocks(self) -> list[ParameterBlock]:
        return [self.beta] if self.kind == "density" else []


@dataclass
class RenderResult:
    color: object  # (R, 3)
    depth: object  # (R,)
    weights: object  # (R, N)
    weight_sum: np.ndarray  # (R,)
    valid: np.ndarray  # (R,) ray had at least one usable sample


def _as_mask(sdf, mask):
    if mask is None:
        return np.ones(ad.value(sdf).shape, dtype=bool)
    return np.asarray(mask, dtype=bool)


def weights_direct(sdf, cfg: RenderFunctionConfig, mask=None):
    """``sig(s/tr) * sig(-s/tr)`` on the clamped SDF, optionally normalised per ray."""
    m = _as_mask(sdf, mask)
    scale = cfg.truncation / cfg.tr if cfg.metric_input else 1.0 / cfg.tr
    x = ad.mul(ad.clip(sdf, -SDF_CLAMP, SDF_CLAMP), scale)
    w = ad.mul(ad.mul(ad.sigmoid(x), ad.sigmoid(ad.neg(x))), m.astype(float))
    if cfg.normalize_weights:
        total = ad.value(w).sum(axis=-1, keepdims=True)
        denom = ad.sum(w, axis=-1, keepdims=True)
        denom = ad.where(total > 0, denom, np.ones_like(total))
        w = ad.div(w, denom)
    return w


def density_sigma(sdf, beta):
    """``beta * sig(-beta * s)``."""
    return ad.mul(beta, ad.sigmoid(ad.neg(ad.mul(beta, sdf))))


def weights_density(sdf, cfg: RenderFunctionConfig, mask=None):
    """``exp(-sum_{k<i} sigma_k) * (1 - exp(-sigma_i))`` with no sample-spacing factor."""
    m = _as_mask(sdf, mask)
    beta = ad.param(cfg.beta)
    sigma = ad.mul(density_sigma(ad.clip(sdf, -SDF_CLAMP, SDF_CLAMP), beta), m.astype(float))
    trans = ad.exp(ad.neg(ad.cumsum(sigma, axis=-1, exclusive=True)))
    w = ad.mul(trans, ad.sub(1.0, ad.exp(ad.neg(sigma))))
    if cfg.normalize_weights:
        w = ad.div(w, np.maximum(ad.value(w).sum(-1, keepdims=True), 1e-12))
    return w


def surface_alpha(sdf, mask=None):
    """``max((sig(s_i) - sig(s_{i+1})) / sig(s_i), 0)``; last sample gets zero."""
    m = _as_mask(sdf, mask)
    sg = ad.sigmoid(ad.clip(sdf, -SDF_CLAMP, SDF_CLAMP))
    n = ad.value(sdf).shape[-1]
    if n < 2:
        return np.zeros(ad.value(sdf).shape)
    cur = ad.index(sg, (Ellipsis, slice(0, n - 1)))
    nxt = ad.index(sg, (Ellipsis, slice(1, n)))
    alpha = ad.relu(ad.div(ad.sub(cur, nxt), cur))
    pair = (m[..., :-1] & m[..., 1:]).astype(float)
    alpha = ad.mul(alpha, pair)
    zeros = np.zeros(ad.value(sdf).shape[:-1] + (1,))
    return ad.concat([alpha, zeros], axis=-1)


def weights_from_alpha(alpha):
    """``alpha_i * prod_{j<i} (1 - alpha_j)``."""
    return ad.mul(alpha, ad.cumprod_exclusive(ad.sub(1.0, alpha)))


def weights_surface(sdf, cfg: RenderFunctionConfig, mask=None):
    w = weights_from_alpha(surface_alpha(sdf, mask))
    if cfg.normalize_weights:
        w = ad.div(w, np.maximum(ad.value(w).sum(-1, keepdims=True), 1e-12))
    return w


def compute_weights(sdf, cfg: RenderFunctionConfig, mask=None):
    if cfg.kind == "direct":
        return weights_direct(sdf, cfg, mask)
    if cfg.kind == "density":
        return weights_density(sdf, cfg, mask)
    return weights_surface(sdf, cfg, mask)


def composite(weights, colors, dists, mask=None) -> RenderResult:
    """Weighted colour and depth per ray; depth is divided by the weight sum when it exceeds 1e-6."""
    wv = ad.value(weights)
    m = np.ones(wv.shape, bool) if mask is None else np.asarray(mask, bool)
    color = ad.sum(ad.mul(ad.reshape(weights, wv.shape + (1,)), colors), axis=-2)
    wsum = wv.sum(axis=-1)
    raw_depth = ad.sum(ad.mul(weights, dists), axis=-1)
    big = wsum > 1e-6
    denom = ad.where(big, ad.sum(weights, axis=-1), np.ones_like(wsum))
    depth = ad.div(raw_depth, denom)
    return RenderResult(color=color, depth=depth, weights=weights, weight_sum=wsum, valid=m.any(axis=-1))
