"""Finite-difference verification of the full training-loss gradient."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterBlock
from .data import default_intrinsics, render_oracle_frame, sphere_scene
from .geometry import look_at
from .model import MODEL_ENCODINGS, STRUCTURES, ModelConfig, build_model
from .objective import LossWeights
from .pipeline import SamplingConfig, _pose_list, batch_loss, rays_from_pixels, stratified_sample_rays
from .rendering import RENDER_KINDS, RenderFunctionConfig

SCENE_BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
GROUPS = ("features", "mlp", "beta", "twist")


def combinations():
    """Every encoding x structure x rendering triple."""
    return list(itertools.product(MODEL_ENCODINGS, STRUCTURES, RENDER_KINDS))


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric), abs(analytic))


@dataclass
class GradCheckCase:
    """A small model plus a reference frame; states are re-randomised per check."""

    model: object
    render_cfg: RenderFunctionConfig
    frame: object
    n_rays: int = 6

    @classmethod
    def build(cls, encoding: str, structure: str, rendering: str, seed: int = 0, frame=None):
        cfg = ModelConfig(encoding=encoding, structure=structure, aabb_lo=SCENE_BOX[0], aabb_hi=SCENE_BOX[1],
                          cells=(0.5, 0.25), hidden=16, log2_hash=8, octree_leaf=0.1, seed=seed)
        model = build_model(cfg)
        frame = frame if frame is not None else reference_frame()
        if model.octree is not None:
            model.octree.fuse(frame.depth, frame.intrinsics, frame.gt_pose)
        return cls(model, RenderFunctionConfig(rendering), frame)

    def randomize(self, rng: np.random.Generator):
        """Draw parameters, pose, rays, samples and twist; returns the loss closure inputs."""
        for b in self.model.feature_blocks:
            b.values[...] = rng.normal(scale=0.3, size=b.values.shape)
        for b in self.model.mlp_blocks:
            fan_in = b.values.shape[0] if b.values.ndim == 2 else 16
            b.values[...] = rng.normal(scale=1.0 / np.sqrt(fan_in), size=b.values.shape)
        self.render_cfg.beta.values[...] = rng.uniform(3.0, 15.0)
        pose = self.frame.gt_pose.copy()
        pose[:3, 3] += rng.uniform(-0.1, 0.1, size=3)
        h, w = self.frame.shape
        flat = rng.choice(w * h, size=self.n_rays, replace=False)
        rows, cols = np.divmod(flat, w)
        batch = rays_from_pixels(0, self.frame, rows, cols)
        batch.depths[0] = 0.0  # one depth-free ray per state
        dists, mask = stratified_sample_rays(batch.depths, SamplingConfig(n_trunc=4, n_free=4), 1.2, rng)
        twist = ParameterBlock("twist", rng.normal(scale=0.02, size=6))
        return pose, batch, dists, mask, twist

    def check(self, rng: np.random.Generator, h: float = 1e-6) -> dict[str, float]:
        """Relative error of one random directional derivative per parameter group."""
        pose, batch, dists, mask, twist = self.randomize(rng)
        weights = LossWeights()
        groups = {"features": self.model.feature_blocks, "mlp": self.model.mlp_blocks,
                  "beta": self.render_cfg.blocks, "twist": [twist]}
        blocks = [b for g in groups.values() for b in g]

        def loss():
            out, _, _ = batch_loss(self.model, self.render_cfg, _pose_list([pose], {0: twist}), batch, dists,
                                   mask, weights, self.model.truncation)
            return out

        for b in blocks:
            b.zero_grad()
        with ad.Tape(watch=blocks) as tape:
            out = loss()
        ad.backward(tape, out)
        tape.clear()

        errors = {}
        for name, group in groups.items():
            if not group:
                continue
            dirs = []
            for b in group:
                d = rng.normal(size=b.values.shape)
                if name == "features":
                    # concentrate the direction on entries the batch touches
                    d *= (b.grad != 0) + 1e-3
                dirs.append(d)
            norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float((b.grad * d).sum()) for b, d in zip(group, dirs))
            errors[name] = self._directional_error(loss, group, dirs, analytic, h)
        return errors


    @staticmethod
    def _directional_error(loss, group, dirs, analytic: float, h: float, tol: float = 1e-4,
                           h_min: float = 1e-8) -> float:
        """Central difference along ``dirs``; the step shrinks while the window straddles a kink.

        A kink (ReLU, clip, a sample crossing the volume boundary) inside
        ``[x - h, x + h]`` shows up as disagreeing one-sided slopes. Smooth
        windows are accepted at the first step, so a wrong gradient is never
        rescued by the retry.
        """
        saved = [b.values.copy() for b in group]

        def at(t: float) -> float:
            for b, s, d in zip(group, saved, dirs):
                b.values[...] = s + t * d
            return float(ad.value(loss()))

        try:
            f0 = at(0.0)
            while True:
                fp, fm = at(h), at(-h)
                central = (fp - fm) / (2 * h)
                kink = relative_error((fp - f0) / h, (f0 - fm) / h) > tol
                if not kink or h / 10 < h_min:
                    return relative_error(analytic, central)
                h /= 10
        finally:
            for b, s in zip(group, saved):
                b.values[...] = s


def reference_frame(size=(12, 9)):
    pose = look_at((0.1, -0.85, 0.1), (0.0, 0.0, 0.0))
    return render_oracle_frame(sphere_scene(0.5), pose, default_intrinsics(*size), size)


def gradient_sweep(states: int = 50, seed: int = 0) -> dict:
    """Worst relative error per group over ``states`` random states of every combination."""
    frame = reference_frame()
    worst = {g: 0.0 for g in GROUPS}
    per_combo = {}
    for k, combo in enumerate(combinations()):
        case = GradCheckCase.build(*combo, seed=seed + k, frame=frame)
        rng = np.random.default_rng([seed, k])
        combo_worst = 0.0
        for _ in range(states):
            for g, e in case.check(rng).items():
                worst[g] = max(worst[g], e)
                combo_worst = max(combo_worst, e)
        per_combo[combo] = combo_worst
    return {"worst": worst, "per_combo": per_combo, "states": states, "combinations": len(per_combo)}
