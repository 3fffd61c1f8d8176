"""The nine acceptance criteria, one test each; every test records a PASS/FAIL line."""
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from inrslam import autodiff as ad
from inrslam.bench import SMOKE_PRESET, RunConfig, grid_configs, read_leaderboard_csv, run_single, run_sweep
from inrslam.evaluation import GridIndex, ate_rmse, brute_force_nn, marching_cubes, mesh_scores, psnr
from inrslam.experiments import explicit_hybrid_experiment, init_only_medians, mini_slam, perturbation_recovery
from inrslam.gradcheck import gradient_sweep
from inrslam.objective import LossBreakdown, LossWeights, free_space_loss, sdf_loss, total_loss
from inrslam.pipeline import SamplingConfig, stratified_sample_rays
from inrslam.rendering import (RenderFunctionConfig, density_sigma, weights_density, weights_direct,
                               weights_from_alpha, weights_surface)

DIAMETER_CM = 100 * 4.0 * np.sqrt(3)  # lab room AABB diagonal


def _finish(acceptance, number, checks: dict, detail: str, t0: float, budget: float | None = None):
    seconds = time.perf_counter() - t0
    if budget is not None:
        checks = {**checks, f"runtime <= {budget:.0f}s": seconds <= budget}
    failed = [k for k, ok in checks.items() if not ok]
    acceptance(number, not failed, detail + (f"  failed: {', '.join(failed)}" if failed else ""), seconds)
    assert not failed, failed


def test_criterion_1_gradients(acceptance):
    t0 = time.perf_counter()
    res = gradient_sweep(states=50)
    worst = max(res["worst"].values())
    detail = (f"{res['combinations']} combinations x {res['states']} states, worst rel. error {worst:.1e} "
              + " ".join(f"{k}={v:.1e}" for k, v in res["worst"].items()))
    _finish(acceptance, 1, {"combinations == 63": res["combinations"] == 63, "rel. error <= 1e-4": worst <= 1e-4},
            detail, t0, budget=120)


def test_criterion_2_rendering(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    s = rng.uniform(-3, 3, size=(2000, 60))
    raw = RenderFunctionConfig("direct", normalize_weights=False)
    checks = {"direct w(0) == 0.25": ad.value(weights_direct(np.zeros((1, 1)), raw))[0, 0] == 0.25,
              "direct symmetric": np.array_equal(ad.value(weights_direct(s, raw)), ad.value(weights_direct(-s, raw)))}
    trans_ok, sum_ok = True, True
    for beta in (0.5, 3.0, 10.0, 50.0):
        sigma = ad.value(density_sigma(np.clip(s, -1.1, 1.1), beta))
        trans = np.exp(-np.concatenate([np.zeros((len(s), 1)), np.cumsum(sigma, -1)[:, :-1]], -1))
        trans_ok &= bool(np.all(np.diff(trans, axis=-1) <= 0))
        w = ad.value(weights_density(s, RenderFunctionConfig("density", beta_init=beta)))
        sum_ok &= bool(np.all(w.sum(-1) <= 1 + 1e-12))
    checks["density transmittance non-increasing"] = trans_ok
    checks["density sum <= 1"] = sum_ok
    ws = ad.value(weights_surface(np.sort(s, axis=1)[:, ::-1], RenderFunctionConfig("surface")))
    checks["surface sum <= 1"] = bool(np.all(ws.sum(-1) <= 1 + 1e-12)) and bool(
        np.all(ad.value(weights_surface(s, RenderFunctionConfig("surface"))).sum(-1) <= 1 + 1e-12))
    checks["alpha (0.5, 1.0) -> (0.5, 0.5)"] = np.array_equal(ad.value(weights_from_alpha(np.array([[0.5, 1.0]]))),
                                                              [[0.5, 0.5]])
    _finish(acceptance, 2, checks, f"{len(checks)} checks", t0, budget=10)


def test_criterion_3_losses(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    T = 0.1
    depth = rng.uniform(0.3, 5.0, size=500)
    dists = depth[:, None] + rng.uniform(-T, T, size=(500, 12))
    c, t = sdf_loss((depth[:, None] - dists) / T, dists, depth, T)
    free_d = rng.uniform(0.05, 1.0, size=(500, 48)) * (depth[:, None] - T)
    f = free_space_loss(np.ones_like(free_d), free_d, depth, T)
    w = LossWeights()
    total_ok = True
    for _ in range(1000):
        v = rng.uniform(0, 10, size=5)
        b = LossBreakdown(*v)
        expect = 5 * v[0] + 1 * v[1] + 50 * v[2] + 200 * v[3] + 10 * v[4]
        total_ok &= abs(float(ad.value(total_loss(b, w))) - expect) <= 1e-12 * max(1.0, expect)
    checks = {"sdf error zero": float(ad.value(c)) == 0.0 and float(ad.value(t)) == 0.0,
              "free-space error zero": float(ad.value(f)) == 0.0,
              "lambda == (5, 1, 200, 50, 10)": (w.photometric, w.depth, w.sdf_tail, w.sdf_center,
                                                w.free_space) == (5, 1, 200, 50, 10),
              "total == weighted sum": total_ok}
    _finish(acceptance, 3, checks, f"{len(checks)} checks", t0)


def test_criterion_4_sampling(acceptance):
    t0 = time.perf_counter()
    cfg, far = SamplingConfig(), 6.93
    rng = np.random.default_rng(4)
    n = 10_000
    depth = np.where(rng.random(n) < 0.2, 0.0, rng.uniform(cfg.near + cfg.truncation + 1e-3, 6.0, size=n))
    dists, mask = stratified_sample_rays(depth, cfg, far, rng)
    T, has = cfg.truncation, depth > 0
    d = depth[has][:, None]
    free, trunc = dists[has][:, :cfg.n_free], dists[has][:, cfg.n_free:]
    tb = d - T + 2 * T * np.arange(cfg.n_trunc + 1)[None] / cfg.n_trunc
    fb = cfg.near + (d - T - cfg.near) * np.arange(cfg.n_free + 1)[None] / cfg.n_free
    nb = cfg.near + (far - cfg.near) * np.arange(cfg.n_samples + 1)[None] / cfg.n_samples
    empty = dists[~has]
    checks = {"60 samples per ray": dists.shape == (n, 60) and (cfg.n_trunc, cfg.n_free) == (12, 48),
              "all valid": bool(mask.all()),
              "sorted": bool(np.all(np.diff(dists, axis=1) >= 0)),
              "12 truncation samples one per bin": bool(np.all((trunc >= tb[:, :-1]) & (trunc <= tb[:, 1:]))),
              "48 free samples one per bin": bool(np.all((free >= fb[:, :-1]) & (free <= fb[:, 1:]))),
              "60 span samples one per bin": bool(np.all((empty >= nb[:, :-1]) & (empty <= nb[:, 1:])))}
    _finish(acceptance, 4, checks, f"{n} rays ({int(has.sum())} with depth)", t0, budget=30)


def test_criterion_5_init_only(acceptance):
    t0 = time.perf_counter()
    res = init_only_medians()
    dense, mlp = res["dense"], res["mlp"]
    limit = 0.02 * DIAMETER_CM
    detail = (f"dense DepthL1 {dense['depth_l1_cm']:.2f} cm PSNR {dense['psnr_db']:.1f} dB, "
              f"mlp DepthL1 {mlp['depth_l1_cm']:.2f} cm (limit {limit:.2f} cm)")
    checks = {"dense DepthL1 < 2% diameter": dense["depth_l1_cm"] < limit, "dense PSNR > 20": dense["psnr_db"] > 20,
              "dense DepthL1 < mlp DepthL1": dense["depth_l1_cm"] < mlp["depth_l1_cm"]}
    _finish(acceptance, 5, checks, detail, t0, budget=300)


def test_criterion_6_mini_slam(acceptance):
    t0 = time.perf_counter()
    slam = mini_slam()
    pert = perturbation_recovery()
    limit = 0.01 * slam["diameter_cm"]
    detail = (f"ATE {slam['ate_cm']:.2f} cm (limit {limit:.2f}), perturbation residual median "
              f"{pert['median_cm']:.3f} cm of 1 cm (ratio {pert['ratio']:.3f}, max {pert['max_cm']:.3f} cm)")
    checks = {"ATE < 1% diameter": slam["ate_cm"] < limit, "perturbation median < 20%": pert["ratio"] < 0.2}
    _finish(acceptance, 6, checks, detail, t0, budget=600)


def test_criterion_7_explicit_hybrid(acceptance):
    t0 = time.perf_counter()
    res = explicit_hybrid_experiment()
    detail = (f"prior gap {res['prior_gap']:.1e}, near-surface SDF error {res['prior_err_cm']:.3f} -> "
              f"{res['hybrid_err_cm']:.3f} cm over {res['known_points']} known points")
    checks = {"zeroed residual equals prior": res["prior_gap"] == 0.0,
              "residual lowers SDF error": res["hybrid_err_cm"] < res["prior_err_cm"]}
    _finish(acceptance, 7, checks, detail, t0, budget=120)


def test_criterion_8_metrics(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    ref = rng.normal(size=(30, 3))
    est = ref + 0.01 * rng.normal(size=(30, 3))
    base = ate_rmse(est, ref)
    ate_dev = max(abs(ate_rmse(est @ Rotation.random(random_state=k).as_matrix().T + rng.uniform(-5, 5, 3), ref)
                      - base) for k in range(50))
    mesh = marching_cubes(lambda p: np.linalg.norm(p, axis=-1) - 0.5, (-0.6,) * 3, (0.6,) * 3, voxel=0.02)
    r = np.linalg.norm(mesh.vertices, axis=1)
    scores = mesh_scores(mesh, mesh, n=5000)
    nn_ok = True
    for k in range(3):
        pts, q = rng.uniform(-1, 1, size=(1000, 3)), rng.uniform(-1.5, 1.5, size=(1000, 3))
        d, i = GridIndex(pts).query(q)
        d0, i0 = brute_force_nn(pts, q)
        nn_ok &= bool(np.array_equal(i, i0)) and bool(np.allclose(d, d0, rtol=1e-12))
    img = np.zeros((8, 8, 3))
    checks = {"ATE rigid invariance <= 1e-9 cm": ate_dev <= 1e-9,
              "PSNR(MSE=0.01) == 20": abs(psnr(img + 0.1, img) - 20.0) <= 1e-12,
              "sphere radii in [0.48, 0.52]": len(r) > 0 and r.min() >= 0.48 and r.max() <= 0.52,
              "identical meshes score perfectly": (scores.accuracy_cm, scores.completion_cm,
                                                   scores.completion_ratio) == (0.0, 0.0, 100.0),
              "nearest neighbour == brute force": nn_ok}
    detail = f"ATE deviation {ate_dev:.1e} cm, radii [{r.min():.4f}, {r.max():.4f}] m"
    _finish(acceptance, 8, checks, detail, t0, budget=60)


def test_criterion_9_leaderboard(acceptance, tmp_path):
    t0 = time.perf_counter()
    preset = RunConfig.from_dict(dict(SMOKE_PRESET))
    lab_rows, lab_fail = run_sweep(grid_configs("lab", preset), tmp_path / "lab")
    prac_rows, prac_fail = run_sweep(grid_configs("practical", preset), tmp_path / "practical")
    metrics = sorted((tmp_path / "lab").glob("runs/*/metrics.json"))
    stamps = [p.stat().st_mtime_ns for p in metrics]
    again, _ = run_sweep(grid_configs("lab", preset), tmp_path / "lab")
    cfg = RunConfig.from_dict({**SMOKE_PRESET, "encoding": "hash", "seed": 7})
    run_single(cfg, tmp_path / "a")
    run_single(RunConfig.from_dict({**SMOKE_PRESET, "encoding": "hash", "seed": 7}), tmp_path / "b")
    checks = {"lab 15 rows": len(lab_rows) == 15 and len(read_leaderboard_csv(tmp_path / "lab" / "leaderboard.csv")) == 15,
              "practical 12 rows": len(prac_rows) == 12
              and len(read_leaderboard_csv(tmp_path / "practical" / "leaderboard.csv")) == 12,
              "no failed runs": not lab_fail and not prac_fail,
              "bit-identical metrics.json": (tmp_path / "a" / "metrics.json").read_bytes()
              == (tmp_path / "b" / "metrics.json").read_bytes(),
              "resume skips finished runs": again == lab_rows and [p.stat().st_mtime_ns for p in metrics] == stamps}
    _finish(acceptance, 9, checks, f"lab {len(lab_rows)} rows, practical {len(prac_rows)} rows", t0)
