"""Benchmark runner: single runs, F x G sweeps and leaderboard emission."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .data import SequenceSpec, generate_sequence, load_sequence, write_tum
from .model import MODEL_ENCODINGS, STRUCTURES, ModelConfig, build_model, load_checkpoint, parameter_report, \
    save_checkpoint
from .objective import LossWeights
from .pipeline import Mapper, OptimConfig, SamplingConfig, initialize, render_frame, run_sequence
from .rendering import RENDER_KINDS, RenderFunctionConfig

log = logging.getLogger(__name__)

SCENARIOS = ("lab", "practical")
MODES = ("slam", "mapping-only", "init-only")
LEADERBOARD_COLUMNS = ("encoding", "structure", "rendering", "scenario", "Acc_cm", "Comp_cm", "CompPct", "ATE_cm",
                       "PSNR_db", "DepthL1_cm", "Track_ms", "Map_ms", "ParamBytes")
METRIC_KEYS = {"Acc_cm": "acc_cm", "Comp_cm": "comp_cm", "CompPct": "comp_pct", "ATE_cm": "ate_cm",
               "PSNR_db": "psnr_db", "DepthL1_cm": "depth_l1_cm", "Track_ms": "track_ms", "Map_ms": "map_ms",
               "ParamBytes": "param_bytes"}
HIGHER_IS_BETTER = {"CompPct", "PSNR_db"}
FAILED = "failed"

LAB_ENCODINGS = ("mlp", "dense", "hash", "triplane", "factor")
PRACTICAL_ENCODINGS = LAB_ENCODINGS + ("hybrid",)
GRIDS = {
    "lab": (LAB_ENCODINGS, ("direct", "density", "surface")),
    "practical": (PRACTICAL_ENCODINGS, ("direct", "density")),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    encoding: str = "dense"
    structure: str = "coupled-base"
    rendering: str = "direct"
    scenario: str = "lab"
    mode: str = "slam"
    seed: int = 0
    sequence: str | None = None  # on-disk sequence directory; synthetic when None
    # sequence
    n_frames: int = 30
    width: int = 64
    height: int = 48
    # model
    cells: tuple[float, float] = (0.24, 0.12)
    feature_dim: int = 2
    hidden: int = 32
    log2_hash: int = 13
    truncation: float = 0.1
    # sampling / schedule
    n_trunc: int = 12
    n_free: int = 48
    track_pixels: int = 1024
    map_pixels: int = 1024
    init_iters: int = 200
    track_iters: int = 20
    map_iters: int = 20
    keyframe_stride: int = 5
    # optimiser
    lr_feature: float = 1e-2
    lr_mlp: float = 1e-3
    lr_beta: float = 1e-3
    lr_pose: float = 1e-3
    lr_track: float = 1e-2
    track_decay: float = 0.1
    # loss weights
    w_photometric: float = 5.0
    w_depth: float = 1.0
    w_sdf_tail: float = 200.0
    w_sdf_center: float = 50.0
    w_free_space: float = 10.0
    # evaluation
    eval_stride: int = 5
    mesh_voxel: float = 0.05
    mesh_samples: int = 20_000

    def __post_init__(self):
        self.cells = tuple(float(c) for c in self.cells)

    def validate(self) -> "RunConfig":
        if self.encoding not in MODEL_ENCODINGS:
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if self.structure not in STRUCTURES:
            raise ConfigError(f"unknown structure {self.structure!r}")
        if self.rendering not in RENDER_KINDS:
            raise ConfigError(f"unknown rendering {self.rendering!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.encoding == "explicit-hybrid" and self.mode != "mapping-only":
            raise ConfigError("explicit-hybrid consumes external poses and runs only in mapping-only mode")
        if self.n_frames < 1 or self.width < 2 or self.height < 2:
            raise ConfigError("sequence must have at least one frame of 2x2 pixels")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cells"] = list(self.cells)
        return d

    @property
    def run_name(self) -> str:
        return f"{self.scenario}-{self.encoding}-{self.structure}-{self.rendering}-{self.mode}-s{self.seed}"

    # -- component configs ---------------------------------------------------
    def model_config(self, aabb) -> ModelConfig:
        return ModelConfig(encoding=self.encoding, structure=self.structure, aabb_lo=tuple(aabb[0]),
                           aabb_hi=tuple(aabb[1]), cells=self.cells, feature_dim=self.feature_dim,
                           hidden=self.hidden, truncation=self.truncation, log2_hash=self.log2_hash, seed=self.seed)

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(n_trunc=self.n_trunc, n_free=self.n_free, truncation=self.truncation,
                              track_pixels=self.track_pixels, map_pixels=self.map_pixels,
                              init_iters=self.init_iters, track_iters=self.track_iters, map_iters=self.map_iters,
                              keyframe_stride=self.keyframe_stride)

    def optim(self) -> OptimConfig:
        return OptimConfig(lr_feature=self.lr_feature, lr_mlp=self.lr_mlp, lr_beta=self.lr_beta,
                           lr_pose=self.lr_pose, lr_track=self.lr_track, track_decay=self.track_decay)

    def loss_weights(self) -> LossWeights:
        return LossWeights(photometric=self.w_photometric, depth=self.w_depth, sdf_tail=self.w_sdf_tail,
                           sdf_center=self.w_sdf_center, free_space=self.w_free_space)


SMOKE_PRESET = dict(n_frames=3, width=24, height=18, init_iters=5, track_iters=2, map_iters=2, track_pixels=96,
                    map_pixels=96, n_trunc=4, n_free=8, eval_stride=2, mesh_voxel=0.25, mesh_samples=1000,
                    cells=(0.5, 0.25), log2_hash=8)
PRESETS = {"smoke": SMOKE_PRESET}


def seed_default() -> int:
    return int(os.environ.get("BENCH_SEED", "0"))


# --------------------------------------------------------------------------
# single run
# --------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    config: RunConfig
    frames: list
    scene: object | None
    aabb: tuple


def load_inputs(cfg: RunConfig) -> RunArtifacts:
    if cfg.sequence:
        frames = load_sequence(cfg.sequence)
        scene = None
        lo, hi = ModelConfig().aabb_lo, ModelConfig().aabb_hi
    else:
        spec = SequenceSpec(scenario=cfg.scenario, width=cfg.width, height=cfg.height, n_frames=cfg.n_frames,
                            seed=cfg.seed)
        scene, frames = generate_sequence(spec)
        lo, hi = tuple(scene.aabb_lo), tuple(scene.aabb_hi)
    if cfg.mode == "init-only":
        frames = frames[:1]
    return RunArtifacts(cfg, frames, scene, (lo, hi))


def _mean_or_none(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def image_metrics(model, render_cfg, frames, poses, sampling: SamplingConfig, stride: int, seed: int):
    rng = np.random.default_rng(seed + 7919)
    ps, dl = [], []
    for k in range(0, len(frames), max(stride, 1)):
        color, depth = render_frame(model, render_cfg, frames[k], poses[k], sampling, rng, use_depth=True)
        ps.append(ev.psnr(color, frames[k].color))
        dl.append(ev.depth_l1(depth, frames[k].depth))
    return _mean_or_none(ps), _mean_or_none(dl)


def geometry_metrics(model, art: RunArtifacts, poses, cfg: RunConfig):
    lo, hi = art.aabb
    mesh = ev.marching_cubes(model, lo, hi, cfg.mesh_voxel)
    intr = art.frames[0].intrinsics
    depths = [f.depth for f in art.frames]
    mesh = ev.cull_mesh(mesh, poses, intr, depths, cfg.truncation)
    if art.scene is None or any(f.gt_pose is None for f in art.frames):
        return mesh, ev.MeshScores(None, None, None)
    ref = ev.marching_cubes(art.scene.sdf, lo, hi, cfg.mesh_voxel)
    ref = ev.cull_mesh(ref, [f.gt_pose for f in art.frames], intr, depths, cfg.truncation)
    return mesh, ev.mesh_scores(mesh, ref, n=cfg.mesh_samples, seed=cfg.seed)


def execute(cfg: RunConfig, art: RunArtifacts):
    """Run the selected mode; returns (model, render_cfg, poses, timings dict)."""
    model = build_model(cfg.model_config(art.aabb))
    render_cfg = RenderFunctionConfig(cfg.rendering, truncation=cfg.truncation)
    mapper = Mapper(model, render_cfg, cfg.sampling(), cfg.optim(), cfg.loss_weights())
    rng = np.random.default_rng(cfg.seed)
    frames = art.frames
    p0 = frames[0].gt_pose if frames[0].gt_pose is not None else np.eye(4)
    if cfg.encoding == "explicit-hybrid":
        # external poses feed the explicit prior before any optimisation
        for f in frames:
            model.octree.fuse(f.depth, f.intrinsics, f.gt_pose)
    if cfg.mode == "init-only":
        t = time.perf_counter()
        initialize(mapper, frames[0], p0, rng, cfg.init_iters)
        timings = {"init_ms": 1e3 * (time.perf_counter() - t), "track_ms": None, "map_ms": None}
        return model, render_cfg, [p0], timings
    track = cfg.mode == "slam"
    if not track and any(f.gt_pose is None for f in frames):
        raise ConfigError("mapping-only needs poses for every frame")
    res = run_sequence(mapper, frames, rng, first_pose=p0, track=track, init_iters=cfg.init_iters)
    timings = {"init_ms": res.init_ms, "track_ms": _mean_or_none(res.track_ms) if track else None,
               "map_ms": _mean_or_none(res.map_ms), "flagged_frames": res.flagged}
    return model, render_cfg, res.poses, timings


def compute_metrics(cfg: RunConfig, art: RunArtifacts, model, render_cfg, poses, timings=None,
                    with_mesh: bool = True):
    psnr_db, dl1 = image_metrics(model, render_cfg, art.frames, poses, cfg.sampling(), cfg.eval_stride, cfg.seed)
    report = ev.MetricsReport(psnr_db=psnr_db, depth_l1_cm=dl1,
                              param_bytes=parameter_report(model)["total_bytes"])
    if cfg.mode == "slam" and all(f.gt_pose is not None for f in art.frames):
        report.ate_cm = ev.ate_rmse(poses, [f.gt_pose for f in art.frames])
    mesh = None
    if with_mesh and cfg.mode != "init-only":
        mesh, scores = geometry_metrics(model, art, poses, cfg)
        report.acc_cm, report.comp_cm, report.comp_pct = scores.accuracy_cm, scores.completion_cm, \
            scores.completion_ratio
    if timings:
        report.track_ms = timings.get("track_ms")
        report.map_ms = timings.get("map_ms")
    return report, mesh


def _deterministic_metrics(report: ev.MetricsReport) -> dict:
    d = report.to_dict()
    d.pop("track_ms")
    d.pop("map_ms")
    return d


def write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def run_single(cfg: RunConfig, out_dir) -> dict:
    """Execute one configuration and write its artefacts; returns the leaderboard row."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    art = load_inputs(cfg)
    model, render_cfg, poses, timings = execute(cfg, art)
    report, mesh = compute_metrics(cfg, art, model, render_cfg, poses, timings)
    save_checkpoint(out / "model.ckpt", model, {"poses": np.stack(poses), "render.beta": render_cfg.beta.values})
    write_tum(out / "trajectory.txt", poses, [f.index for f in art.frames])
    if mesh is not None:
        ev.write_ply(out / "mesh.ply", mesh)
    write_json(out / "timings.json", {k: v for k, v in timings.items()})
    write_json(out / "metrics.json", _deterministic_metrics(report))
    return make_row(cfg, report)


def make_row(cfg: RunConfig, report: ev.MetricsReport | None) -> dict:
    row = {"encoding": cfg.encoding, "structure": cfg.structure, "rendering": cfg.rendering,
           "scenario": cfg.scenario}
    d = report.to_dict() if report is not None else None
    for col, key in METRIC_KEYS.items():
        row[col] = FAILED if d is None else d[key]
    return row


def row_from_dir(cfg: RunConfig, run_dir) -> dict:
    run_dir = Path(run_dir)
    m = json.loads((run_dir / "metrics.json").read_text())
    tp = run_dir / "timings.json"
    t = json.loads(tp.read_text()) if tp.is_file() else {}
    report = ev.MetricsReport(**{**m, "track_ms": t.get("track_ms"), "map_ms": t.get("map_ms")})
    return make_row(cfg, report)


def eval_run(run_dir) -> dict:
    """Recompute metrics from a run directory's config, checkpoint and trajectory."""
    run_dir = Path(run_dir)
    cfg = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text())).validate()
    art = load_inputs(cfg)
    model, extra = load_checkpoint(run_dir / "model.ckpt")
    poses = list(extra["poses"])
    render_cfg = RenderFunctionConfig(cfg.rendering, truncation=cfg.truncation)
    if "render.beta" in extra:
        render_cfg.beta.values[...] = extra["render.beta"]
    tp = run_dir / "timings.json"
    timings = json.loads(tp.read_text()) if tp.is_file() else None
    report, _ = compute_metrics(cfg, art, model, render_cfg, poses, timings)
    write_json(run_dir / "metrics.json", _deterministic_metrics(report))
    return make_row(cfg, report)


# --------------------------------------------------------------------------
# sweeps and leaderboards
# --------------------------------------------------------------------------

def grid_configs(grid: str, base: RunConfig) -> list[RunConfig]:
    if grid not in GRIDS:
        raise ConfigError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    encodings, renderings = GRIDS[grid]
    return [dataclasses.replace(base, encoding=e, rendering=g, scenario=grid) for e in encodings for g in renderings]


def _sweep_worker(args) -> tuple[dict, str | None]:
    cfg, run_dir = args
    try:
        return run_single(cfg, run_dir), None
    except Exception as exc:  # recorded, the sweep continues
        msg = f"{type(exc).__name__}: {exc}"
        log.error("run %s failed: %s", cfg.run_name, msg)
        (Path(run_dir) / "error.txt").write_text(traceback.format_exc())
        return make_row(cfg, None), msg


def run_sweep(configs: list[RunConfig], out_dir, jobs: int = 1, force: bool = False) -> tuple[list[dict], dict]:
    """Run every configuration (skipping finished ones unless ``force``); returns (rows, failures)."""
    if not configs:
        raise ConfigError("empty sweep selection")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict | None] = [None] * len(configs)
    todo = []
    for i, cfg in enumerate(configs):
        cfg.validate()
        run_dir = out / "runs" / cfg.run_name
        run_dir.mkdir(parents=True, exist_ok=True)
        if not force and (run_dir / "metrics.json").is_file():
            rows[i] = row_from_dir(cfg, run_dir)
        else:
            todo.append((i, cfg, run_dir))
    failures = {}
    work = [(cfg, d) for _, cfg, d in todo]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_worker, work))
    else:
        results = [_sweep_worker(w) for w in work]
    for (i, cfg, _), (row, err) in zip(todo, results):
        rows[i] = row
        if err is not None:
            failures[cfg.run_name] = err
    rows = sort_rows(rows)
    emit_leaderboard(rows, out / "leaderboard.csv", "csv")
    emit_leaderboard(rows, out / "leaderboard.json", "json")
    emit_leaderboard(rows, out / "leaderboard.md", "md")
    return rows, failures


def sort_rows(rows: list[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: (r["scenario"], r["encoding"], r["structure"], r["rendering"]))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _parse(v: str):
    if v == "":
        return None
    if v == FAILED:
        return v
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_leaderboard_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def rank_marks(rows: list[dict]) -> list[dict]:
    """Per metric column, 'best' / 'second' marks (ties share the mark)."""
    marks = [{} for _ in rows]
    for col in METRIC_KEYS:
        vals = sorted({r[col] for r in rows if isinstance(r[col], (int, float)) and math.isfinite(r[col])},
                      reverse=col in HIGHER_IS_BETTER)
        for label, v in zip(("best", "second"), vals[:2]):
            for m, r in zip(marks, rows):
                if r[col] == v:
                    m[col] = label
    return marks


def emit_leaderboard(rows: list[dict], path, fmt: str = "csv") -> Path:
    path = Path(path)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(LEADERBOARD_COLUMNS)
                for r in rows:
                    w.writerow([_fmt(r[c]) for c in LEADERBOARD_COLUMNS])
        elif fmt == "json":
            path.write_text(json.dumps([{c: r[c] for c in LEADERBOARD_COLUMNS} for r in rows], indent=2) + "\n")
        elif fmt == "md":
            marks = rank_marks(rows)
            lines = ["| " + " | ".join(LEADERBOARD_COLUMNS) + " |", "|" + "---|" * len(LEADERBOARD_COLUMNS)]
            for r, m in zip(rows, marks):
                cells = []
                for c in LEADERBOARD_COLUMNS:
                    v = r[c]
                    s = f"{v:.3f}" if isinstance(v, float) else _fmt(v)
                    if m.get(c) == "best":
                        s = f"**{s}**"
                    elif m.get(c) == "second":
                        s = f"_{s}_"
                    cells.append(s)
                lines.append("| " + " | ".join(cells) + " |")
            path.write_text("\n".join(lines) + "\n")
        else:
            raise ValueError(f"unknown leaderboard format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write leaderboard {path}: {exc}") from exc
    return path


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

_FLAG_KEYS = ("encoding", "structure", "rendering", "scenario", "mode", "seed")


def _coerce(cfg_field: dataclasses.Field, text: str):
    default = cfg_field.default
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split(","))
    return text


def build_config(args) -> RunConfig:
    values: dict = {"seed": seed_default()}
    if getattr(args, "preset", None):
        values.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for k in _FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in fields:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = _coerce(fields[k], v)
    return RunConfig.from_dict(values).validate()


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with a flat override map")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--out", default="bench_out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="implicit-representation RGB-D SLAM benchmark")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute one configuration")
    _add_common(run)
    run.add_argument("--encoding", choices=MODEL_ENCODINGS)
    run.add_argument("--structure", choices=STRUCTURES)
    run.add_argument("--rendering", choices=RENDER_KINDS)
    run.add_argument("--scenario", choices=SCENARIOS)
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--seed", type=int)
    sw = sub.add_parser("sweep", help="run an F x G grid and emit leaderboards")
    _add_common(sw)
    sw.add_argument("--grid", required=True, choices=sorted(GRIDS))
    sw.add_argument("--structure", choices=STRUCTURES)
    sw.add_argument("--mode", choices=MODES)
    sw.add_argument("--seed", type=int)
    e = sub.add_parser("eval", help="recompute metrics from a run directory")
    e.add_argument("--run", required=True)
    m = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--voxel", type=float, default=0.02)
    m.add_argument("--out", default=None)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = build_config(args)
            run_dir = Path(args.out) / cfg.run_name
            if not args.force and (run_dir / "metrics.json").is_file():
                row = row_from_dir(cfg, run_dir)
            else:
                row = run_single(cfg, run_dir)
            print(json.dumps(row, indent=2))
            return 0
        if args.command == "sweep":
            base = build_config(args)
            rows, failures = run_sweep(grid_configs(args.grid, base), args.out, args.jobs, args.force)
            print(f"{len(rows)} rows -> {Path(args.out) / 'leaderboard.csv'}")
            if failures:
                for name, msg in failures.items():
                    print(f"FAILED {name}: {msg}", file=sys.stderr)
                return 1
            return 0
        if args.command == "eval":
            print(json.dumps(eval_run(args.run), indent=2))
            return 0
        if args.command == "mesh":
            model, _ = load_checkpoint(args.checkpoint)
            mesh = ev.marching_cubes(model, model.aabb.lo, model.aabb.hi, args.voxel)
            out = args.out or str(Path(args.checkpoint).with_suffix(".ply"))
            ev.write_ply(out, mesh)
            print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {out}")
            return 0
    except ConfigError as exc:
        ap.print_usage(sys.stderr)
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
