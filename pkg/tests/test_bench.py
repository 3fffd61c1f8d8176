import csv
import json

import numpy as np
import pytest

from inrslam import bench
from inrslam.bench import (FAILED, LEADERBOARD_COLUMNS, SMOKE_PRESET, ConfigError, RunConfig, emit_leaderboard,
                           grid_configs, make_row, rank_marks, read_leaderboard_csv, run_single, run_sweep)

GOLDEN_HEADER = ("encoding,structure,rendering,scenario,Acc_cm,Comp_cm,CompPct,ATE_cm,PSNR_db,DepthL1_cm,"
                 "Track_ms,Map_ms,ParamBytes")


def smoke(**kw):
    return RunConfig.from_dict({**SMOKE_PRESET, **kw})


@pytest.fixture(scope="module")
def lab_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("lab")
    rows, failures = run_sweep(grid_configs("lab", smoke()), out)
    return out, rows, failures


def test_lab_grid_has_fifteen_rows(lab_sweep):
    out, rows, failures = lab_sweep
    assert not failures
    assert len(rows) == 15
    assert len(read_leaderboard_csv(out / "leaderboard.csv")) == 15


def test_practical_grid_has_twelve_configs():
    cfgs = grid_configs("practical", smoke())
    assert len(cfgs) == 12
    assert {c.encoding for c in cfgs} >= {"hybrid"}
    assert {c.rendering for c in cfgs} == {"direct", "density"}


def test_golden_header(lab_sweep):
    out, _, _ = lab_sweep
    assert (out / "leaderboard.csv").read_text().splitlines()[0] == GOLDEN_HEADER


def test_csv_json_agree(lab_sweep):
    out, _, _ = lab_sweep
    from_csv = read_leaderboard_csv(out / "leaderboard.csv")
    from_json = json.loads((out / "leaderboard.json").read_text())
    assert from_csv == from_json
    assert list(from_json[0]) == list(LEADERBOARD_COLUMNS)


def test_markdown_marks_best(lab_sweep):
    out, rows, _ = lab_sweep
    md = (out / "leaderboard.md").read_text()
    assert md.count("\n") == 17
    assert "**" in md


def test_resumable_sweep_skips_finished_runs(lab_sweep):
    out, rows, _ = lab_sweep
    metrics = sorted(out.glob("runs/*/metrics.json"))
    stamps = [p.stat().st_mtime_ns for p in metrics]
    again, failures = run_sweep(grid_configs("lab", smoke()), out)
    assert not failures
    assert [p.stat().st_mtime_ns for p in metrics] == stamps
    assert again == rows


def test_identical_config_reproduces_metrics_bit_for_bit(tmp_path):
    cfg = smoke(encoding="hash", rendering="density", seed=3)
    run_single(cfg, tmp_path / "a")
    run_single(smoke(encoding="hash", rendering="density", seed=3), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_run_artifacts_and_eval(tmp_path):
    cfg = smoke(mode="mapping-only", encoding="triplane")
    run_single(cfg, tmp_path)
    for name in ("config.json", "model.ckpt", "trajectory.txt", "mesh.ply", "timings.json", "metrics.json"):
        assert (tmp_path / name).is_file(), name
    before = (tmp_path / "metrics.json").read_bytes()
    bench.eval_run(tmp_path)
    assert (tmp_path / "metrics.json").read_bytes() == before


def test_init_only_and_explicit_hybrid_modes(tmp_path):
    row = run_single(smoke(mode="init-only"), tmp_path / "init")
    assert row["ATE_cm"] is None and row["Acc_cm"] is None and row["PSNR_db"] is not None
    row = run_single(smoke(mode="mapping-only", encoding="explicit-hybrid"), tmp_path / "eh")
    assert row["encoding"] == "explicit-hybrid"
    with pytest.raises(ConfigError):
        smoke(mode="slam", encoding="explicit-hybrid").validate()


def test_zero_rows_and_empty_selection(tmp_path):
    emit_leaderboard([], tmp_path / "e.csv", "csv")
    assert (tmp_path / "e.csv").read_text().strip() == GOLDEN_HEADER
    assert read_leaderboard_csv(tmp_path / "e.csv") == []
    emit_leaderboard([], tmp_path / "e.json", "json")
    assert json.loads((tmp_path / "e.json").read_text()) == []
    with pytest.raises(ConfigError):
        run_sweep([], tmp_path)


def test_failed_row_encoding(tmp_path):
    row = make_row(smoke(), None)
    assert all(row[c] == FAILED for c in bench.METRIC_KEYS)
    emit_leaderboard([row], tmp_path / "f.csv")
    assert read_leaderboard_csv(tmp_path / "f.csv")[0]["ATE_cm"] == FAILED


def test_rank_marks_direction():
    rows = [{c: None for c in LEADERBOARD_COLUMNS} for _ in range(3)]
    for r, psnr, ate in zip(rows, (20.0, 25.0, 22.0), (3.0, 1.0, 2.0)):
        r["PSNR_db"], r["ATE_cm"] = psnr, ate
    marks = rank_marks(rows)
    assert marks[1]["PSNR_db"] == "best" and marks[2]["PSNR_db"] == "second"
    assert marks[1]["ATE_cm"] == "best" and marks[2]["ATE_cm"] == "second"


def test_unwritable_leaderboard_names_path(tmp_path):
    with pytest.raises(OSError, match="nope"):
        emit_leaderboard([], tmp_path / "nope" / "x.csv")


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig(rendering="nerf").validate()
    with pytest.raises(ConfigError):
        grid_configs("outdoor", RunConfig())


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        bench.main(["sweep"])
    assert exc.value.code == 2
    assert bench.main(["run", "--set", "nosuch=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_cli_run_and_mesh(tmp_path, capsys):
    code = bench.main(["run", "--preset", "smoke", "--mode", "mapping-only", "--out", str(tmp_path),
                       "--set", "n_frames=2"])
    assert code == 0
    row = json.loads(capsys.readouterr().out)
    assert row["encoding"] == "dense"
    ckpt = next(tmp_path.glob("*/model.ckpt"))
    assert bench.main(["mesh", "--checkpoint", str(ckpt), "--voxel", "0.25", "--out", str(tmp_path / "m.ply")]) == 0
    assert (tmp_path / "m.ply").is_file()


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("BENCH_SEED", "7")
    args = bench.make_parser().parse_args(["run", "--preset", "smoke"])
    assert bench.build_config(args).seed == 7
