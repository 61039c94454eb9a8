import csv
import json
import math

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from vecloc.cli import main as cli_main
from vecloc.geometry import GridSpec
from vecloc.harness import (ExperimentConfig, config_from_dict, load_config,
                            run_experiment)
from vecloc.map_core import SemanticType
from vecloc.matcher import MatcherDims
from vecloc.metrics import (FrameResult, compute_metrics, emit_report,
                            write_frame_csv)
from vecloc.solver import SolverConfig
from vecloc.synth import SceneSpec


def tiny_config(seed=0, **overrides):
    base = dict(
        scene=SceneSpec(seed=seed, road_length=240.0, poles_per_km=60,
                        surfels_per_km=120),
        dims=MatcherDims(channels=8, heads=2, points=2, layers=1, ffn_hidden=16,
                         score_hidden=16, pyramid_channels=(8, 6, 4)),
        solver=SolverConfig(range_x=1.5, range_y=1.5, range_yaw=math.radians(1.5),
                            n_steps=(7, 7, 7)),
        grid=GridSpec.centered(32, 32, 0.75),
        n_frames=6,
        seed=seed,
        perturb=(1.0, 1.0, math.radians(1.0)),
        target_dot=25.0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestRunExperiment:
    def test_zero_perturbation_noiseless_near_exact(self):
        # solving from the true pose leaves only the histogram expectation's
        # intrinsic residual, a small fraction of the finest candidate step
        config = tiny_config(perturb=(0.0, 0.0, 0.0), n_frames=4)
        report, results = run_experiment(config)
        finest_step = config.solver.level_steps(config.solver.levels - 1)[0]
        assert report.n_failed == 0
        assert report.longitudinal.mae <= 0.2 * finest_step
        assert report.lateral.mae <= 0.2 * finest_step
        assert report.yaw.mae <= 0.2

    def test_bit_reproducible(self):
        config = tiny_config(n_frames=4)
        _, a = run_experiment(config)
        _, b = run_experiment(config)
        for ra, rb in zip(a, b):
            assert ra.err_lon == rb.err_lon
            assert ra.err_lat == rb.err_lat
            assert ra.err_yaw_deg == rb.err_yaw_deg

    def test_ar_bounded_by_individual_percentages(self):
        report, _ = run_experiment(tiny_config(n_frames=6))
        bound = min(report.longitudinal.pct_below[0.3], report.lateral.pct_below[0.3])
        assert report.available_ratio <= bound + 1e-9

    def test_mae_le_rmse_every_axis(self):
        report, _ = run_experiment(tiny_config(n_frames=6))
        for axis in (report.longitudinal, report.lateral, report.yaw):
            assert axis.mae <= axis.rmse + 1e-12

    def test_threshold_monotonicity(self):
        report, _ = run_experiment(tiny_config(n_frames=6))
        for axis, ths in ((report.longitudinal, (0.1, 0.2, 0.3)),
                          (report.lateral, (0.1, 0.2, 0.3)),
                          (report.yaw, (0.1, 0.3, 0.6))):
            pcts = [axis.pct_below[t] for t in ths]
            assert pcts == sorted(pcts)


class TestEmitReport:
    def _results(self):
        _, results = run_experiment(tiny_config(n_frames=5))
        return results

    def test_csv_row_count(self, tmp_path):
        results = self._results()
        report = compute_metrics(results)
        paths = emit_report(report, results, tmp_path)
        with open(paths["frames"]) as f:
            rows = list(csv.reader(f))
        assert len(rows) == 1 + len(results)

    def test_empty_results_nan_summary(self, tmp_path):
        report = compute_metrics([])
        paths = emit_report(report, [], tmp_path)
        with open(paths["frames"]) as f:
            rows = list(csv.reader(f))
        assert len(rows) == 1  # header only
        data = json.loads(open(paths["summary_json"]).read())
        assert math.isnan(data["longitudinal"]["mae"])

    def test_csv_recomputes_summary(self, tmp_path):
        results = self._results()
        report = compute_metrics(results)
        path = tmp_path / "frames.csv"
        write_frame_csv(results, path)
        lon = []
        with open(path) as f:
            for row in csv.DictReader(f):
                if row["failed"] == "0":
                    lon.append(abs(float(row["err_lon"])))
        assert sum(lon) / len(lon) == pytest.approx(report.longitudinal.mae, abs=1e-9)

    def test_failed_frames_counted(self):
        results = [FrameResult(frame_id=0, failed=True, message="boom"),
                   FrameResult(frame_id=1, err_lon=0.1, err_lat=0.0, err_yaw_deg=0.0)]
        report = compute_metrics(results)
        assert report.n_failed == 1
        assert report.n_frames == 2
        assert report.longitudinal.mae == pytest.approx(0.1)


class TestConfigFiles:
    def test_round_trip_from_yaml(self, tmp_path):
        doc = {
            "scene": {"seed": 3, "road_length": 300.0,
                      "dropout": {"pole": 0.05, "road_boundary": 0.5}},
            "dims": {"channels": 8, "heads": 2, "points": 2, "layers": 1,
                     "ffn_hidden": 16, "score_hidden": 16,
                     "pyramid_channels": [8, 6, 4]},
            "solver": {"range_x": 2.0, "range_y": 2.0, "range_yaw_deg": 2.0,
                       "n_steps": [5, 5, 5]},
            "grid": {"H": 16, "W": 16, "resolution": 1.0},
            "n_frames": 3,
            "seed": 11,
            "perturb": [1.0, 1.0, 0.01],
        }
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(doc))
        config = load_config(path)
        assert config.seed == 11
        assert config.scene.dropout[SemanticType.POLE] == 0.05
        assert config.solver.range_yaw == pytest.approx(math.radians(2.0))
        assert config.grid.H == 16
        assert config.dims.pyramid_channels == (8, 6, 4)

    def test_empty_config_gives_defaults(self):
        config = config_from_dict({})
        assert config.n_frames == 200


def _write_tiny_yaml(path, seed=0):
    doc = {
        "scene": {"seed": seed, "road_length": 240.0},
        "dims": {"channels": 8, "heads": 2, "points": 2, "layers": 1,
                 "ffn_hidden": 16, "score_hidden": 16,
                 "pyramid_channels": [8, 6, 4]},
        "solver": {"range_x": 1.5, "range_y": 1.5, "range_yaw_deg": 1.5,
                   "n_steps": [5, 5, 5]},
        "grid": {"H": 24, "W": 24, "resolution": 1.0},
        "n_frames": 3,
        "seed": seed,
        "perturb": [1.0, 1.0, 0.017],
        "target_dot": 25.0,
    }
    path.write_text(yaml.safe_dump(doc))


class TestCli:
    def test_gen_map_writes_bundle(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        _write_tiny_yaml(cfg)
        out = tmp_path / "bundle"
        result = CliRunner().invoke(cli_main, ["gen-map", "--config", str(cfg),
                                               "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "map.jsonl").exists()
        assert (out / "poses.jsonl").exists()
        from vecloc.map_core import load_map
        assert len(load_map(out / "map.jsonl")) > 0

    def test_render_writes_grids(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        _write_tiny_yaml(cfg)
        out = tmp_path / "render"
        result = CliRunner().invoke(cli_main, ["render", "--config", str(cfg),
                                               "--out", str(out)])
        assert result.exit_code == 0, result.output
        for layer in range(3):
            assert (out / f"bev_layer{layer}.npz").exists()

    def test_solve_emits_histograms(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        _write_tiny_yaml(cfg)
        out = tmp_path / "solve"
        result = CliRunner().invoke(cli_main, ["solve", "--config", str(cfg),
                                               "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "score_histograms.npz").exists()
        with np.load(out / "score_histograms.npz") as z:
            probs = z["level0_probs"]
            assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        data = json.loads((out / "solve.json").read_text())
        assert "estimated_offset" in data

    def test_eval_writes_report(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        _write_tiny_yaml(cfg)
        out = tmp_path / "eval"
        result = CliRunner().invoke(cli_main, ["eval", "--config", str(cfg),
                                               "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "frames.csv").exists()
        assert (out / "summary.json").exists()

    def test_bad_config_nonzero_exit_with_error_record(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("scene: {road_length: -5}\n")
        result = CliRunner().invoke(cli_main, ["eval", "--config", str(cfg),
                                               "--out", str(tmp_path / "x")])
        assert result.exit_code == 1
        record = json.loads(result.output.strip().splitlines()[-1])
        assert "error" in record
