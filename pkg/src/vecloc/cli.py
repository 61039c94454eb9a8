"""Command-line interface: map generation, frame rendering, single-frame solves,
evaluation runs, training, and gradient checks."""

from __future__ import annotations

import json
import os
import sys

import click

from . import harness
from .bev import save_grid
from .map_core import save_map
from .matcher import save_checkpoint
from .metrics import emit_score_histograms
from .synth import OracleSignatures, generate_scene


def _fail(err: Exception):
    record = {"error": type(err).__name__, "message": str(err)}
    click.echo(json.dumps(record), err=True)
    sys.exit(1)


def _load(config_path, seed):
    config = harness.load_config(config_path) if config_path else harness.ExperimentConfig()
    if seed is not None:
        import dataclasses
        config = dataclasses.replace(config, seed=seed)
    return config


common_options = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 default=None, help="YAML experiment configuration."),
    click.option("--seed", type=int, default=None, help="Override the config seed."),
    click.option("--out", "out_dir", type=click.Path(), default="out",
                 help="Output directory."),
]


def with_common(fn):
    for opt in reversed(common_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Vectorized-map BEV localization toolkit."""


@main.command("gen-map")
@with_common
def gen_map(config_path, seed, out_dir):
    """Generate a synthetic scene bundle (map file + ground-truth poses)."""
    try:
        config = _load(config_path, seed)
        vmap, trajectory = generate_scene(config.scene)
        os.makedirs(out_dir, exist_ok=True)
        save_map(vmap, os.path.join(out_dir, "map.jsonl"))
        with open(os.path.join(out_dir, "poses.jsonl"), "w", encoding="utf-8") as f:
            for pose in trajectory:
                f.write(json.dumps(pose.to_record(), sort_keys=True) + "\n")
        click.echo(f"wrote {len(vmap)} elements and {len(trajectory)} poses to {out_dir}")
    except Exception as e:
        _fail(e)


@main.command("render")
@with_common
@click.option("--frame", "frame_idx", type=int, default=0)
def render(config_path, seed, out_dir, frame_idx):
    """Render one frame's BEV pyramid to grid dump files."""
    try:
        config = _load(config_path, seed)
        vmap, trajectory = generate_scene(config.scene)
        matcher = harness.build_matcher(config)
        signatures = OracleSignatures.from_matcher(matcher, config.target_dot)
        frames = harness.experiment_frames(config, vmap, trajectory, signatures,
                                           n_frames=frame_idx + 1)
        frame = [f for _, f in frames][frame_idx]
        os.makedirs(out_dir, exist_ok=True)
        for layer, grid in enumerate(frame.pyramid.layers):
            save_grid(grid, os.path.join(out_dir, f"bev_layer{layer}.npz"))
        click.echo(f"rendered frame {frame_idx} "
                   f"({len(frame.elements)} elements) into {out_dir}")
    except Exception as e:
        _fail(e)


@main.command("solve")
@with_common
@click.option("--frame", "frame_idx", type=int, default=0)
def solve(config_path, seed, out_dir, frame_idx):
    """Solve one frame and dump its per-level score histograms."""
    try:
        config = _load(config_path, seed)
        vmap, trajectory = generate_scene(config.scene)
        matcher = harness.build_matcher(config)
        signatures = OracleSignatures.from_matcher(matcher, config.target_dot)
        frames = harness.experiment_frames(config, vmap, trajectory, signatures,
                                           n_frames=frame_idx + 1)
        frame = [f for _, f in frames][frame_idx]
        record, result = harness.evaluate_frame(matcher, frame, config, frame_idx,
                                                keep_posteriors=True)
        os.makedirs(out_dir, exist_ok=True)
        emit_score_histograms(result, os.path.join(out_dir, "score_histograms.npz"))
        with open(os.path.join(out_dir, "solve.json"), "w", encoding="utf-8") as f:
            json.dump({
                "true_offset": list(frame.true_delta),
                "estimated_offset": list(result.delta),
                "err_lon": record.err_lon,
                "err_lat": record.err_lat,
                "err_yaw_deg": record.err_yaw_deg,
            }, f, indent=2)
            f.write("\n")
        click.echo(f"estimated offset {tuple(round(v, 4) for v in result.delta)}; "
                   f"errors lon {record.err_lon:.4f} m, lat {record.err_lat:.4f} m, "
                   f"yaw {record.err_yaw_deg:.4f} deg")
    except Exception as e:
        _fail(e)


@main.command("eval")
@with_common
def eval_cmd(config_path, seed, out_dir):
    """Run the full experiment and emit the metrics report."""
    try:
        config = _load(config_path, seed)
        report, _ = harness.run_experiment(config, out_dir=out_dir)
        click.echo(report.to_text())
    except Exception as e:
        _fail(e)


@main.command("train")
@with_common
def train_cmd(config_path, seed, out_dir):
    """Run the toy training loop and save the checkpoint plus the loss log."""
    try:
        config = _load(config_path, seed)
        if config.training is None:
            config = harness.training_experiment_config(config.seed)
        outcome = harness.run_training_experiment(config)
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(outcome.matcher, os.path.join(out_dir, "checkpoint.npz"))
        with open(os.path.join(out_dir, "history.jsonl"), "w", encoding="utf-8") as f:
            for row in outcome.history:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        click.echo(f"loss {outcome.history[0]['total']:.4f} -> "
                   f"{outcome.history[-1]['total']:.4f} "
                   f"({100 * outcome.loss_reduction:.1f}% reduction); holdout MAE "
                   f"{outcome.mae_untrained:.3f} -> {outcome.mae_trained:.3f} m")
    except Exception as e:
        _fail(e)


@main.command("gradcheck")
@with_common
@click.option("--step", type=float, default=1e-4)
def gradcheck(config_path, seed, out_dir, step):
    """Finite-difference gradient checks at toy dimensions."""
    try:
        results = harness.run_gradient_checks(seed=seed or 0, step=step)
        worst = {term: max(groups.values()) for term, groups in results.items()}
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "gradcheck.json"), "w", encoding="utf-8") as f:
            json.dump(results, f, indent=2, sort_keys=True)
            f.write("\n")
        for term, err in worst.items():
            click.echo(f"{term:16s} max relative error {err:.3e}")
        if any(err >= 1e-4 for err in worst.values()):
            raise RuntimeError("gradient check exceeded the 1e-4 tolerance")
    except Exception as e:
        _fail(e)


if __name__ == "__main__":
    main()
