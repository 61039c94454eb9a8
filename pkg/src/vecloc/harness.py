"""Experiment orchestration: configuration, the frame-by-frame evaluation loop,
the training experiment, and the toy-dimension gradient check."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import yaml

from .bev import make_pyramid_specs
from .geometry import GridSpec, Pose6, PoseOffset3, relative_offset
from .map_core import SemanticType, VectorMap
from .matcher import Matcher, MatcherDims, configure_oracle_scoring
from .metrics import FrameResult, compute_metrics, emit_report
from .solver import SolverConfig, solve_multilevel
from .synth import (Frame, OracleSignatures, SceneSpec, generate_scene,
                    make_frame)
from .training import (RandomPoseDistribution, TrainingConfig,
                       capture_pinned_constants, gradient_check, total_loss,
                       train_loop)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    dims: MatcherDims = field(default_factory=MatcherDims)
    solver: SolverConfig = field(default_factory=SolverConfig)
    grid: GridSpec = field(default_factory=lambda: GridSpec.centered(64, 64, 0.5))
    n_frames: int = 200
    seed: int = 0
    perturb: tuple[float, float, float] = (2.0, 2.0, math.radians(2.0))
    target_dot: float = 30.0
    noise_std_factor: float = 0.0  # x mean signature norm, per layer
    use_decoder: bool = False
    checkpoint: str | None = None
    window_margin: float = 4.0
    roll_pitch_deg: float = 2.0
    training: TrainingConfig | None = None

    def pyramid_specs(self) -> list[GridSpec]:
        return make_pyramid_specs(self.grid, len(self.dims.pyramid_channels))


def _pose_error_norm(offset: PoseOffset3, yaw_lever: float) -> float:
    """Scalar pose error: planar norm with yaw converted to arc length at the
    grid edge."""
    return math.sqrt(offset.dx ** 2 + offset.dy ** 2 + (offset.dpsi * yaw_lever) ** 2)


def build_matcher(config: ExperimentConfig) -> Matcher:
    if config.checkpoint:
        from .matcher import load_checkpoint
        matcher = load_checkpoint(config.checkpoint)
    else:
        matcher = Matcher(config.dims, seed=config.seed)
    if not config.use_decoder:
        configure_oracle_scoring(matcher)
    return matcher


def layer_noise_stds(signatures: OracleSignatures, factor: float) -> tuple[float, ...]:
    return tuple(float(factor * signatures.layer_norms(l).mean())
                 for l in range(len(signatures.per_layer)))


def frame_embeddings(matcher: Matcher, frame: Frame, use_decoder: bool) -> torch.Tensor:
    if use_decoder:
        return matcher.decode(frame.elements, frame.init_pose, frame.pyramid.layers[0])
    return matcher.embedding_rows([el.sem for el in frame.elements])


def evaluate_frame(matcher: Matcher, frame: Frame, config: ExperimentConfig,
                   frame_id: int, keep_posteriors: bool = False):
    emb = frame_embeddings(matcher, frame, config.use_decoder)
    result = solve_multilevel(frame.pyramid, frame.elements, emb, frame.init_pose,
                              config.solver, matcher, keep_posteriors=keep_posteriors)
    err = relative_offset(frame.gt_pose, result.final_pose)
    lever = 0.5 * config.grid.extent[0]
    level_errors = tuple(
        _pose_error_norm(relative_offset(frame.gt_pose, pose), lever)
        for pose in result.poses_after)
    record = FrameResult(
        frame_id=frame_id,
        n_elements=len(frame.elements),
        true_offset=frame.true_delta,
        est_offset=result.delta,
        err_lon=err.dx,
        err_lat=err.dy,
        err_yaw_deg=math.degrees(err.dpsi),
        sigma_diag=tuple(float(result.sigmas[-1][k, k]) for k in range(3)),
        level_errors=level_errors,
    )
    return record, result


def experiment_frames(config: ExperimentConfig, vmap: VectorMap,
                      trajectory: Sequence[Pose6], signatures: OracleSignatures,
                      n_frames: int | None = None, salt: int = 0):
    """Deterministic frame stream; each frame has its own spawned rng."""
    specs = config.pyramid_specs()
    noise = layer_noise_stds(signatures, config.noise_std_factor)
    margin_idx = int(math.ceil(0.5 * config.grid.extent[0] / 5.0)) + 1
    lo, hi = margin_idx, len(trajectory) - margin_idx
    children = np.random.SeedSequence((config.seed, salt)).spawn(n_frames or config.n_frames)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        base = trajectory[int(rng.integers(lo, hi))]
        yield i, make_frame(
            vmap, base, signatures, specs, rng,
            perturb_ranges=config.perturb,
            noise_std=noise,
            dropout=config.scene.dropout or None,
            roll_pitch_range=math.radians(config.roll_pitch_deg),
            window_margin=config.window_margin,
            solver_ranges=(config.solver.range_x, config.solver.range_y,
                           config.solver.range_yaw),
            samples_per_segment=config.solver.samples_per_segment)


def run_experiment(config: ExperimentConfig, out_dir=None):
    """Generate, render and solve every frame; aggregate metrics.

    Frame failures are recorded and excluded from the statistics, never dropped
    silently.
    """
    vmap, trajectory = generate_scene(config.scene)
    matcher = build_matcher(config)
    signatures = OracleSignatures.from_matcher(matcher, config.target_dot)
    results: list[FrameResult] = []
    for frame_id, frame in experiment_frames(config, vmap, trajectory, signatures):
        try:
            record, _ = evaluate_frame(matcher, frame, config, frame_id)
        except Exception as e:  # failures are reported, never silently dropped
            record = FrameResult(frame_id=frame_id, n_elements=len(frame.elements),
                                 true_offset=frame.true_delta, failed=True,
                                 message=f"{type(e).__name__}: {e}")
        results.append(record)
    report = compute_metrics(results)
    if out_dir is not None:
        emit_report(report, results, out_dir)
    return report, results


def toy_gradcheck_config(seed: int = 0) -> ExperimentConfig:
    """Tiny dimensions for exhaustive finite-difference checks: 8 channels,
    4 elements' worth of scene, 5^3 candidates."""
    dims = MatcherDims(channels=8, heads=2, points=2, layers=1, ffn_hidden=16,
                       score_hidden=16, pyramid_channels=(8, 6, 4))
    solver = SolverConfig(range_x=1.0, range_y=1.0, range_yaw=math.radians(1.0),
                          n_steps=(5, 5, 5), levels=2, samples_per_segment=2)
    training = TrainingConfig(
        solver=solver,
        pose_dist=RandomPoseDistribution(n_samples=8, yaw_range=math.radians(1.0)))
    scene = SceneSpec(seed=seed, road_length=120.0, lanes=1,
                      poles_per_km=30, signs_per_km=0, surfels_per_km=0,
                      crossings_per_km=0, markings_per_km=0)
    return ExperimentConfig(scene=scene, dims=dims, solver=solver,
                            grid=GridSpec.centered(12, 12, 1.0),
                            seed=seed, perturb=(0.6, 0.6, math.radians(0.8)),
                            target_dot=4.0,
                            use_decoder=True, training=training)


def make_gradcheck_frame(config: ExperimentConfig, max_elements: int = 4) -> Frame:
    vmap, trajectory = generate_scene(config.scene)
    matcher = Matcher(config.dims, seed=config.seed)
    signatures = OracleSignatures.from_matcher(matcher, config.target_dot)
    _, frame = next(iter(experiment_frames(config, vmap, trajectory, signatures,
                                           n_frames=1)))
    if len(frame.elements) > max_elements:
        frame = dataclasses.replace(frame, elements=frame.elements[:max_elements],
                                    _raster_cache={})
        frame = frame.rerender()
    return frame


LOSS_TERM_WEIGHTS = {
    "rmse": (1.0, 0.0, 0.0, 0.0),
    "pose_solver_kl": (0.0, 1.0, 0.0, 0.0),
    "random_pose_kl": (0.0, 0.0, 1.0, 0.0),
    "semantic_seg": (0.0, 0.0, 0.0, 1.0),
    "total": (1.0, 1.0, 1.0, 1.0),
}


def run_gradient_checks(seed: int = 0, step: float = 1e-4,
                        terms: Sequence[str] | None = None) -> dict[str, dict[str, float]]:
    """Finite-difference checks of every parameter group under each loss term."""
    config = toy_gradcheck_config(seed)
    frame = make_gradcheck_frame(config)
    matcher = Matcher(config.dims, seed=config.seed)
    out: dict[str, dict[str, float]] = {}
    for term in (terms or LOSS_TERM_WEIGHTS):
        tcfg = dataclasses.replace(config.training, weights=LOSS_TERM_WEIGHTS[term])
        pinned = capture_pinned_constants(frame, matcher, tcfg)

        def loss_fn(tcfg=tcfg, pinned=pinned):
            return total_loss(frame, matcher, tcfg, rp_seed=seed, pinned=pinned)[0]

        out[term] = gradient_check(loss_fn, matcher, step=step)
    return out


@dataclass
class TrainingOutcome:
    history: list[dict]
    matcher: Matcher
    mae_untrained: float
    mae_trained: float

    @property
    def loss_reduction(self) -> float:
        first, last = self.history[0]["total"], self.history[-1]["total"]
        return (first - last) / abs(first)


def training_experiment_config(seed: int = 0) -> ExperimentConfig:
    """Small-but-real setup for the training sanity experiment."""
    dims = MatcherDims(channels=16, heads=2, points=2, layers=2, ffn_hidden=32,
                       score_hidden=16, pyramid_channels=(16, 8, 4))
    solver = SolverConfig(range_x=1.5, range_y=1.5, range_yaw=math.radians(1.5),
                          n_steps=(5, 5, 5), samples_per_segment=3)
    training = TrainingConfig(
        learning_rate=0.01, iterations=200, seed=seed, solver=solver,
        pose_dist=RandomPoseDistribution(n_samples=32,
                                         yaw_range=math.radians(1.5)))
    scene = SceneSpec(seed=seed, road_length=400.0, lanes=2,
                      poles_per_km=50, signs_per_km=25, surfels_per_km=80,
                      crossings_per_km=8, markings_per_km=30)
    return ExperimentConfig(scene=scene, dims=dims, solver=solver,
                            grid=GridSpec.centered(24, 24, 0.5),
                            seed=seed, perturb=(1.0, 1.0, math.radians(1.0)),
                            use_decoder=True, training=training)


def _decoder_mae(matcher: Matcher, frames: Sequence[Frame],
                 config: ExperimentConfig) -> float:
    errs = []
    for frame in frames:
        emb = matcher.decode(frame.elements, frame.init_pose, frame.pyramid.layers[0])
        res = solve_multilevel(frame.pyramid, frame.elements, emb, frame.init_pose,
                               config.solver, matcher)
        err = relative_offset(frame.gt_pose, res.final_pose)
        errs.append(math.hypot(err.dx, err.dy))
    return float(np.mean(errs))


def run_training_experiment(config: ExperimentConfig | None = None,
                            n_train: int = 8, n_holdout: int = 50) -> TrainingOutcome:
    """Train on a few fixed frames, then compare held-out solver MAE against the
    untrained matcher."""
    config = config or training_experiment_config()
    assert config.training is not None
    vmap, trajectory = generate_scene(config.scene)
    init_matcher = Matcher(config.dims, seed=config.seed)
    # signatures frozen at the untrained table: the "dataset" stays fixed
    signatures = OracleSignatures.from_matcher(init_matcher, config.target_dot)
    train_frames = [f for _, f in experiment_frames(config, vmap, trajectory,
                                                    signatures, n_frames=n_train,
                                                    salt=1)]
    holdout = [f for _, f in experiment_frames(config, vmap, trajectory,
                                               signatures, n_frames=n_holdout,
                                               salt=2)]
    untrained = Matcher(config.dims, seed=config.seed)
    mae_before = _decoder_mae(untrained, holdout, config)
    matcher = Matcher(config.dims, seed=config.seed)
    history = train_loop(train_frames, matcher, config.training)
    mae_after = _decoder_mae(matcher, holdout, config)
    return TrainingOutcome(history, matcher, mae_before, mae_after)


# ---- configuration files ----------------------------------------------------

def _dataclass_from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    if "scene" in data:
        scene = dict(data["scene"])
        if "dropout" in scene:
            scene["dropout"] = {SemanticType.from_tag(k): float(v)
                                for k, v in scene["dropout"].items()}
        data["scene"] = _dataclass_from_dict(SceneSpec, scene)
    if "dims" in data:
        dims = dict(data["dims"])
        if "pyramid_channels" in dims:
            dims["pyramid_channels"] = tuple(dims["pyramid_channels"])
        data["dims"] = MatcherDims(**dims)
    if "solver" in data:
        solver = dict(data["solver"])
        if "n_steps" in solver:
            solver["n_steps"] = tuple(solver["n_steps"])
        if "range_yaw_deg" in solver:
            solver["range_yaw"] = math.radians(solver.pop("range_yaw_deg"))
        data["solver"] = _dataclass_from_dict(SolverConfig, solver)
    if "grid" in data:
        g = data["grid"]
        data["grid"] = (GridSpec.centered(g["H"], g["W"], g["resolution"])
                        if "h_min" not in g else GridSpec(**g))
    if "perturb" in data:
        data["perturb"] = tuple(data["perturb"])
    if "training" in data and data["training"] is not None:
        t = dict(data["training"])
        if "solver" in t:
            s = dict(t["solver"])
            if "n_steps" in s:
                s["n_steps"] = tuple(s["n_steps"])
            t["solver"] = _dataclass_from_dict(SolverConfig, s)
        if "weights" in t:
            t["weights"] = tuple(t["weights"])
        if "pose_dist" in t:
            t["pose_dist"] = _dataclass_from_dict(RandomPoseDistribution,
                                                  dict(t["pose_dist"]))
        data["training"] = _dataclass_from_dict(TrainingConfig, t)
    return _dataclass_from_dict(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_dict(yaml.safe_load(f) or {})
