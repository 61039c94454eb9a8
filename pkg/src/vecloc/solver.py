"""Histogram pose solver: exhaustive scoring of planar offset candidates,
softmax posterior, expectation and covariance, and the three-level refinement
loop with halved search ranges.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .bev import DTYPE, BevGrid, BevPyramid, bilinear_sample_channel, bilinear_sample_points
from .geometry import (GridSpec, Pose6, PoseOffset3, bev_plane_heights, compose,
                       element_world_points, offsets_as_array, relative_offset,
                       sample_candidate_offsets)
from .matcher import Matcher, as_embedding_tensor

MAX_YAW_RANGE = math.radians(30.0)  # linear yaw averaging is only valid for small ranges

_CHUNK_ELEMS = 4_000_000  # cap on candidate x point x channel intermediates


@dataclass(frozen=True)
class SolverConfig:
    """Level-0 search ranges and per-axis sample counts; level l shrinks the
    ranges by 2^l while keeping the counts, so steps halve with the range."""

    range_x: float = 3.0
    range_y: float = 3.0
    range_yaw: float = math.radians(3.0)
    n_steps: tuple[int, int, int] = (13, 13, 13)
    levels: int = 3
    samples_per_segment: int | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("at least one level required")
        if min(self.range_x, self.range_y, self.range_yaw) <= 0:
            raise ValueError("search ranges must be positive")
        if self.range_yaw >= MAX_YAW_RANGE:
            raise ValueError("yaw range too wide for linear yaw averaging")
        for n in self.n_steps:
            if n < 3 or n % 2 == 0:
                raise ValueError("per-axis sample counts must be odd and >= 3")

    def level_ranges(self, level: int) -> tuple[float, float, float]:
        f = 2.0 ** level
        return (self.range_x / f, self.range_y / f, self.range_yaw / f)

    def level_steps(self, level: int) -> tuple[float, float, float]:
        r = self.level_ranges(level)
        return tuple(2.0 * ri / (n - 1) for ri, n in zip(r, self.n_steps))


@functools.lru_cache(maxsize=64)
def _cached_candidates(ranges: tuple[float, float, float],
                       steps: tuple[float, float, float]):
    cands = sample_candidate_offsets(ranges, steps)
    return cands, offsets_as_array(cands)


@dataclass(frozen=True)
class Posterior:
    """Normalized candidate probabilities, paired with the candidate offsets."""

    offsets: np.ndarray | None
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if self.offsets is not None:
            object.__setattr__(self, "offsets", offsets_as_array(self.offsets))
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("posterior probabilities must be nonnegative and sum to 1")


@dataclass(frozen=True)
class SolverResult:
    delta: PoseOffset3
    final_pose: Pose6
    sigmas: tuple[np.ndarray, ...]
    level_deltas: tuple[PoseOffset3, ...]
    poses_after: tuple[Pose6, ...]
    posteriors: tuple[Posterior, ...] | None = None


def _element_point_sets(elements, samples_per_segment):
    pts, owner = [], []
    for i, el in enumerate(elements):
        p = element_world_points(el, samples_per_segment)
        pts.append(p)
        owner.append(np.full(len(p), i, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(owner)


def _candidate_grid_points(base_pose: Pose6, cand: np.ndarray, pts_world: np.ndarray,
                           spec: GridSpec) -> np.ndarray:
    """Grid coordinates of each world point under every candidate pose.

    The BEV plane height is evaluated once at the base pose; candidates only
    shift and rotate within that plane, so the tilt is shared.
    """
    z = bev_plane_heights(base_pose, pts_world)
    p3 = np.column_stack([pts_world, z])
    yaw = base_pose.yaw
    cy, sy = math.cos(yaw), math.sin(yaw)
    dx, dy, dpsi = cand[:, 0], cand[:, 1], cand[:, 2]
    t = np.empty((len(cand), 3))
    t[:, 0] = base_pose.t[0] + cy * dx - sy * dy
    t[:, 1] = base_pose.t[1] + sy * dx + cy * dy
    t[:, 2] = base_pose.t[2]
    c, s = np.cos(dpsi), np.sin(dpsi)
    rz = np.zeros((len(cand), 3, 3))
    rz[:, 0, 0] = c
    rz[:, 0, 1] = -s
    rz[:, 1, 0] = s
    rz[:, 1, 1] = c
    rz[:, 2, 2] = 1.0
    rot = np.einsum("cij,jk->cik", rz, base_pose.R)  # candidate world-from-sensor
    diff = p3[None, :, :] - t[:, None, :]
    local = np.einsum("cni,cik->cnk", diff, rot)  # row form of R_c^T (p - t_c)
    out = np.empty((len(cand), len(pts_world), 2))
    out[..., 0] = (local[..., 0] - spec.h_min) / spec.resolution
    out[..., 1] = (local[..., 1] - spec.w_min) / spec.resolution
    return out


def score_candidates(grid: BevGrid, elements, embeddings, candidates,
                     base_pose: Pose6, score_head,
                     samples_per_segment: int | None = None,
                     point_sets: tuple[np.ndarray, np.ndarray] | None = None) -> torch.Tensor:
    """Similarity score per candidate offset.

    Each element's projected point samples are averaged, multiplied elementwise
    with its embedding, passed through the shared score head, and the per-element
    scores are averaged. Affine score heads take an algebraically identical fast
    path that samples precomputed per-element dot-product grids. point_sets can
    carry precomputed (world points, owner indices) for repeated calls.
    """
    elements = list(elements)
    if not elements:
        raise ValueError("score is undefined for an empty element set")
    emb = as_embedding_tensor(embeddings)
    if emb.shape[0] != len(elements):
        raise ValueError("one embedding per element required")
    cand = offsets_as_array(candidates)
    if len(cand) == 0:
        raise ValueError("at least one candidate required")
    pts_world, owner = (point_sets if point_sets is not None
                        else _element_point_sets(elements, samples_per_segment))
    grid_pts = _candidate_grid_points(base_pose, cand, pts_world, grid.spec)
    pts_t = torch.as_tensor(grid_pts, dtype=DTYPE)
    owner_t = torch.as_tensor(owner)
    counts = torch.bincount(owner_t, minlength=len(elements)).to(DTYPE)

    linear = getattr(score_head, "linear_form", lambda: None)()
    if linear is not None:
        w, b = linear
        coeff = emb * w[None, :]  # fold h's weights into per-element channel weights
        grid_k = torch.einsum("hwc,kc->hwk", grid.data, coeff)
        vals = bilinear_sample_channel(grid_k, pts_t, owner_t)
        per_el = torch.zeros(len(cand), len(elements), dtype=DTYPE)
        per_el = per_el.index_add(1, owner_t, vals) / counts[None, :]
        return per_el.mean(dim=-1) + b

    scores = []
    chunk = max(1, _CHUNK_ELEMS // max(1, len(pts_world) * grid.C))
    for lo in range(0, len(cand), chunk):
        sub = pts_t[lo:lo + chunk]
        samples = bilinear_sample_points(grid.data, sub)  # (n, P, C)
        sums = torch.zeros(sub.shape[0], len(elements), grid.C, dtype=DTYPE)
        sums = sums.index_add(1, owner_t, samples)
        mean = sums / counts[None, :, None]
        scores.append(score_head(mean * emb[None, :, :]).mean(dim=-1))
    return torch.cat(scores)


def softmax_probs(scores: torch.Tensor) -> torch.Tensor:
    """Stable softmax over a 1-D score vector."""
    shifted = scores - scores.max()
    e = torch.exp(shifted)
    return e / e.sum()


def posterior(scores, offsets=None) -> Posterior:
    """Softmax-normalized candidate probabilities."""
    t = scores if isinstance(scores, torch.Tensor) else torch.as_tensor(
        np.asarray(scores, dtype=np.float64))
    if not bool(torch.isfinite(t).all()):
        raise ValueError("scores must be finite")
    probs = softmax_probs(t.detach()).numpy()
    return Posterior(offsets if offsets is None else offsets_as_array(offsets), probs)


def expected_offset(post: Posterior) -> PoseOffset3:
    """Probability-weighted mean offset (yaw averaged on the real line)."""
    if post.offsets is None:
        raise ValueError("posterior carries no candidate offsets")
    mean = post.probs @ post.offsets
    return PoseOffset3(float(mean[0]), float(mean[1]), float(mean[2]))


def offset_covariance(post: Posterior, delta: PoseOffset3) -> np.ndarray:
    """Probability-weighted outer-product covariance around `delta`."""
    if post.offsets is None:
        raise ValueError("posterior carries no candidate offsets")
    d = post.offsets - np.asarray(delta, dtype=np.float64)[None, :]
    cov = (post.probs[:, None] * d).T @ d
    return 0.5 * (cov + cov.T)


@dataclass
class LevelRecord:
    """One refinement level of the solver, with autograd-carrying tensors."""

    level: int
    base_pose: Pose6
    candidates: np.ndarray
    scores: torch.Tensor
    probs: torch.Tensor
    delta_t: torch.Tensor
    sigma_t: torch.Tensor
    pose_after: Pose6
    gt_score: torch.Tensor | None = None

    @property
    def delta(self) -> PoseOffset3:
        return PoseOffset3(*(float(v) for v in self.delta_t.detach()))


def _pyramid_layers(pyramid) -> tuple[BevGrid, ...]:
    if isinstance(pyramid, BevPyramid):
        return pyramid.layers
    return tuple(pyramid)


def run_solver_levels(pyramid, elements, embeddings, init_pose: Pose6,
                      config: SolverConfig, matcher: Matcher,
                      gt_pose: Pose6 | None = None,
                      pinned_bases: Sequence[Pose6] | None = None) -> list[LevelRecord]:
    """Engine shared by inference and training.

    Each level recenters on the (detached) running estimate; `pinned_bases`
    overrides the recentering so gradient checks can hold the stop-gradient
    constants fixed.
    """
    layers = _pyramid_layers(pyramid)
    if len(layers) < config.levels:
        raise ValueError(f"need {config.levels} pyramid layers, got {len(layers)}")
    emb = as_embedding_tensor(embeddings)
    elements = list(elements)
    point_sets = _element_point_sets(elements, config.samples_per_segment)
    records: list[LevelRecord] = []
    t_est = init_pose
    for level in range(config.levels):
        base = pinned_bases[level] if pinned_bases is not None else t_est
        feats = matcher.unify_features(layers[level])
        emb_l = matcher.unify_embeddings(level, emb)
        _, cand = _cached_candidates(config.level_ranges(level), config.level_steps(level))
        gt_score = None
        if gt_pose is not None:
            # the gt offset rides along in the same scoring batch
            gt_rel = relative_offset(base, gt_pose)
            ext = score_candidates(feats, elements, emb_l,
                                   np.vstack([cand, np.array(list(gt_rel))]),
                                   base, matcher.score_head,
                                   config.samples_per_segment, point_sets)
            scores, gt_score = ext[:-1], ext[-1]
        else:
            scores = score_candidates(feats, elements, emb_l, cand, base,
                                      matcher.score_head,
                                      config.samples_per_segment, point_sets)
        probs = softmax_probs(scores)
        cand_t = torch.as_tensor(cand, dtype=DTYPE)
        delta_t = probs @ cand_t
        centered = cand_t - delta_t[None, :]
        sigma_t = torch.einsum("n,ni,nj->ij", probs, centered, centered)
        step = PoseOffset3(*(float(v) for v in delta_t.detach()))
        pose_after = compose(base, step)
        records.append(LevelRecord(level, base, cand, scores, probs, delta_t,
                                   sigma_t, pose_after, gt_score))
        t_est = pose_after
    return records


def solve_multilevel(pyramid, elements, embeddings, init_pose: Pose6,
                     config: SolverConfig, matcher: Matcher,
                     keep_posteriors: bool = False) -> SolverResult:
    """Full coarse-to-fine estimate: total offset, final pose, per-level covariances."""
    with torch.no_grad():
        records = run_solver_levels(pyramid, elements, embeddings, init_pose,
                                    config, matcher)
    total = np.sum([list(r.delta) for r in records], axis=0)
    posteriors = None
    if keep_posteriors:
        posteriors = tuple(
            Posterior(r.candidates, r.probs.numpy()) for r in records)
    return SolverResult(
        delta=PoseOffset3(float(total[0]), float(total[1]), float(total[2])),
        final_pose=records[-1].pose_after,
        sigmas=tuple(r.sigma_t.numpy() for r in records),
        level_deltas=tuple(r.delta for r in records),
        poses_after=tuple(r.pose_after for r in records),
        posteriors=posteriors,
    )
