"""Losses, the random-pose sampling distribution, reverse-mode gradients through
the matcher/solver forward path, finite-difference gradient checking, and a
small deterministic gradient-descent loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import stats

from .bev import DTYPE
from .geometry import Pose6, PoseOffset3
from .matcher import Matcher
from .solver import SolverConfig, run_solver_levels, score_candidates


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class RandomPoseDistribution:
    """Sampling distribution q over pose offsets: a 2-DoF multivariate
    t-distribution on (x, y) and a von Mises / uniform mixture on yaw.

    q is strictly positive everywhere on the search region, so importance
    weights stay finite.
    """

    nu: float = 3.0
    xy_scale: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    kappa: float = 10.0
    uniform_weight: float = 0.2
    yaw_range: float = math.radians(3.0)
    n_samples: int = 64

    def __post_init__(self):
        if not 0.0 <= self.uniform_weight <= 1.0:
            raise ValueError("mixture weight must be in [0, 1]")
        if self.yaw_range <= 0 or self.n_samples < 1:
            raise ValueError("invalid yaw range or sample count")

    def _xy_dist(self):
        return stats.multivariate_t(loc=[0.0, 0.0], shape=np.asarray(self.xy_scale),
                                    df=self.nu)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        n = self.n_samples
        xy = np.atleast_2d(self._xy_dist().rvs(size=n, random_state=rng))
        use_uniform = rng.random(n) < self.uniform_weight
        yaw_u = rng.uniform(-self.yaw_range, self.yaw_range, size=n)
        yaw_v = stats.vonmises(self.kappa).rvs(size=n, random_state=rng)
        yaw = np.where(use_uniform, yaw_u, yaw_v)
        return np.column_stack([xy, yaw])

    def log_density(self, offsets: np.ndarray) -> np.ndarray:
        offsets = np.atleast_2d(offsets)
        log_xy = self._xy_dist().logpdf(offsets[:, :2])
        yaw = offsets[:, 2]
        p_vm = stats.vonmises(self.kappa).pdf(yaw)
        p_uni = np.where(np.abs(yaw) <= self.yaw_range, 1.0 / (2 * self.yaw_range), 0.0)
        p_yaw = self.uniform_weight * p_uni + (1 - self.uniform_weight) * p_vm
        if np.any(p_yaw < 1e-300):
            raise ValueError("sampled pose has vanishing density under q")
        return np.atleast_1d(log_xy) + np.log(p_yaw)


def rmse_loss(delta, delta_gt, sigma, eig_floor: float = 1e-6) -> torch.Tensor:
    """Covariance-whitened offset error norm.

    sigma is eigendecomposed with eigenvalues floored before inversion and the
    inverse spectrum normalized to unit trace; sigma itself is treated as a
    constant (no gradient through the decomposition).
    """
    sig = sigma.detach().numpy() if isinstance(sigma, torch.Tensor) else np.asarray(sigma)
    sig = np.asarray(sig, dtype=np.float64).reshape(3, 3)
    if np.max(np.abs(sig - sig.T)) > 1e-8:
        raise ValueError("covariance must be symmetric")
    w, u = np.linalg.eigh(sig)
    if w.min() < -1e-8:
        raise ValueError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    inv = 1.0 / np.clip(w, eig_floor, None)
    lam = inv / inv.sum()
    d = delta if isinstance(delta, torch.Tensor) else torch.as_tensor(
        np.asarray(delta, dtype=np.float64))
    g = torch.as_tensor(np.asarray(delta_gt, dtype=np.float64))
    proj = torch.as_tensor(u.T) @ (d - g)
    return torch.sqrt((torch.as_tensor(lam) * proj ** 2).sum())


def pose_solver_kl_loss(scores: torch.Tensor, gt_score: torch.Tensor) -> torch.Tensor:
    """Negative log of the ground-truth likelihood against the candidate-grid mass."""
    if not isinstance(scores, torch.Tensor):
        scores = torch.as_tensor(np.asarray(scores, dtype=np.float64))
    if not isinstance(gt_score, torch.Tensor):
        gt_score = torch.as_tensor(float(gt_score), dtype=DTYPE)
    return torch.logsumexp(scores, dim=0) - gt_score


def random_pose_kl_loss(score_fn: Callable[[np.ndarray], torch.Tensor],
                        gt_offset: PoseOffset3,
                        dist: RandomPoseDistribution,
                        rng: np.random.Generator | int) -> torch.Tensor:
    """Importance-weighted variant: the normalizer is estimated from poses drawn
    from q, each weighted by 1/q."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    offsets = dist.sample(rng)
    log_q = torch.as_tensor(dist.log_density(offsets))
    both = score_fn(np.vstack([offsets, np.array(list(gt_offset))]))
    s, s_gt = both[:-1], both[-1]
    log_norm = torch.logsumexp(s - log_q, dim=0) - math.log(dist.n_samples)
    return log_norm - s_gt


def focal_seg_loss(pred_grids, gt_grids, gamma: float = 2.0,
                   alpha: float | None = 0.25) -> torch.Tensor:
    """Binary focal loss, averaged over cells and summed over semantic types.

    alpha weights positives (negatives get 1 - alpha); alpha=None disables the
    weighting, so gamma=0, alpha=None is exactly binary cross-entropy.
    """
    pred = pred_grids if isinstance(pred_grids, torch.Tensor) else torch.stack(list(pred_grids))
    gt = gt_grids if isinstance(gt_grids, torch.Tensor) else torch.stack(list(gt_grids))
    gt = gt.to(DTYPE)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(gt.shape)}")
    p = pred.clamp(1e-12, 1.0 - 1e-12)
    w_pos = 1.0 if alpha is None else alpha
    w_neg = 1.0 if alpha is None else 1.0 - alpha
    pos = -w_pos * (1 - p) ** gamma * torch.log(p)
    neg = -w_neg * p ** gamma * torch.log(1 - p)
    per_type = (gt * pos + (1 - gt) * neg).mean(dim=tuple(range(1, pred.ndim)))
    return per_type.sum()


def focal_seg_loss_from_logits(logits: torch.Tensor, gt_grids, gamma: float = 2.0,
                               alpha: float | None = 0.25) -> torch.Tensor:
    """focal_seg_loss evaluated from pre-sigmoid logits.

    Algebraically identical, but saturated cells keep accurate log-probabilities
    (1 - sigmoid(z) cancels catastrophically for large z), which matters for
    gradient checks.
    """
    gt = (gt_grids if isinstance(gt_grids, torch.Tensor)
          else torch.stack(list(gt_grids))).to(DTYPE)
    if logits.shape != gt.shape:
        raise ValueError(f"logit shape {tuple(logits.shape)} != target shape {tuple(gt.shape)}")
    log_p = torch.nn.functional.logsigmoid(logits)
    log_1mp = torch.nn.functional.logsigmoid(-logits)
    p = torch.sigmoid(logits)
    one_minus_p = torch.sigmoid(-logits)
    w_pos = 1.0 if alpha is None else alpha
    w_neg = 1.0 if alpha is None else 1.0 - alpha
    pos = -w_pos * one_minus_p ** gamma * log_p
    neg = -w_neg * p ** gamma * log_1mp
    per_type = (gt * pos + (1 - gt) * neg).mean(dim=tuple(range(1, logits.ndim)))
    return per_type.sum()


@dataclass(frozen=True)
class TrainingConfig:
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)  # rmse, ps, rp, ss
    learning_rate: float = 0.01
    iterations: int = 200
    seed: int = 0
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(
        range_x=1.5, range_y=1.5, range_yaw=math.radians(1.5), n_steps=(5, 5, 5)))
    pose_dist: RandomPoseDistribution = field(default_factory=RandomPoseDistribution)
    focal_gamma: float = 2.0
    focal_alpha: float | None = 0.25
    max_grad_norm: float | None = 1.0  # the importance-sampled KL is unbounded below
    divergence_limit: float = 1e6

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ValueError("loss weights must be nonnegative")


@dataclass
class PinnedConstants:
    """Values treated as constants by the backward pass (per-level recentering
    poses and the whitening covariance), captured so finite differences evaluate
    the same function the analytic gradient differentiates."""

    bases: tuple[Pose6, ...]
    sigma: np.ndarray


def capture_pinned_constants(frame, matcher: Matcher,
                             config: TrainingConfig) -> PinnedConstants:
    with torch.no_grad():
        emb = matcher.decode(frame.elements, frame.init_pose, frame.pyramid.layers[0])
        recs = run_solver_levels(frame.pyramid, frame.elements, emb, frame.init_pose,
                                 config.solver, matcher, gt_pose=frame.gt_pose)
    return PinnedConstants(bases=tuple(r.base_pose for r in recs),
                           sigma=recs[-1].sigma_t.numpy())


def total_loss(frame, matcher: Matcher, config: TrainingConfig,
               rp_seed: int = 0,
               pinned: PinnedConstants | None = None) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the four losses over one full forward pass.

    Zero-weighted terms are skipped entirely (they contribute nothing to the
    value or the gradient). Returns the scalar loss tensor and a per-term
    breakdown of floats.
    """
    w = config.weights
    zero = torch.zeros((), dtype=DTYPE)
    l_rmse = l_ps = l_rp = l_ss = zero

    emb = None
    if w[0] > 0 or w[1] > 0 or w[2] > 0:
        emb = matcher.decode(frame.elements, frame.init_pose, frame.pyramid.layers[0])

    if w[0] > 0 or w[1] > 0:
        recs = run_solver_levels(
            frame.pyramid, frame.elements, emb, frame.init_pose, config.solver,
            matcher, gt_pose=frame.gt_pose,
            pinned_bases=pinned.bases if pinned is not None else None)
        if w[0] > 0:
            delta_total = torch.stack([r.delta_t for r in recs]).sum(dim=0)
            sigma = (pinned.sigma if pinned is not None
                     else recs[-1].sigma_t.detach().numpy())
            l_rmse = rmse_loss(delta_total, np.asarray(frame.true_delta), sigma)
        if w[1] > 0:
            # the gt score joins its own normalizer, keeping the term bounded below
            l_ps = torch.stack([
                pose_solver_kl_loss(torch.cat([r.scores, r.gt_score.reshape(1)]),
                                    r.gt_score)
                for r in recs]).sum()

    if w[2] > 0:
        feats0 = matcher.unify_features(frame.pyramid.layers[0])
        emb0 = matcher.unify_embeddings(0, emb)

        def level0_score(offsets: np.ndarray) -> torch.Tensor:
            return score_candidates(feats0, frame.elements, emb0, offsets,
                                    frame.init_pose, matcher.score_head,
                                    config.solver.samples_per_segment)

        l_rp = random_pose_kl_loss(level0_score, frame.true_delta, config.pose_dist,
                                   np.random.default_rng(rp_seed))

    if w[3] > 0:
        l_ss = zero
        for layer, grid in enumerate(frame.pyramid.layers):
            logits = matcher.semantic_logits(grid)
            l_ss = l_ss + focal_seg_loss_from_logits(
                logits, frame.gt_rasters(layer), config.focal_gamma, config.focal_alpha)

    total = w[0] * l_rmse + w[1] * l_ps + w[2] * l_rp + w[3] * l_ss
    breakdown = {"rmse": float(l_rmse.detach()), "pose_solver_kl": float(l_ps.detach()),
                 "random_pose_kl": float(l_rp.detach()), "semantic_seg": float(l_ss.detach()),
                 "total": float(total.detach())}
    return total, breakdown


def backward(loss: torch.Tensor, matcher: Matcher) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a recorded loss for every parameter."""
    matcher.zero_grad(set_to_none=True)
    loss.backward()
    return {name: (p.grad.detach().numpy().copy() if p.grad is not None
                   else np.zeros(tuple(p.shape)))
            for name, p in matcher.named_parameters()}


def train_step(frames: Sequence, matcher: Matcher, config: TrainingConfig,
               iteration: int) -> dict:
    """One accumulated gradient-descent step over all frames; returns the log row."""
    matcher.zero_grad(set_to_none=True)
    sums: dict[str, float] = {}
    for fi, frame in enumerate(frames):
        # fixed per-frame sample set: zero learning rate implies constant loss
        seed = int(np.random.SeedSequence((config.seed, fi)).generate_state(1)[0])
        loss, terms = total_loss(frame, matcher, config, rp_seed=seed)
        (loss / len(frames)).backward()
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + v / len(frames)
    if not math.isfinite(sums["total"]) or sums["total"] > config.divergence_limit:
        raise TrainingDiverged(
            f"iteration {iteration}: total loss {sums['total']:.4g} "
            f"(terms {sums}) exceeded {config.divergence_limit:.3g}")
    grad_sq = 0.0
    with torch.no_grad():
        for p in matcher.parameters():
            if p.grad is not None:
                grad_sq += float((p.grad ** 2).sum())
        norm = math.sqrt(grad_sq)
        scale = config.learning_rate
        if config.max_grad_norm is not None and norm > config.max_grad_norm:
            scale *= config.max_grad_norm / norm
        for p in matcher.parameters():
            if p.grad is not None:
                p -= scale * p.grad
    row = {"iteration": iteration, "grad_norm": norm}
    row.update(sums)
    return row


def train_loop(frames: Sequence, matcher: Matcher,
               config: TrainingConfig) -> list[dict]:
    """Plain gradient descent for the configured iteration count; deterministic
    given the config seed."""
    return [train_step(frames, matcher, config, it)
            for it in range(config.iterations)]


def gradient_check(loss_fn: Callable[[], torch.Tensor], matcher: Matcher,
                   step: float = 1e-4) -> dict[str, float]:
    """Central finite differences against the analytic gradient, per parameter.

    loss_fn must be deterministic and respect its own stop-gradient constants
    (see PinnedConstants). Returns the max relative error per parameter group.
    """
    analytic = backward(loss_fn(), matcher)
    report: dict[str, float] = {}
    with torch.no_grad():
        for name, p in matcher.named_parameters():
            flat = p.data.reshape(-1)
            a = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                f_plus = float(loss_fn())
                flat[i] = orig - step
                f_minus = float(loss_fn())
                flat[i] = orig
                fd = (f_plus - f_minus) / (2 * step)
                rel = abs(a[i] - fd) / max(abs(a[i]), abs(fd), 1e-6)
                worst = max(worst, rel)
            report[name] = worst
    return report
