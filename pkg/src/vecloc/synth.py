"""Synthetic scenes and the oracle BEV renderer.

The renderer stands in for real sensor encoders: each cell occupied by a map
element receives a frozen per-type channel signature derived from the semantic
embedding table, scaled so the feature/embedding dot product hits a configured
target. That makes the segmentation head and the pose-solver score structurally
satisfiable, so solver behavior is testable without any training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from .bev import DTYPE, BevGrid, BevPyramid, rasterize_semantic_gt
from .geometry import (GridSpec, Pose6, PoseOffset3, compose, relative_offset,
                       rotation_ypr, rotation_z)
from .map_core import MapElement, SemanticType, VectorMap, query_window
from .matcher import Matcher

SENSOR_HEIGHT = 1.8


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    road_length: float = 600.0
    lanes: int = 3
    lane_width: float = 3.5
    curve_radius: float = 250.0
    segment_length: float = 10.0
    poles_per_km: float = 80.0
    signs_per_km: float = 40.0
    surfels_per_km: float = 200.0
    crossings_per_km: float = 10.0
    markings_per_km: float = 60.0
    noise_std: float = 0.0
    dropout: Mapping[SemanticType, float] = field(default_factory=dict)

    def __post_init__(self):
        dens = (self.poles_per_km, self.signs_per_km, self.surfels_per_km,
                self.crossings_per_km, self.markings_per_km)
        if any(d < 0 for d in dens):
            raise ValueError("densities must be nonnegative")
        if any(not 0.0 <= p <= 1.0 for p in self.dropout.values()):
            raise ValueError("dropout probabilities must be in [0, 1]")
        if self.lanes < 1 or self.lane_width <= 0 or self.road_length <= 0:
            raise ValueError("invalid road geometry")


class _Centerline:
    """Straight / constant-curvature / straight centerline, integrated at 0.5 m."""

    def __init__(self, length: float, curve_radius: float):
        ds = 0.5
        n = int(math.ceil(length / ds)) + 1
        s = np.arange(n) * ds
        kappa = np.where((s >= length / 3) & (s < 2 * length / 3),
                         1.0 / curve_radius, 0.0)
        heading = np.concatenate([[0.0], np.cumsum(kappa[:-1] * ds)])
        x = np.concatenate([[0.0], np.cumsum(np.cos(heading[:-1]) * ds)])
        y = np.concatenate([[0.0], np.cumsum(np.sin(heading[:-1]) * ds)])
        self.s, self.x, self.y, self.heading = s, x, y, heading
        self.length = float(s[-1])

    def at(self, s):
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        x = np.interp(s, self.s, self.x)
        y = np.interp(s, self.s, self.y)
        h = np.interp(s, self.s, self.heading)
        return x, y, h

    def offset_point(self, s: float, lateral: float) -> np.ndarray:
        x, y, h = self.at(s)
        return np.array([x - lateral * math.sin(h), y + lateral * math.cos(h)])


def generate_scene(spec: SceneSpec) -> tuple[VectorMap, list[Pose6]]:
    """Road map plus a ground-truth trajectory along the centerline."""
    rng = np.random.default_rng(spec.seed)
    line = _Centerline(spec.road_length, spec.curve_radius)
    km = spec.road_length / 1000.0
    half_road = 0.5 * spec.lanes * spec.lane_width
    elements: list[MapElement] = []
    next_id = 0

    def add(factory, *args):
        nonlocal next_id
        elements.append(factory(next_id, *args))
        next_id += 1

    def polyline(sem: SemanticType, lateral: float):
        stations = np.arange(0.0, line.length + 1e-9, spec.segment_length)
        pts = [line.offset_point(s, lateral) for s in stations]
        for a, b in zip(pts, pts[1:]):
            add(MapElement.segment, sem, a[0], a[1], b[0], b[1])

    for k in range(spec.lanes + 1):
        polyline(SemanticType.LANE_LINE, (k - spec.lanes / 2.0) * spec.lane_width)
    for side in (-1.0, 1.0):
        polyline(SemanticType.ROAD_BOUNDARY, side * (half_road + 0.6))

    n_cross = int(round(spec.crossings_per_km * km))
    for i in range(n_cross):
        s = (i + 0.5) * line.length / n_cross
        near = [line.offset_point(s, lat) for lat in (-half_road, half_road)]
        far = [line.offset_point(s + 3.0, lat) for lat in (-half_road, half_road)]
        corners = [near[0], near[1], far[1], far[0]]
        for a, b in zip(corners, corners[1:] + corners[:1]):
            add(MapElement.segment, SemanticType.PEDESTRIAN_CROSSING,
                a[0], a[1], b[0], b[1])
        stop = [line.offset_point(s - 1.5, lat) for lat in (-half_road, half_road)]
        add(MapElement.segment, SemanticType.STOP_LINE,
            stop[0][0], stop[0][1], stop[1][0], stop[1][1])

    for _ in range(int(round(spec.markings_per_km * km))):
        s = rng.uniform(0.0, line.length - 3.0)
        lane = rng.integers(spec.lanes)
        lat = (lane - (spec.lanes - 1) / 2.0) * spec.lane_width
        a = line.offset_point(s, lat)
        b = line.offset_point(s + 3.0, lat)
        add(MapElement.segment, SemanticType.ROAD_MARKING, a[0], a[1], b[0], b[1])

    for _ in range(int(round(spec.poles_per_km * km))):
        p = line.offset_point(rng.uniform(0, line.length),
                              rng.choice([-1, 1]) * (half_road + rng.uniform(1.0, 4.0)))
        add(MapElement.vertical, SemanticType.POLE, p[0], p[1], rng.uniform(4.0, 10.0))

    for _ in range(int(round(spec.signs_per_km * km))):
        p = line.offset_point(rng.uniform(0, line.length),
                              rng.choice([-1, 1]) * (half_road + rng.uniform(0.8, 3.0)))
        add(MapElement.vertical, SemanticType.TRAFFIC_SIGN, p[0], p[1], rng.uniform(2.0, 5.0))

    for _ in range(int(round(spec.surfels_per_km * km))):
        s = rng.uniform(0, line.length)
        side = rng.choice([-1, 1])
        p = line.offset_point(s, side * (half_road + rng.uniform(3.0, 9.0)))
        _, _, h = line.at(s)
        inward = np.array([math.sin(h), -math.cos(h), 0.0]) * side
        normal = inward + np.array([rng.uniform(-0.2, 0.2),
                                    rng.uniform(-0.2, 0.2),
                                    rng.uniform(-0.15, 0.15)])
        normal /= np.linalg.norm(normal)
        r1 = rng.uniform(0.01, 0.09)
        add(MapElement.surfel, (p[0], p[1]), tuple(normal), (r1, r1 * rng.uniform(0.2, 0.9)))

    vmap = VectorMap(tuple(elements), origin=np.zeros(2))
    stations = np.arange(0.0, line.length + 1e-9, 5.0)
    xs, ys, hs = line.at(stations)
    trajectory = [Pose6.from_ypr(x, y, SENSOR_HEIGHT, h)
                  for x, y, h in zip(xs, ys, hs)]
    return vmap, trajectory


@dataclass(frozen=True)
class OracleSignatures:
    """Frozen per-layer channel signatures, one row per semantic type, scaled so
    the dot product with the (projected) type embedding equals target_dot."""

    per_layer: tuple[np.ndarray, ...]
    target_dot: float

    @classmethod
    def from_matcher(cls, matcher: Matcher, target_dot: float = 30.0) -> "OracleSignatures":
        layers = []
        with torch.no_grad():
            for level in range(len(matcher.dims.pyramid_channels)):
                proj = matcher.projected_table(level).numpy()
                norms_sq = np.sum(proj ** 2, axis=1, keepdims=True)
                layers.append((target_dot / norms_sq) * proj)
        return cls(tuple(np.ascontiguousarray(l) for l in layers), target_dot)

    def layer_norms(self, layer: int) -> np.ndarray:
        return np.linalg.norm(self.per_layer[layer], axis=1)


def _layer_noise_std(noise_std, layer: int) -> float:
    if np.isscalar(noise_std):
        return float(noise_std)
    return float(noise_std[layer])


def render_oracle_bev(elements: Sequence[MapElement], gt_pose: Pose6,
                      signatures: OracleSignatures, specs: Sequence[GridSpec],
                      noise_std=0.0, rng: np.random.Generator | None = None,
                      samples_per_segment: int | None = None) -> BevPyramid:
    """Rasterize per-type occupancy at the true pose, stamp signatures into the
    occupied cells (overlaps sum), and add i.i.d. Gaussian noise per layer."""
    grids = []
    by_type: dict[SemanticType, list[MapElement]] = {}
    for el in elements:
        by_type.setdefault(el.sem, []).append(el)
    for layer, spec in enumerate(specs):
        sig = signatures.per_layer[layer]
        data = torch.zeros((spec.H, spec.W, sig.shape[1]), dtype=DTYPE)
        for sem, els in by_type.items():
            occ = rasterize_semantic_gt(els, gt_pose, spec, samples_per_segment)
            data += occ.unsqueeze(-1) * torch.as_tensor(sig[sem.row], dtype=DTYPE)
        std = _layer_noise_std(noise_std, layer)
        if std > 0:
            if rng is None:
                raise ValueError("noise requested without an rng")
            data += torch.as_tensor(
                rng.normal(0.0, std, size=tuple(data.shape)), dtype=DTYPE)
        grids.append(BevGrid(spec, data, layer=layer))
    return BevPyramid(tuple(grids))


def perturb_pose(gt_pose: Pose6, ranges: tuple[float, float, float],
                 rng: np.random.Generator) -> Pose6:
    """Compose a uniform random offset within +-ranges onto the true pose."""
    off = PoseOffset3(float(rng.uniform(-ranges[0], ranges[0])),
                      float(rng.uniform(-ranges[1], ranges[1])),
                      float(rng.uniform(-ranges[2], ranges[2])))
    return compose(gt_pose, off)


@dataclass
class Frame:
    """One localization problem: a perturbed initial pose, the elements near the
    true pose, and the oracle-rendered pyramid."""

    gt_pose: Pose6
    init_pose: Pose6
    elements: tuple[MapElement, ...]
    pyramid: BevPyramid
    true_delta: PoseOffset3
    signatures: OracleSignatures
    specs: tuple[GridSpec, ...]
    noise_std: float | tuple = 0.0
    noise_seed: int | None = None
    samples_per_segment: int | None = None
    offset_exceeds_search: bool = False
    _raster_cache: dict = field(default_factory=dict, repr=False)

    def gt_rasters(self, layer: int) -> torch.Tensor:
        """Per-type binary occupancy (N_e, H, W) at the true pose; cached."""
        if layer not in self._raster_cache:
            spec = self.specs[layer]
            grids = []
            for sem in SemanticType:
                els = [el for el in self.elements if el.sem == sem]
                grids.append(rasterize_semantic_gt(els, self.gt_pose, spec,
                                                   self.samples_per_segment))
            self._raster_cache[layer] = torch.stack(grids)
        return self._raster_cache[layer]

    def rerender(self) -> "Frame":
        rng = (np.random.default_rng(self.noise_seed)
               if self.noise_seed is not None else None)
        pyramid = render_oracle_bev(self.elements, self.gt_pose, self.signatures,
                                    self.specs, self.noise_std, rng,
                                    self.samples_per_segment)
        return replace(self, pyramid=pyramid, _raster_cache={})


def make_frame(vmap: VectorMap, base_pose: Pose6, signatures: OracleSignatures,
               specs: Sequence[GridSpec], rng: np.random.Generator, *,
               perturb_ranges: tuple[float, float, float],
               noise_std=0.0,
               dropout: Mapping[SemanticType, float] | None = None,
               roll_pitch_range: float = math.radians(2.0),
               window_margin: float = 4.0,
               solver_ranges: tuple[float, float, float] | None = None,
               samples_per_segment: int | None = None) -> Frame:
    """Assemble a frame around one trajectory pose: tilt the true pose, query the
    map window, optionally drop landmark types, render, and perturb the start."""
    pitch = rng.uniform(-roll_pitch_range, roll_pitch_range)
    roll = rng.uniform(-roll_pitch_range, roll_pitch_range)
    gt_pose = Pose6(base_pose.t, rotation_ypr(base_pose.yaw, pitch, roll))

    half = (0.5 * specs[0].extent[0] + window_margin,
            0.5 * specs[0].extent[1] + window_margin)
    elements = query_window(vmap, gt_pose.t[:2], half)
    if dropout:
        dropped_types = {sem for sem, p in dropout.items() if rng.random() < p}
        elements = [el for el in elements if el.sem not in dropped_types]

    noise_seed = int(rng.integers(2 ** 62))
    render_rng = np.random.default_rng(noise_seed)
    pyramid = render_oracle_bev(elements, gt_pose, signatures, specs, noise_std,
                                render_rng, samples_per_segment)
    init_pose = perturb_pose(gt_pose, perturb_ranges, rng)
    true_delta = relative_offset(init_pose, gt_pose)
    exceeds = False
    if solver_ranges is not None:
        exceeds = (abs(true_delta.dx) > solver_ranges[0]
                   or abs(true_delta.dy) > solver_ranges[1]
                   or abs(true_delta.dpsi) > solver_ranges[2])
    return Frame(gt_pose, init_pose, tuple(elements), pyramid, true_delta,
                 signatures, tuple(specs), noise_std, noise_seed,
                 samples_per_segment, offset_exceeds_search=exceeds)


def ablate_landmarks(frame: Frame, dropout: Mapping[SemanticType, float],
                     rng: np.random.Generator) -> Frame:
    """Remove whole landmark types with their configured per-frame probabilities
    and re-render the pyramid."""
    if any(not 0.0 <= p <= 1.0 for p in dropout.values()):
        raise ValueError("dropout probabilities must be in [0, 1]")
    dropped = {sem for sem, p in dropout.items() if rng.random() < p}
    kept = tuple(el for el in frame.elements if el.sem not in dropped)
    return replace(frame, elements=kept, _raster_cache={}).rerender()


def augment_lidar_rotation(frame: Frame, theta: float) -> Frame:
    """Rotate the sensor frame about its own z-axis; the BEV plane is unchanged
    but grid content rotates, so the pyramid is re-rendered."""
    rz = rotation_z(theta)
    gt = Pose6(frame.gt_pose.t, frame.gt_pose.R @ rz)
    init = Pose6(frame.init_pose.t, frame.init_pose.R @ rz)
    out = replace(frame, gt_pose=gt, init_pose=init,
                  true_delta=relative_offset(init, gt), _raster_cache={})
    return out.rerender()


def augment_world_rotation(vmap: VectorMap, poses: Sequence[Pose6],
                           phi: float) -> tuple[VectorMap, list[Pose6]]:
    """Rotate map coordinates and poses about the world z-axis."""
    rz = rotation_z(phi)
    r2 = rz[:2, :2]
    elements = []
    for el in vmap.elements:
        g = el.geom.copy()
        if el.sem.is_segment:
            g[0:2] = r2 @ g[0:2]
            g[2:4] = r2 @ g[2:4]
        elif el.sem.is_vertical:
            g[0:2] = r2 @ g[0:2]
        else:
            g[0:2] = r2 @ g[0:2]
            g[2:5] = rz @ g[2:5]
        elements.append(MapElement(el.id, el.sem, g))
    new_map = VectorMap(tuple(elements), origin=r2 @ vmap.origin, version=vmap.version)
    new_poses = [Pose6(rz @ p.t, rz @ p.R) for p in poses]
    return new_map, new_poses
