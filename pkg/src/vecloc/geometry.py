"""Pose algebra, candidate-offset grids, and projection of map geometry into the BEV plane.

The BEV plane is the sensor's x-y plane expressed in the world frame; it tilts
with vehicle roll/pitch. Map elements live on the horizontal world plane, so
projection first intersects the vertical line through a point with the BEV
plane, then transforms into the sensor frame and rescales to grid coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

TAU = 2.0 * math.pi

_EZ = np.array([0.0, 0.0, 1.0])


class DegeneratePlaneError(ValueError):
    """BEV plane is (numerically) vertical; projection is undefined."""


def wrap_yaw(psi: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if not math.isfinite(psi):
        raise ValueError(f"yaw must be finite, got {psi!r}")
    r = math.remainder(psi, TAU)
    if r <= -math.pi:
        r += TAU
    return r


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_ypr(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rotation matrix from Z-Y-X Euler angles (yaw about z, then pitch, then roll)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class Pose6:
    """World-from-sensor rigid transform: t is the sensor origin, R its orientation."""

    t: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3).copy()
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(R))):
            raise ValueError("pose contains non-finite values")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        t.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "R", R)

    @classmethod
    def from_ypr(cls, x: float, y: float, z: float,
                 yaw: float, pitch: float = 0.0, roll: float = 0.0) -> "Pose6":
        return cls(np.array([x, y, z]), rotation_ypr(yaw, pitch, roll))

    @property
    def yaw(self) -> float:
        return math.atan2(self.R[1, 0], self.R[0, 0])

    @property
    def plane_normal(self) -> np.ndarray:
        """Unit z-axis of the sensor expressed in world coordinates."""
        return self.R[:, 2]

    def to_record(self) -> dict:
        return {"t": [float(v) for v in self.t],
                "R": [float(v) for v in self.R.reshape(-1)]}

    @classmethod
    def from_record(cls, rec: dict) -> "Pose6":
        return cls(np.array(rec["t"], dtype=np.float64),
                   np.array(rec["R"], dtype=np.float64).reshape(3, 3))


class PoseOffset3(NamedTuple):
    """Planar pose correction: translation in the pose's local horizontal frame plus a heading delta."""

    dx: float
    dy: float
    dpsi: float


def compose(pose: Pose6, offset: PoseOffset3) -> Pose6:
    """Apply a planar offset: (dx, dy) in the pose's heading frame, dpsi about world z.

    Roll, pitch and z are untouched.
    """
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dx, dy, dpsi = offset
    t = pose.t + np.array([c * dx - s * dy, s * dx + c * dy, 0.0])
    return Pose6(t, rotation_z(dpsi) @ pose.R)


def invert_offset(offset: PoseOffset3) -> PoseOffset3:
    """Offset b such that compose(compose(p, offset), b) restores p's position/heading."""
    c, s = math.cos(-offset.dpsi), math.sin(-offset.dpsi)
    return PoseOffset3(-(c * offset.dx - s * offset.dy),
                       -(s * offset.dx + c * offset.dy),
                       wrap_yaw(-offset.dpsi))


def relative_offset(a: Pose6, b: Pose6) -> PoseOffset3:
    """Planar offset o with compose(a, o) matching b's horizontal position and heading."""
    d = b.t - a.t
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return PoseOffset3(float(c * d[0] + s * d[1]),
                       float(-s * d[0] + c * d[1]),
                       wrap_yaw(b.yaw - a.yaw))


@dataclass(frozen=True)
class GridSpec:
    """Geometry of one BEV grid: H x W cells of size `resolution`, cell centers on
    integer grid coordinates, cell (0, 0) centered at (h_min, w_min) meters in the
    sensor frame."""

    H: int
    W: int
    resolution: float
    h_min: float
    w_min: float

    def __post_init__(self):
        if self.H <= 0 or self.W <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @classmethod
    def centered(cls, H: int, W: int, resolution: float) -> "GridSpec":
        return cls(H, W, resolution, -0.5 * H * resolution, -0.5 * W * resolution)

    @property
    def extent(self) -> tuple[float, float]:
        """Metric size (meters) covered along each axis."""
        return (self.H * self.resolution, self.W * self.resolution)


def bev_plane_heights(pose: Pose6, xy: np.ndarray) -> np.ndarray:
    """World z of the BEV plane above each (x, y): solves n . (p - t) = 0 for p_z."""
    n = pose.plane_normal
    if abs(n[2]) < 1e-6:
        raise DegeneratePlaneError("BEV plane is vertical (|n_z| < 1e-6)")
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    return (n @ pose.t - n[0] * xy[:, 0] - n[1] * xy[:, 1]) / n[2]


def project_points_to_bev(pose: Pose6, xy: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Project world (x, y) points onto the pose's BEV grid; returns (N, 2) grid coords.

    Coordinates may fall outside [0, H) x [0, W); clipping is the caller's choice.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    z = bev_plane_heights(pose, xy)
    p = np.column_stack([xy, z])
    local = (p - pose.t) @ pose.R  # row-vector form of R^T (p - t)
    return np.column_stack([(local[:, 0] - spec.h_min) / spec.resolution,
                            (local[:, 1] - spec.w_min) / spec.resolution])


def project_endpoint_to_bev(pose: Pose6, endpoint, spec: GridSpec) -> np.ndarray:
    """Single-point convenience wrapper around project_points_to_bev."""
    return project_points_to_bev(pose, np.asarray(endpoint, dtype=np.float64).reshape(1, 2), spec)[0]


def segment_sample_count(length: float, samples_per_segment: int | None) -> int:
    """Uniform sample count for a segment: explicit count, or 8 per 10 m (min 2)."""
    if samples_per_segment is not None:
        if samples_per_segment < 1:
            raise ValueError("samples_per_segment must be >= 1")
        return samples_per_segment
    return max(2, math.ceil(length * 0.8))


def element_world_points(element, samples_per_segment: int | None = None) -> np.ndarray:
    """Densify one map element into world (x, y) points.

    Segments are sampled uniformly by arc length including endpoints; poles,
    signs and surfels contribute their single anchor point (a vertical line
    meets the BEV plane in one point, so height samples collapse).
    """
    if element.sem.is_segment:
        a, b = element.endpoints()
        length = float(np.hypot(*(b - a)))
        if length == 0.0:
            return a.reshape(1, 2)
        n = segment_sample_count(length, samples_per_segment)
        if n == 1:
            return (0.5 * (a + b)).reshape(1, 2)
        ts = np.linspace(0.0, 1.0, n)
        return a[None, :] + ts[:, None] * (b - a)[None, :]
    return element.anchor().reshape(1, 2)


def project_elements(pose: Pose6, elements: Sequence, spec: GridSpec,
                     samples_per_segment: int | None = None) -> list[np.ndarray]:
    """Per-element grid-coordinate point sets under `pose`."""
    return [project_points_to_bev(pose, element_world_points(el, samples_per_segment), spec)
            for el in elements]


def _axis_values(range_: float, step: float, name: str) -> np.ndarray:
    if range_ <= 0 or step <= 0:
        raise ValueError(f"{name}: range and step must be positive")
    m = range_ / step
    if abs(m - round(m)) > 1e-9 * max(1.0, m):
        raise ValueError(f"{name}: range {range_} is not an integer multiple of step {step}")
    m = int(round(m))
    return np.array([k * step for k in range(-m, m + 1)])


def sample_candidate_offsets(ranges: tuple[float, float, float],
                             steps: tuple[float, float, float]) -> list[PoseOffset3]:
    """Full symmetric Cartesian grid over [-r, r] per axis, endpoints included.

    Ordering is lexicographic (dx outermost, dpsi innermost); the count is
    prod(2 r_i / s_i + 1).
    """
    xs = _axis_values(ranges[0], steps[0], "x")
    ys = _axis_values(ranges[1], steps[1], "y")
    psis = _axis_values(ranges[2], steps[2], "yaw")
    return [PoseOffset3(float(x), float(y), float(p))
            for x in xs for y in ys for p in psis]


def offsets_as_array(candidates) -> np.ndarray:
    """Normalize a candidate collection to an (N, 3) float array."""
    if isinstance(candidates, np.ndarray):
        arr = np.asarray(candidates, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError("candidate array must have shape (N, 3)")
        return arr
    return np.array([[c[0], c[1], c[2]] for c in candidates], dtype=np.float64)
