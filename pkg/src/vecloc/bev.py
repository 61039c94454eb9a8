"""BEV feature grids: the three-layer pyramid, bilinear sampling, sinusoidal 2-D
positional encodings, semantic ground-truth rasterization, and 2x upsampling.

Cell centers sit on integer grid coordinates: sampling at an exact integer pair
returns that cell's value, and a continuous point belongs to the cell whose
center is nearest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .geometry import GridSpec, Pose6, project_elements

DTYPE = torch.float64


@dataclass
class BevGrid:
    """One H x W x C feature grid tied to a GridSpec; data is float64 torch."""

    spec: GridSpec
    data: torch.Tensor
    layer: int = 0

    def __post_init__(self):
        if not isinstance(self.data, torch.Tensor):
            self.data = torch.as_tensor(np.asarray(self.data), dtype=DTYPE)
        if self.data.dtype != DTYPE:
            self.data = self.data.to(DTYPE)
        if self.data.ndim != 3:
            raise ValueError(f"grid data must be H x W x C, got shape {tuple(self.data.shape)}")
        if self.data.shape[0] != self.spec.H or self.data.shape[1] != self.spec.W:
            raise ValueError("grid data shape does not match spec")
        if not bool(torch.isfinite(self.data).all()):
            raise ValueError("grid data contains non-finite values")

    @property
    def C(self) -> int:
        return self.data.shape[2]


@dataclass
class BevPyramid:
    """Exactly three grids covering the same metric extent at 1x/2x/4x resolution
    with non-increasing channel counts."""

    layers: tuple[BevGrid, BevGrid, BevGrid]

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if len(self.layers) != 3:
            raise ValueError("pyramid must have exactly 3 layers")
        base = self.layers[0]
        for l, g in enumerate(self.layers):
            if g.layer != l:
                raise ValueError(f"layer index mismatch at position {l}")
            eh, ew = g.spec.extent
            bh, bw = base.spec.extent
            if abs(eh - bh) > 1e-9 or abs(ew - bw) > 1e-9:
                raise ValueError("pyramid layers must cover the same metric extent")
            if g.spec.H != base.spec.H * 2 ** l:
                raise ValueError("layer l must have H * 2^l cells")
            if l > 0 and g.C > self.layers[l - 1].C:
                raise ValueError("channel counts must be non-increasing across layers")


def make_pyramid_specs(base: GridSpec, levels: int = 3) -> list[GridSpec]:
    """Grid specs for each pyramid layer: doubled cells, halved resolution, same corner."""
    return [GridSpec(base.H * 2 ** l, base.W * 2 ** l, base.resolution / 2 ** l,
                     base.h_min, base.w_min) for l in range(levels)]


def bilinear_sample_points(data: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinear blend of the 4 cells around each point; zeros outside [0,H-1]x[0,W-1].

    data is (H, W, C); points is (..., 2) in grid coordinates. Differentiable in
    `data`; the points are treated as constants.
    """
    H, W, C = data.shape
    x = points[..., 0]
    y = points[..., 1]
    inside = (x >= 0) & (x <= H - 1) & (y >= 0) & (y <= W - 1)
    xc = x.clamp(0, H - 1)
    yc = y.clamp(0, W - 1)
    x0 = xc.floor().long().clamp(0, H - 1)
    y0 = yc.floor().long().clamp(0, W - 1)
    x1 = (x0 + 1).clamp(0, H - 1)
    y1 = (y0 + 1).clamp(0, W - 1)
    fx = (xc - x0.to(DTYPE)).unsqueeze(-1)
    fy = (yc - y0.to(DTYPE)).unsqueeze(-1)
    flat = data.reshape(H * W, C)
    v00 = flat[(x0 * W + y0).reshape(-1)].reshape(*x.shape, C)
    v01 = flat[(x0 * W + y1).reshape(-1)].reshape(*x.shape, C)
    v10 = flat[(x1 * W + y0).reshape(-1)].reshape(*x.shape, C)
    v11 = flat[(x1 * W + y1).reshape(-1)].reshape(*x.shape, C)
    out = (v00 * (1 - fx) * (1 - fy) + v01 * (1 - fx) * fy
           + v10 * fx * (1 - fy) + v11 * fx * fy)
    return out * inside.unsqueeze(-1).to(DTYPE)


def bilinear_sample_channel(data: torch.Tensor, points: torch.Tensor,
                            channel: torch.Tensor) -> torch.Tensor:
    """Like bilinear_sample_points but gathers one channel per point.

    data is (H, W, K); channel broadcasts against points[..., 0] and selects the
    K-slice sampled at each point. Used by the linear-score fast path.
    """
    H, W, K = data.shape
    x = points[..., 0]
    y = points[..., 1]
    inside = (x >= 0) & (x <= H - 1) & (y >= 0) & (y <= W - 1)
    xc = x.clamp(0, H - 1)
    yc = y.clamp(0, W - 1)
    x0 = xc.floor().long().clamp(0, H - 1)
    y0 = yc.floor().long().clamp(0, W - 1)
    x1 = (x0 + 1).clamp(0, H - 1)
    y1 = (y0 + 1).clamp(0, W - 1)
    fx = xc - x0.to(DTYPE)
    fy = yc - y0.to(DTYPE)
    ch = channel.expand(x.shape)
    flat = data.reshape(-1)

    def take(ix, iy):
        return flat[((ix * W + iy) * K + ch).reshape(-1)].reshape(x.shape)

    out = (take(x0, y0) * (1 - fx) * (1 - fy) + take(x0, y1) * (1 - fx) * fy
           + take(x1, y0) * fx * (1 - fy) + take(x1, y1) * fx * fy)
    return out * inside.to(DTYPE)


def bilinear_sample(grid: BevGrid, point) -> torch.Tensor:
    """Sample one point from a grid; returns a length-C vector."""
    pt = np.asarray(point, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(pt)):
        raise ValueError("sample point must be finite")
    return bilinear_sample_points(grid.data, torch.as_tensor(pt, dtype=DTYPE))


def positional_encoding_2d(spec: GridSpec, C: int, base: float = 10000.0) -> BevGrid:
    """Sinusoidal encoding: first half of the channels encode the row index, the
    second half the column, each alternating sin/cos over geometric wavelengths."""
    if C % 2 != 0:
        raise ValueError("channel count must be even")
    half = C // 2

    def axis_encoding(n: int) -> np.ndarray:
        pos = np.arange(n, dtype=np.float64)[:, None]
        enc = np.zeros((n, half))
        k = np.arange(half)
        div = base ** ((2 * (k // 2)) / half)
        ang = pos / div[None, :]
        enc[:, 0::2] = np.sin(ang[:, 0::2])
        enc[:, 1::2] = np.cos(ang[:, 1::2])
        return enc

    rows = axis_encoding(spec.H)
    cols = axis_encoding(spec.W)
    data = np.zeros((spec.H, spec.W, C))
    data[:, :, :half] = rows[:, None, :]
    data[:, :, half:] = cols[None, :, :]
    return BevGrid(spec, torch.as_tensor(data, dtype=DTYPE))


def points_to_cells(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Nearest-center cell indices for grid-coordinate points; out-of-range dropped."""
    pts = np.atleast_2d(points)
    ij = np.floor(pts + 0.5).astype(np.int64)
    keep = ((ij[:, 0] >= 0) & (ij[:, 0] < spec.H)
            & (ij[:, 1] >= 0) & (ij[:, 1] < spec.W))
    return ij[keep]


def rasterize_semantic_gt(elements: Sequence, gt_pose: Pose6, spec: GridSpec,
                          samples_per_segment: int | None = None) -> torch.Tensor:
    """Binary H x W occupancy of one semantic type's densified projections."""
    types = {el.sem for el in elements}
    if len(types) > 1:
        raise ValueError(f"rasterize_semantic_gt expects one semantic type, got {sorted(t.tag for t in types)}")
    grid = torch.zeros((spec.H, spec.W), dtype=DTYPE)
    if not elements:
        return grid
    pts = np.concatenate(project_elements(gt_pose, elements, spec, samples_per_segment))
    cells = points_to_cells(pts, spec)
    if len(cells):
        grid[cells[:, 0], cells[:, 1]] = 1.0
    return grid


def _upsample_axis(data: torch.Tensor, dim: int) -> torch.Tensor:
    # Node-convention 2x: even outputs copy input nodes, odd outputs average neighbors
    # (the last odd node clamps to the edge).
    n = data.shape[dim]
    shifted = torch.cat([data.narrow(dim, 1, n - 1), data.narrow(dim, n - 1, 1)], dim=dim)
    mid = 0.5 * (data + shifted)
    out_shape = list(data.shape)
    out_shape[dim] = 2 * n
    out = torch.empty(out_shape, dtype=data.dtype)
    idx_even = torch.arange(0, 2 * n, 2)
    idx_odd = torch.arange(1, 2 * n, 2)
    out.index_copy_(dim, idx_even, data)
    out.index_copy_(dim, idx_odd, mid)
    return out


def upsample_layer(grid: BevGrid, out_channels: int,
                   channel_proj: np.ndarray | torch.Tensor | None = None) -> BevGrid:
    """Spatial 2x bilinear upsampling followed by a channel projection.

    channel_proj is a (C_in, C_out) matrix; None keeps the first out_channels
    channels unchanged.
    """
    if out_channels > grid.C:
        raise ValueError("out_channels must not exceed the input channel count")
    up = _upsample_axis(_upsample_axis(grid.data, 0), 1)
    if channel_proj is None:
        up = up[:, :, :out_channels]
    else:
        proj = torch.as_tensor(np.asarray(channel_proj), dtype=DTYPE)
        if proj.shape != (grid.C, out_channels):
            raise ValueError(f"channel_proj must be ({grid.C}, {out_channels})")
        up = up @ proj
    spec = GridSpec(grid.spec.H * 2, grid.spec.W * 2, grid.spec.resolution / 2,
                    grid.spec.h_min, grid.spec.w_min)
    return BevGrid(spec, up, layer=grid.layer + 1)


def save_grid(grid: BevGrid, path) -> None:
    """Debug dump: spec header plus row-major values."""
    np.savez(path,
             H=grid.spec.H, W=grid.spec.W, C=grid.C, layer=grid.layer,
             resolution=grid.spec.resolution,
             h_min=grid.spec.h_min, w_min=grid.spec.w_min,
             data=grid.data.detach().numpy())


def load_grid(path) -> BevGrid:
    with np.load(path) as z:
        spec = GridSpec(int(z["H"]), int(z["W"]), float(z["resolution"]),
                        float(z["h_min"]), float(z["w_min"]))
        return BevGrid(spec, torch.as_tensor(z["data"], dtype=DTYPE), layer=int(z["layer"]))
