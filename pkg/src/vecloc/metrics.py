"""Error metrics and report emission: per-axis MAE / RMSE / threshold
percentages, the available ratio, the per-frame CSV, and score-histogram dumps."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import PoseOffset3

THRESHOLDS_M = (0.1, 0.2, 0.3)
THRESHOLDS_DEG = (0.1, 0.3, 0.6)
AR_LIMITS = (0.6, 0.3, 1.0)  # longitudinal m, lateral m, yaw deg

CSV_COLUMNS = [
    "frame_id", "n_elements",
    "true_dx", "true_dy", "true_dpsi",
    "est_dx", "est_dy", "est_dpsi",
    "err_lon", "err_lat", "err_yaw_deg",
    "sigma_xx", "sigma_yy", "sigma_psipsi",
    "err_level0", "err_level1", "err_level2",
    "failed", "message",
]


@dataclass
class FrameResult:
    frame_id: int
    n_elements: int = 0
    true_offset: PoseOffset3 | None = None
    est_offset: PoseOffset3 | None = None
    err_lon: float = math.nan
    err_lat: float = math.nan
    err_yaw_deg: float = math.nan
    sigma_diag: tuple[float, float, float] = (math.nan,) * 3
    level_errors: tuple[float, ...] = ()
    failed: bool = False
    message: str = ""


@dataclass
class AxisStats:
    mae: float
    rmse: float
    pct_below: dict[float, float]


@dataclass
class MetricsReport:
    longitudinal: AxisStats
    lateral: AxisStats
    yaw: AxisStats
    available_ratio: float
    n_frames: int
    n_failed: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        rows = [("longitudinal [m]", self.longitudinal, THRESHOLDS_M, "m"),
                ("lateral [m]", self.lateral, THRESHOLDS_M, "m"),
                ("yaw [deg]", self.yaw, THRESHOLDS_DEG, "deg")]
        lines = [f"frames: {self.n_frames}  failed: {self.n_failed}  "
                 f"AR: {self.available_ratio:.2f}%"]
        for name, stats, ths, unit in rows:
            pct = "/".join(f"{stats.pct_below[t]:.2f}" for t in ths)
            lines.append(f"{name:18s} MAE {stats.mae:.4f}  RMSE {stats.rmse:.4f}  "
                         f"<{'/'.join(str(t) for t in ths)}{unit}: {pct}%")
        return "\n".join(lines)


def _axis_stats(errors: np.ndarray, thresholds) -> AxisStats:
    if len(errors) == 0:
        return AxisStats(math.nan, math.nan, {t: math.nan for t in thresholds})
    a = np.abs(errors)
    return AxisStats(
        mae=float(a.mean()),
        rmse=float(np.sqrt((a ** 2).mean())),
        pct_below={t: float(100.0 * (a < t).mean()) for t in thresholds},
    )


def compute_metrics(results) -> MetricsReport:
    ok = [r for r in results if not r.failed]
    lon = np.array([r.err_lon for r in ok])
    lat = np.array([r.err_lat for r in ok])
    yaw = np.array([r.err_yaw_deg for r in ok])
    if len(ok):
        ar = float(100.0 * np.mean((np.abs(lon) < AR_LIMITS[0])
                                   & (np.abs(lat) < AR_LIMITS[1])
                                   & (np.abs(yaw) < AR_LIMITS[2])))
    else:
        ar = math.nan
    return MetricsReport(
        longitudinal=_axis_stats(lon, THRESHOLDS_M),
        lateral=_axis_stats(lat, THRESHOLDS_M),
        yaw=_axis_stats(yaw, THRESHOLDS_DEG),
        available_ratio=ar,
        n_frames=len(results),
        n_failed=len(results) - len(ok),
    )


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_frame_csv(results, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in results:
            true = r.true_offset or PoseOffset3(math.nan, math.nan, math.nan)
            est = r.est_offset or PoseOffset3(math.nan, math.nan, math.nan)
            levels = list(r.level_errors) + [math.nan] * (3 - len(r.level_errors))
            writer.writerow([_fmt(v) for v in [
                r.frame_id, r.n_elements,
                true.dx, true.dy, true.dpsi,
                est.dx, est.dy, est.dpsi,
                r.err_lon, r.err_lat, r.err_yaw_deg,
                *r.sigma_diag, *levels[:3],
                int(r.failed), r.message,
            ]])


def emit_report(report: MetricsReport, results, out_dir) -> dict[str, str]:
    """Write frames.csv, summary.json and summary.txt; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "frames": os.path.join(out_dir, "frames.csv"),
        "summary_json": os.path.join(out_dir, "summary.json"),
        "summary_txt": os.path.join(out_dir, "summary.txt"),
    }
    write_frame_csv(results, paths["frames"])
    with open(paths["summary_json"], "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(paths["summary_txt"], "w", encoding="utf-8") as f:
        f.write(report.to_text())
        f.write("\n")
    return paths


def emit_score_histograms(result, path) -> None:
    """Flat per-level posterior arrays with their candidate-offset axes."""
    if result.posteriors is None:
        raise ValueError("solver result carries no posteriors; solve with keep_posteriors=True")
    payload = {}
    for level, post in enumerate(result.posteriors):
        payload[f"level{level}_probs"] = post.probs
        payload[f"level{level}_offsets"] = post.offsets
        for k, name in enumerate(("dx", "dy", "dpsi")):
            payload[f"level{level}_axis_{name}"] = np.unique(post.offsets[:, k])
    np.savez(path, **payload)
