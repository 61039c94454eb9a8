"""Vectorized landmark maps: schema, line-delimited serialization, spatial queries,
and the surfel reduction filter."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np


class MapFormatError(ValueError):
    """Raised for unparseable map files; carries the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MapValidationError(ValueError):
    """Raised when parsed content violates a map invariant; names the element id."""


class SemanticType(IntEnum):
    LANE_LINE = 1
    ROAD_BOUNDARY = 2
    STOP_LINE = 3
    PEDESTRIAN_CROSSING = 4
    ROAD_MARKING = 5
    POLE = 6
    TRAFFIC_SIGN = 7
    SURFEL = 8

    @property
    def tag(self) -> str:
        return self.name.lower()

    @classmethod
    def from_tag(cls, tag: str) -> "SemanticType":
        try:
            return cls[tag.upper()]
        except KeyError:
            raise ValueError(f"unknown semantic type tag {tag!r}") from None

    @property
    def row(self) -> int:
        """Zero-based row for embedding-table lookups."""
        return int(self) - 1

    @property
    def is_segment(self) -> bool:
        return self in _SEGMENT_TYPES

    @property
    def is_vertical(self) -> bool:
        return self in (SemanticType.POLE, SemanticType.TRAFFIC_SIGN)

    @property
    def is_surfel(self) -> bool:
        return self is SemanticType.SURFEL


_SEGMENT_TYPES = frozenset({
    SemanticType.LANE_LINE,
    SemanticType.ROAD_BOUNDARY,
    SemanticType.STOP_LINE,
    SemanticType.PEDESTRIAN_CROSSING,
    SemanticType.ROAD_MARKING,
})

N_SEMANTIC = len(SemanticType)

DESCRIPTOR_SIZE = 8

SURFEL_RATIO_MAX = 0.1
SURFEL_CELL_SIZE = 1.0


@dataclass(frozen=True)
class MapElement:
    """One vectorized landmark.

    The 8-slot descriptor layout depends on the semantic kind:
      segments   (x_s, y_s, x_e, y_e, 0, 0, 0, 0)
      verticals  (x, y, 0, h, 0, 0, 0, 0)
      surfels    (p_x, p_y, n_x, n_y, n_z, r1, r2, 0) with r = (l1/l2, l1/l3)
    """

    id: int
    sem: SemanticType
    geom: np.ndarray

    def __post_init__(self):
        geom = np.asarray(self.geom, dtype=np.float64).reshape(DESCRIPTOR_SIZE).copy()
        geom.setflags(write=False)
        object.__setattr__(self, "geom", geom)
        object.__setattr__(self, "sem", SemanticType(self.sem))
        self._validate()

    def _validate(self):
        g = self.geom
        if not np.all(np.isfinite(g)):
            raise MapValidationError(f"element {self.id}: non-finite geometry")
        if self.sem.is_vertical:
            if g[3] <= 0:
                raise MapValidationError(f"element {self.id}: height must be positive")
        elif self.sem.is_surfel:
            n = g[2:5]
            if abs(np.linalg.norm(n) - 1.0) > 1e-9:
                raise MapValidationError(f"element {self.id}: surfel normal is not unit length")
            r1, r2 = g[5], g[6]
            if not (0.0 < r2 <= r1 <= 1.0):
                raise MapValidationError(
                    f"element {self.id}: surfel eigenvalue ratios must satisfy 0 < l1/l3 <= l1/l2 <= 1")

    @classmethod
    def segment(cls, id: int, sem: SemanticType, x_s: float, y_s: float,
                x_e: float, y_e: float) -> "MapElement":
        if not SemanticType(sem).is_segment:
            raise ValueError(f"{SemanticType(sem).tag} is not a segment type")
        return cls(id, sem, np.array([x_s, y_s, x_e, y_e, 0, 0, 0, 0], dtype=np.float64))

    @classmethod
    def vertical(cls, id: int, sem: SemanticType, x: float, y: float, h: float) -> "MapElement":
        if not SemanticType(sem).is_vertical:
            raise ValueError(f"{SemanticType(sem).tag} is not a pole/sign type")
        return cls(id, sem, np.array([x, y, 0, h, 0, 0, 0, 0], dtype=np.float64))

    @classmethod
    def surfel(cls, id: int, center, normal, ratios) -> "MapElement":
        cx, cy = center
        nx, ny, nz = normal
        r1, r2 = ratios
        return cls(id, SemanticType.SURFEL,
                   np.array([cx, cy, nx, ny, nz, r1, r2, 0], dtype=np.float64))

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.sem.is_segment:
            raise ValueError(f"element {self.id} ({self.sem.tag}) has no segment endpoints")
        return self.geom[0:2].copy(), self.geom[2:4].copy()

    def first_endpoint(self) -> np.ndarray:
        """Reference anchor used by the matcher; first endpoint for segments."""
        return self.geom[0:2].copy()

    def anchor(self) -> np.ndarray:
        """The single (x, y) point representing non-segment elements."""
        return self.geom[0:2].copy()

    @property
    def height(self) -> float:
        if not self.sem.is_vertical:
            raise ValueError(f"element {self.id} has no height")
        return float(self.geom[3])

    @property
    def surfel_ratios(self) -> tuple[float, float]:
        if not self.sem.is_surfel:
            raise ValueError(f"element {self.id} is not a surfel")
        return float(self.geom[5]), float(self.geom[6])

    def bounds(self) -> tuple[float, float, float, float]:
        """Axis-aligned (min_x, min_y, max_x, max_y) of the planar geometry."""
        if self.sem.is_segment:
            xs = (self.geom[0], self.geom[2])
            ys = (self.geom[1], self.geom[3])
            return min(xs), min(ys), max(xs), max(ys)
        x, y = self.geom[0], self.geom[1]
        return x, y, x, y


@dataclass(frozen=True)
class VectorMap:
    elements: tuple[MapElement, ...]
    origin: np.ndarray
    version: int = 1

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(2).copy()
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "elements", tuple(self.elements))
        ids = [el.id for el in self.elements]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise MapValidationError(f"duplicate element ids: {dup[:5]}")

    def __len__(self) -> int:
        return len(self.elements)

    def bounding_box(self) -> tuple[float, float, float, float] | None:
        """(min_x, min_y, max_x, max_y) over all element geometry; None if empty."""
        if not self.elements:
            return None
        bs = np.array([el.bounds() for el in self.elements])
        return (float(bs[:, 0].min()), float(bs[:, 1].min()),
                float(bs[:, 2].max()), float(bs[:, 3].max()))


def _dump_map(vmap: VectorMap) -> str:
    bbox = vmap.bounding_box()
    header = {
        "format": "vecmap",
        "version": vmap.version,
        "origin": [float(v) for v in vmap.origin],
        "bbox": list(bbox) if bbox is not None else None,
        "count": len(vmap),
    }
    out = io.StringIO()
    out.write(json.dumps(header, sort_keys=True))
    out.write("\n")
    for el in vmap.elements:
        rec = {"id": el.id, "type": el.sem.tag, "geom": [float(v) for v in el.geom]}
        out.write(json.dumps(rec, sort_keys=True))
        out.write("\n")
    return out.getvalue()


def save_map(vmap: VectorMap, path) -> None:
    """Write the line-delimited map file (header line, then one record per element).

    Output is byte-identical for identical maps.
    """
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dump_map(vmap))


def load_map(path) -> VectorMap:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise MapFormatError(1, "empty file, header expected")

    def parse(line_no: int, text: str) -> dict:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise MapFormatError(line_no, f"invalid JSON ({e.msg} at col {e.colno})") from None
        if not isinstance(obj, dict):
            raise MapFormatError(line_no, "record is not an object")
        return obj

    header = parse(1, lines[0])
    if header.get("format") != "vecmap":
        raise MapFormatError(1, "missing or wrong format marker")
    version = int(header.get("version", 1))
    origin = np.array(header.get("origin", [0.0, 0.0]), dtype=np.float64)

    elements: list[MapElement] = []
    for idx, text in enumerate(lines[1:]):
        line_no = idx + 2
        if not text.strip():
            continue
        rec = parse(line_no, text)
        for key in ("type", "geom"):
            if key not in rec:
                raise MapFormatError(line_no, f"record missing {key!r}")
        try:
            sem = SemanticType.from_tag(rec["type"])
        except ValueError as e:
            raise MapFormatError(line_no, str(e)) from None
        geom = rec["geom"]
        if not isinstance(geom, list) or len(geom) != DESCRIPTOR_SIZE:
            raise MapFormatError(line_no, f"geom must be a list of {DESCRIPTOR_SIZE} numbers")
        el_id = int(rec["id"]) if "id" in rec else idx
        elements.append(MapElement(el_id, sem, np.array(geom, dtype=np.float64)))

    vmap = VectorMap(tuple(elements), origin, version)
    declared = header.get("bbox")
    actual = vmap.bounding_box()
    if declared is not None and actual is not None:
        lo_ok = declared[0] <= actual[0] + 1e-9 and declared[1] <= actual[1] + 1e-9
        hi_ok = declared[2] >= actual[2] - 1e-9 and declared[3] >= actual[3] - 1e-9
        if not (lo_ok and hi_ok):
            raise MapValidationError("header bounding box does not contain element geometry")
    return vmap


def _segment_intersects_box(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> bool:
    # Liang-Barsky clip of the parametric segment against the box.
    d = b - a
    t0, t1 = 0.0, 1.0
    for k in range(2):
        if abs(d[k]) < 1e-15:
            if a[k] < lo[k] or a[k] > hi[k]:
                return False
        else:
            ta = (lo[k] - a[k]) / d[k]
            tb = (hi[k] - a[k]) / d[k]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return False
    return True


def query_window(vmap: VectorMap, center, half_extent) -> list[MapElement]:
    """All elements whose geometry intersects the axis-aligned window."""
    center = np.asarray(center, dtype=np.float64).reshape(2)
    half = np.asarray(half_extent, dtype=np.float64).reshape(2)
    if np.any(half <= 0):
        raise ValueError("half_extent must be positive")
    lo, hi = center - half, center + half
    out = []
    for el in vmap.elements:
        if el.sem.is_segment:
            a, b = el.endpoints()
            if _segment_intersects_box(a, b, lo, hi):
                out.append(el)
        else:
            p = el.anchor()
            if lo[0] <= p[0] <= hi[0] and lo[1] <= p[1] <= hi[1]:
                out.append(el)
    return out


def filter_surfels(surfels: Sequence[MapElement]) -> list[MapElement]:
    """Reduce a surfel set: drop l1/l2 > 0.1, then keep one surfel per 1 m grid cell.

    Within a cell the surfel with the smallest l1/l2 wins; ties go to the lowest
    id. Cells are anchored at integer world meters, so the result does not
    depend on any pose. Output is sorted by id.
    """
    best: dict[tuple[int, int], MapElement] = {}
    for el in surfels:
        if not el.sem.is_surfel:
            raise ValueError(f"element {el.id} ({el.sem.tag}) is not a surfel")
        r1 = el.surfel_ratios[0]
        if r1 > SURFEL_RATIO_MAX:
            continue
        cx, cy = el.anchor()
        cell = (math.floor(cx / SURFEL_CELL_SIZE), math.floor(cy / SURFEL_CELL_SIZE))
        cur = best.get(cell)
        if cur is None or (r1, el.id) < (cur.surfel_ratios[0], cur.id):
            best[cell] = el
    return sorted(best.values(), key=lambda el: el.id)


def map_size_report(vmap: VectorMap, road_length_km: float) -> float:
    """Serialized size in bytes per kilometer of road."""
    if road_length_km <= 0:
        raise ValueError("road_length_km must be positive")
    n_bytes = len(_dump_map(vmap).encode("utf-8"))
    return n_bytes / road_length_km
