"""Vector HD-map data model, JSON on-disk format and spatial queries.

The map lives in a local East-North-Up metric frame anchored at a geodetic
origin. Features are point landmarks (signs, lights), two-point line landmarks
(lamp posts) and surface polylines (lane lines). The map doubles as a virtual
sensor: :func:`map_prior_factors` turns feature positions into prior
observation records.

Maps are immutable after load; all operations here are pure reads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .observations import ObservationRecord, SourceClass

__all__ = [
    "FeatureKind",
    "SemanticClass",
    "MapFeature",
    "HdMap",
    "MapFormatError",
    "MapValidationError",
    "load_map",
    "save_map",
    "query_features",
    "map_prior_factors",
    "DEFAULT_MAP_SIGMA",
]

# isotropic 1-sigma accuracy of surveyed feature positions, meters
DEFAULT_MAP_SIGMA = 0.1

# implicit painted width of lane-line surface features, meters
LANE_MARKING_WIDTH = 0.15

_GRID_CELL = 10.0  # spatial index cell size, meters


class MapFormatError(ValueError):
    """Map file cannot be parsed into the expected schema."""


class MapValidationError(ValueError):
    """A feature violates a structural invariant; message names the feature."""


class FeatureKind(str, Enum):
    POINT = "point"
    LINE = "line"
    SURFACE = "surface"


class SemanticClass(str, Enum):
    LAMP_POST = "lamp_post"
    TRAFFIC_LIGHT = "traffic_light"
    TRAFFIC_SIGN = "traffic_sign"
    LANE_LINE = "lane_line"
    OTHER = "other"


_KIND_POINT_COUNT = {FeatureKind.POINT: (1, 1), FeatureKind.LINE: (2, 2), FeatureKind.SURFACE: (2, None)}


@dataclass(frozen=True)
class MapFeature:
    """One vector landmark: id, geometric kind and ordered 3D control points."""

    id: str
    kind: FeatureKind
    semantic_class: SemanticClass
    control_points: np.ndarray  # (n, 3) meters, map frame

    def __post_init__(self):
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        object.__setattr__(self, "semantic_class", SemanticClass(self.semantic_class))
        pts = np.atleast_2d(np.asarray(self.control_points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise MapValidationError(f"feature {self.id!r}: control points must be (n, 3)")
        lo, hi = _KIND_POINT_COUNT[self.kind]
        if pts.shape[0] < lo or (hi is not None and pts.shape[0] > hi):
            raise MapValidationError(
                f"feature {self.id!r}: {self.kind.value} feature has {pts.shape[0]} "
                f"control points, expected {lo}" + ("" if hi == lo else " or more")
            )
        if not np.all(np.isfinite(pts)):
            raise MapValidationError(f"feature {self.id!r}: non-finite control point")
        pts.setflags(write=False)
        object.__setattr__(self, "control_points", pts)

    @property
    def reference_point(self) -> np.ndarray:
        """The feature's reference position: its first control point."""
        return self.control_points[0]


@dataclass
class HdMap:
    """Immutable feature collection with a geodetic anchor and metric bounds."""

    features: tuple[MapFeature, ...]
    frame_origin: tuple[float, float, float]  # latitude, longitude, altitude
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax (meters)
    _by_id: dict = field(init=False, repr=False)
    _grid: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.features = tuple(sorted(self.features, key=lambda f: f.id))
        ids = [f.id for f in self.features]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise MapValidationError(f"duplicate feature ids: {dup}")
        xmin, ymin, xmax, ymax = self.bounds
        for f in self.features:
            x, y = f.control_points[:, 0], f.control_points[:, 1]
            if x.min() < xmin - 1e-9 or x.max() > xmax + 1e-9 or y.min() < ymin - 1e-9 or y.max() > ymax + 1e-9:
                raise MapValidationError(f"feature {f.id!r} lies outside map bounds")
        self._by_id = {f.id: f for f in self.features}
        self._grid = _build_grid(self.features)

    def __iter__(self):
        return iter(self.features)

    def __len__(self):
        return len(self.features)

    def feature(self, feature_id: str) -> MapFeature:
        try:
            return self._by_id[feature_id]
        except KeyError:
            raise KeyError(f"unknown feature id {feature_id!r}") from None

    def features_of_kind(self, kind: FeatureKind) -> list[MapFeature]:
        kind = FeatureKind(kind)
        return [f for f in self.features if f.kind == kind]


def _bounds_of(features) -> tuple[float, float, float, float]:
    pts = np.vstack([f.control_points[:, :2] for f in features]) if features else np.zeros((1, 2))
    return (float(pts[:, 0].min()), float(pts[:, 1].min()),
            float(pts[:, 0].max()), float(pts[:, 1].max()))


def _cell(x: float, y: float) -> tuple[int, int]:
    return (math.floor(x / _GRID_CELL), math.floor(y / _GRID_CELL))


def _build_grid(features) -> dict:
    grid: dict[tuple[int, int], set] = {}
    for f in features:
        for p in f.control_points:
            grid.setdefault(_cell(p[0], p[1]), set()).add(f.id)
    return grid


def load_map(path) -> HdMap:
    """Load and validate a JSON map file.

    Raises MapFormatError on malformed documents and MapValidationError when a
    feature breaks an invariant (the message names the feature id).
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MapFormatError(f"cannot read map file {path}: {exc}") from exc
    return map_from_dict(doc)


def map_from_dict(doc: dict) -> HdMap:
    if not isinstance(doc, dict) or "features" not in doc:
        raise MapFormatError("map document must be an object with a 'features' list")
    origin = tuple(float(v) for v in doc.get("frame_origin", (0.0, 0.0, 0.0)))
    if len(origin) != 3:
        raise MapFormatError("frame_origin must have 3 components (lat, lon, alt)")
    features = []
    for i, fd in enumerate(doc["features"]):
        try:
            features.append(
                MapFeature(
                    id=str(fd["id"]),
                    kind=FeatureKind(fd["kind"]),
                    semantic_class=SemanticClass(fd["semantic_class"]),
                    control_points=np.asarray(fd["control_points"], dtype=float),
                )
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, MapValidationError):
                raise
            raise MapFormatError(f"feature #{i}: {exc}") from exc
    return HdMap(features=tuple(features), frame_origin=origin, bounds=_bounds_of(features))


def map_to_dict(hd_map: HdMap) -> dict:
    # 3 decimal places (millimeters) preserved round-trip
    return {
        "frame_origin": list(hd_map.frame_origin),
        "features": [
            {
                "id": f.id,
                "kind": f.kind.value,
                "semantic_class": f.semantic_class.value,
                "control_points": [[round(float(c), 3) for c in p] for p in f.control_points],
            }
            for f in hd_map.features
        ],
    }


def save_map(hd_map: HdMap, path) -> None:
    with open(path, "w") as fh:
        json.dump(map_to_dict(hd_map), fh, indent=1, sort_keys=True)
        fh.write("\n")


def query_features(hd_map: HdMap, center, radius: float) -> list[MapFeature]:
    """Features with at least one control point within ``radius`` of ``center``.

    2D planar distance; results come back in ascending id order. The grid index
    only prunes candidates, membership is decided by exact distances.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    cx, cy = float(center[0]), float(center[1])
    span = int(math.ceil(radius / _GRID_CELL)) + 1
    c0 = _cell(cx, cy)
    candidates: set[str] = set()
    for dx in range(-span, span + 1):
        for dy in range(-span, span + 1):
            candidates |= hd_map._grid.get((c0[0] + dx, c0[1] + dy), set())
    out = []
    r2 = radius * radius
    for fid in sorted(candidates):
        f = hd_map.feature(fid)
        d2 = (f.control_points[:, 0] - cx) ** 2 + (f.control_points[:, 1] - cy) ** 2
        if float(d2.min()) <= r2:
            out.append(f)
    return out


def map_prior_factors(hd_map: HdMap, feature_ids, sigma: float = DEFAULT_MAP_SIGMA,
                      stamp: float = 0.0) -> list[ObservationRecord]:
    """Expose the map as a virtual sensor: one M-F prior per requested feature.

    The record value is the feature's reference position, the covariance the
    configured isotropic map accuracy.
    """
    cov = np.eye(3) * sigma**2
    records = []
    for fid in feature_ids:
        f = hd_map.feature(fid)
        records.append(
            ObservationRecord(
                source_class=SourceClass.M_F,
                observer_id=None,
                subject_id=f.id,
                stamp=stamp,
                value=f.reference_point.copy(),
                covariance=cov.copy(),
            )
        )
    return records
