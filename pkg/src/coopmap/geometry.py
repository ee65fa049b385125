"""Pinhole camera model, image-space feature distances and the distance transform.

Frame conventions
-----------------
Map frame is metric East-North-Up (x east, y north, z up). The camera frame is
the usual computer-vision one: x right, y down, z along the optical axis.

A :class:`CameraPose` holds the camera center C in the map frame and three
angles (yaw, pitch, roll), composed map->camera as

    R = R_roll(psi) @ R_pitch(theta) @ R_base(phi)

where R_base(phi) is a *level* camera heading phi radians counterclockwise
from east (optical axis horizontal, image x to the right of travel, image y
down), positive pitch tilts the view up and positive roll turns the camera
clockwise about the optical axis. At yaw = pitch = roll = 0 the camera looks
along +x (east), so a level vehicle-mounted camera has pitch = roll = 0; the
ground soft constraint in the matching module relies on that.

Image points are plain float arrays (u, v) with u along image x and v along
image y (downwards). Points behind the camera project to None.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "CameraPose",
    "CameraIntrinsics",
    "ImageLine",
    "EdtGrid",
    "wrap_angle",
    "rotation_map_to_camera",
    "project_point",
    "project_line",
    "point_distance",
    "line_distance",
    "line_endpoint_offsets",
    "euclidean_distance_transform",
    "edt_sample",
    "resample_polyline",
    "rasterize_polyline",
]

MIN_LINE_LENGTH_PX = 1e-6
_MIN_DEPTH = 1e-12


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    r = math.remainder(float(a), 2.0 * math.pi)
    return math.pi if r <= -math.pi else r


def rotation_map_to_camera(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation matrix taking map-frame vectors into the camera frame."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    ct, st = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    # level camera at heading yaw: rows are camera x (right), y (down), z (forward)
    base = np.array([[sy, -cy, 0.0], [0.0, 0.0, -1.0], [cy, sy, 0.0]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, ct, st], [0.0, -st, ct]])
    r_roll = np.array([[cr, sr, 0.0], [-sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return r_roll @ r_pitch @ base


def rotation_derivatives(yaw: float, pitch: float, roll: float) -> tuple:
    """(dR/dyaw, dR/dpitch, dR/droll) of the map->camera rotation."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    ct, st = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    base = np.array([[sy, -cy, 0.0], [0.0, 0.0, -1.0], [cy, sy, 0.0]])
    d_base = np.array([[cy, sy, 0.0], [0.0, 0.0, 0.0], [-sy, cy, 0.0]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, ct, st], [0.0, -st, ct]])
    d_pitch = np.array([[0.0, 0.0, 0.0], [0.0, -st, ct], [0.0, -ct, -st]])
    r_roll = np.array([[cr, sr, 0.0], [-sr, cr, 0.0], [0.0, 0.0, 1.0]])
    d_roll = np.array([[-sr, cr, 0.0], [-cr, -sr, 0.0], [0.0, 0.0, 0.0]])
    return (r_roll @ r_pitch @ d_base,
            r_roll @ d_pitch @ base,
            d_roll @ r_pitch @ base)


@dataclass
class CameraPose:
    """6-DOF camera pose: center in the map frame plus (yaw, pitch, roll)."""

    center: np.ndarray  # (3,) meters
    angles: np.ndarray  # (yaw, pitch, roll) radians

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).ravel()
        angles = np.asarray(self.angles, dtype=float).ravel()
        if self.center.shape != (3,) or angles.shape != (3,):
            raise ValueError("pose needs a 3D center and 3 angles")
        if not (np.all(np.isfinite(self.center)) and np.all(np.isfinite(angles))):
            raise ValueError("pose components must be finite")
        self.angles = np.array([wrap_angle(a) for a in angles])

    @property
    def yaw(self) -> float:
        return float(self.angles[0])

    @property
    def pitch(self) -> float:
        return float(self.angles[1])

    @property
    def roll(self) -> float:
        return float(self.angles[2])

    def rotation(self) -> np.ndarray:
        return rotation_map_to_camera(self.yaw, self.pitch, self.roll)

    def as_vector(self) -> np.ndarray:
        """(Cx, Cy, Cz, yaw, pitch, roll) flat parameter vector."""
        return np.concatenate([self.center, self.angles])

    @classmethod
    def from_vector(cls, v) -> "CameraPose":
        v = np.asarray(v, dtype=float).ravel()
        return cls(center=v[:3], angles=v[3:6])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class ImageLine:
    """A 2D image line segment with distinct endpoints."""

    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=float).ravel()[:2]
        self.p2 = np.asarray(self.p2, dtype=float).ravel()[:2]
        if not (np.all(np.isfinite(self.p1)) and np.all(np.isfinite(self.p2))):
            raise ValueError("line endpoints must be finite")
        if np.linalg.norm(self.p2 - self.p1) <= MIN_LINE_LENGTH_PX:
            raise ValueError("degenerate image line (endpoints coincide)")


def project_point(p_m, pose: CameraPose, intrinsics: CameraIntrinsics,
                  rotation: np.ndarray | None = None) -> np.ndarray | None:
    """Pinhole projection of one map point; None when it is behind the camera."""
    R = pose.rotation() if rotation is None else rotation
    p_c = R @ (np.asarray(p_m, dtype=float) - pose.center)
    if p_c[2] <= _MIN_DEPTH:
        return None
    return np.array([
        intrinsics.fx * p_c[0] / p_c[2] + intrinsics.cx,
        intrinsics.fy * p_c[1] / p_c[2] + intrinsics.cy,
    ])


def project_points(points, pose: CameraPose, intrinsics: CameraIntrinsics):
    """Vectorized projection. Returns (uv (n,2), depth (n,)); behind rows are NaN."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    p_c = (pts - pose.center) @ pose.rotation().T
    depth = p_c[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([
            intrinsics.fx * p_c[:, 0] / depth + intrinsics.cx,
            intrinsics.fy * p_c[:, 1] / depth + intrinsics.cy,
        ], axis=1)
    uv[depth <= _MIN_DEPTH] = np.nan
    return uv, depth


def project_line(endpoints, pose: CameraPose, intrinsics: CameraIntrinsics) -> ImageLine | None:
    """Project a two-control-point line landmark; None if either endpoint is
    behind the camera or the projection collapses below the length floor."""
    endpoints = np.asarray(endpoints, dtype=float).reshape(2, 3)
    R = pose.rotation()
    a = project_point(endpoints[0], pose, intrinsics, rotation=R)
    b = project_point(endpoints[1], pose, intrinsics, rotation=R)
    if a is None or b is None:
        return None
    if np.linalg.norm(b - a) <= MIN_LINE_LENGTH_PX:
        return None
    return ImageLine(a, b)


def point_distance(a, b) -> float:
    """Euclidean pixel distance between two image points."""
    a = np.asarray(a, dtype=float)[:2]
    b = np.asarray(b, dtype=float)[:2]
    return float(np.linalg.norm(a - b))


def line_endpoint_offsets(detected: ImageLine, projected: ImageLine) -> np.ndarray:
    """Signed perpendicular distances of the projected endpoints to the
    infinite line through the detected endpoints."""
    d = detected.p2 - detected.p1
    length = np.linalg.norm(d)
    if length <= MIN_LINE_LENGTH_PX:
        raise ValueError("degenerate detected line")
    out = np.empty(2)
    for k, m in enumerate((projected.p1, projected.p2)):
        r = m - detected.p1
        out[k] = (d[0] * r[1] - d[1] * r[0]) / length
    return out


def line_distance(detected: ImageLine, projected: ImageLine) -> float:
    """Mean perpendicular distance of the projected endpoints to the infinite
    line through the detected endpoints."""
    return float(np.mean(np.abs(line_endpoint_offsets(detected, projected))))


@dataclass
class EdtGrid:
    """Per-cell Euclidean distance (pixels) to the nearest feature cell."""

    values: np.ndarray  # (height, width)
    empty: bool = False  # True when the source mask had no feature cell

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError("EDT grid must be a non-empty 2D array")
        self.values.setflags(write=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def euclidean_distance_transform(mask) -> EdtGrid:
    """Exact Euclidean distance to the nearest True cell of ``mask``.

    A mask without any feature cell yields an all-infinite grid flagged empty.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError("mask must be a non-empty 2D array")
    if not mask.any():
        return EdtGrid(values=np.full(mask.shape, np.inf), empty=True)
    return EdtGrid(values=ndimage.distance_transform_edt(~mask))


def edt_sample(grid: EdtGrid, p) -> float:
    """Bilinear sample of the distance grid at image point (u, v).

    Outside the grid the nearest-border value plus the Euclidean excess is
    returned, so the sampled field stays continuous and keeps growing.
    """
    u, v = float(p[0]), float(p[1])
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ValueError("sample point must be finite")
    if grid.empty:
        return math.inf
    w, h = grid.width, grid.height
    ux = min(max(u, 0.0), w - 1.0)
    vx = min(max(v, 0.0), h - 1.0)
    excess = math.hypot(u - ux, v - vx)
    x0 = min(int(math.floor(ux)), w - 2) if w > 1 else 0
    y0 = min(int(math.floor(vx)), h - 2) if h > 1 else 0
    fx = ux - x0
    fy = vx - y0
    vals = grid.values
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    top = (1.0 - fx) * vals[y0, x0] + fx * vals[y0, x1]
    bot = (1.0 - fx) * vals[y1, x0] + fx * vals[y1, x1]
    return float((1.0 - fy) * top + fy * bot + excess)


def resample_polyline(points, spacing: float) -> np.ndarray:
    """Resample a 3D polyline at roughly uniform arc-length spacing.

    Both endpoints are always kept; interior samples are spaced <= ``spacing``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 2:
        return pts.copy()
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total <= 0:
        return pts[:1].copy()
    n = max(int(math.ceil(total / spacing)), 1)
    targets = np.linspace(0.0, total, n + 1)
    out = np.empty((n + 1, pts.shape[1]))
    for k in range(pts.shape[1]):
        out[:, k] = np.interp(targets, arc, pts[:, k])
    return out


def rasterize_polyline(points_px, width: int, height: int, thickness: float = 1.5) -> np.ndarray:
    """Paint a polyline given in pixel coordinates into a boolean image mask."""
    mask = np.zeros((height, width), dtype=bool)
    pts = np.atleast_2d(np.asarray(points_px, dtype=float))
    if pts.shape[0] == 0:
        return mask
    radius = max(float(thickness) / 2.0, 0.5)
    r_int = int(math.ceil(radius))
    offs = [
        (dx, dy)
        for dy in range(-r_int, r_int + 1)
        for dx in range(-r_int, r_int + 1)
        if math.hypot(dx, dy) <= radius + 1e-9
    ]

    def paint(u, v):
        cu, cv = int(round(u)), int(round(v))
        for dx, dy in offs:
            x, y = cu + dx, cv + dy
            if 0 <= x < width and 0 <= y < height:
                mask[y, x] = True

    if pts.shape[0] == 1:
        paint(pts[0, 0], pts[0, 1])
        return mask
    for a, b in zip(pts[:-1], pts[1:]):
        steps = max(int(np.linalg.norm(b - a) / 0.5), 1)
        for t in np.linspace(0.0, 1.0, steps + 1):
            q = a + t * (b - a)
            paint(q[0], q[1])
    return mask
