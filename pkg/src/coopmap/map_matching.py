"""Estimate a 6-DOF camera pose by registering projected map landmarks against
recognized image features.

Point and line landmarks contribute scalar image distances (D_P, D_L); lane
surfaces either match as lines (straight lanes) or, when the detection-side
line fit has too many outliers, as region features whose residual samples a
Euclidean distance transform of the detected mask at the projected control
points. A soft ground constraint ties pitch, roll and camera height to the
road surface, which keeps sparse-landmark solves well posed.

The solve is an iterative-closest-feature scheme: gated mutual-nearest
association is recomputed after every accepted Levenberg-Marquardt step. The
association gate anneals from ``gate_px_initial`` down to ``gate_px`` so that
GNSS-grade initial errors (well over 100 px of misprojection) can still pull
in; the final rounds run at the tight gate.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import (
    MIN_LINE_LENGTH_PX,
    CameraIntrinsics,
    CameraPose,
    EdtGrid,
    ImageLine,
    edt_sample,
    euclidean_distance_transform,
    line_distance,
    line_endpoint_offsets,
    point_distance,
    project_line,
    project_point,
    project_points,
    resample_polyline,
    rotation_derivatives,
    rotation_map_to_camera,
)
from .map_model import FeatureKind, HdMap, MapFeature, SemanticClass, query_features
from .solver import (ConvergenceReason, LeastSquaresProblem, SolverOptions,
                     numeric_jacobian, solve)

__all__ = [
    "DetectedPoint",
    "DetectedLine",
    "DetectedRegion",
    "RecognizedFeatures",
    "Correspondences",
    "MatchingOptions",
    "MatchingReport",
    "LaneModel",
    "UnderConstrainedError",
    "MatchingNonConvergence",
    "associate",
    "select_lane_model",
    "matching_residual",
    "estimate_pose",
    "project_map_features",
    "ProjectedFeatures",
    "bind_regions",
    "RegionBinding",
    "load_recognized",
    "save_recognized",
    "rle_encode",
    "rle_decode",
]

# residual value substituted when a matched landmark falls behind the camera
# during a trial step; large enough that such steps are always rejected
BEHIND_PENALTY_PX = 1e4

_CONVERGED = (ConvergenceReason.COST_TOL, ConvergenceReason.STEP_TOL, ConvergenceReason.GRAD_TOL)


class UnderConstrainedError(RuntimeError):
    """The constraints cannot determine the pose (empty correspondence set with
    the ground constraint off, or rank-deficient information at the solution)."""

    def __init__(self, message, pose=None, report=None):
        super().__init__(message)
        self.pose = pose
        self.report = report


class MatchingNonConvergence(RuntimeError):
    """Iteration budget exhausted before the pose solve settled."""

    def __init__(self, message, pose=None, report=None):
        super().__init__(message)
        self.pose = pose
        self.report = report


class LaneModel(str, Enum):
    LINEAR = "linear"
    REGION = "region"


@dataclass
class DetectedPoint:
    uv: np.ndarray
    semantic_class: SemanticClass

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float).ravel()[:2]
        self.semantic_class = SemanticClass(self.semantic_class)


@dataclass
class DetectedLine:
    line: ImageLine
    semantic_class: SemanticClass

    def __post_init__(self):
        self.semantic_class = SemanticClass(self.semantic_class)


@dataclass
class DetectedRegion:
    mask: np.ndarray  # boolean, image-sized (height, width)
    semantic_class: SemanticClass

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        self.semantic_class = SemanticClass(self.semantic_class)


@dataclass
class RecognizedFeatures:
    """Per-frame detections: pixel points, line segments and region masks."""

    image_size: tuple  # (width, height)
    points: list = field(default_factory=list)
    lines: list = field(default_factory=list)
    regions: list = field(default_factory=list)

    def __post_init__(self):
        w, h = self.image_size
        self.image_size = (int(w), int(h))
        for r in self.regions:
            if r.mask.shape != (self.image_size[1], self.image_size[0]):
                raise ValueError("region mask does not match the image size")

    @property
    def n_detections(self) -> int:
        return len(self.points) + len(self.lines) + len(self.regions)


@dataclass
class Correspondences:
    """Feature-id -> detection-index pairings for lines and points."""

    c_l: dict = field(default_factory=dict)
    c_p: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, m in (("line", self.c_l), ("point", self.c_p)):
            idx = list(m.values())
            if len(set(idx)) != len(idx):
                raise ValueError(f"a detected {name} is matched more than once")

    def __len__(self):
        return len(self.c_l) + len(self.c_p)


@dataclass
class MatchingOptions:
    lambda_n: float = 0.001          # ground-constraint weight
    camera_height: float = 1.5       # meters above the road surface
    gate_px: float = 20.0            # final association gate
    gate_px_initial: float = 600.0   # starting gate; tracks fit quality downward
    gate_rms_factor: float = 4.0     # gate = max(gate_px, factor * residual RMS)
    outlier_ratio_threshold: float = 0.3
    max_iterations: int = 50
    cost_tol: float = 1e-10
    step_tol: float = 1e-8
    grad_tol: float = 1e-8
    query_radius: float = 150.0      # map preselection radius, meters
    region_spacing: float = 1.0      # control-point resampling step, meters
    region_gate_px: float = 50.0     # EDT gate for including region points
    max_step: float = 2.0            # trust cap on one LM step (m/rad mixed norm)
    fd_step_m: float = 1e-6
    fd_step_rad: float = 1e-7

    def __post_init__(self):
        if self.lambda_n < 0:
            raise ValueError("lambda_n must be non-negative")
        if not 0.0 < self.outlier_ratio_threshold < 1.0:
            raise ValueError("outlier ratio threshold must lie in (0, 1)")


@dataclass
class MatchingReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    reason: ConvergenceReason = ConvergenceReason.MAX_ITER
    cost_trace: list = field(default_factory=list)
    dropped_features: list = field(default_factory=list)  # behind-camera ids
    n_line_matches: int = 0
    n_point_matches: int = 0
    n_region_points: int = 0
    under_constrained: bool = False
    pose_information: np.ndarray | None = None  # J^T J at the solution (pixel units)


def select_lane_model(fit_outlier_ratio: float, opts: MatchingOptions) -> LaneModel:
    """Linear lane model unless the detection-side line fit had too many outliers."""
    if not 0.0 <= fit_outlier_ratio <= 1.0:
        raise ValueError("outlier ratio must lie in [0, 1]")
    if fit_outlier_ratio > opts.outlier_ratio_threshold:
        return LaneModel.REGION
    return LaneModel.LINEAR


@dataclass
class ProjectedFeatures:
    """Map landmarks projected at a trial pose, split by geometric role."""

    points: list = field(default_factory=list)   # (feature_id, uv, semantic_class)
    lines: list = field(default_factory=list)    # (feature_id, ImageLine, semantic_class)
    dropped: list = field(default_factory=list)  # ids projected behind the camera


def project_map_features(features, pose: CameraPose, intrinsics: CameraIntrinsics) -> ProjectedFeatures:
    """Project point landmarks, line landmarks and lane chords to the image.

    Surface (lane) features enter the line pool through their first-to-last
    control-point chord so straight lanes can match detected lines.
    """
    out = ProjectedFeatures()
    pts3, pt_meta, ln_meta = [], [], []
    for f in features:
        if f.kind == FeatureKind.POINT:
            pt_meta.append((f.id, f.semantic_class, len(pts3)))
            pts3.append(f.reference_point)
        else:
            ln_meta.append((f.id, f.semantic_class, len(pts3)))
            pts3.append(f.control_points[0])
            pts3.append(f.control_points[-1])
    if not pts3:
        return out
    uv, depth = project_points(np.asarray(pts3), pose, intrinsics)
    ok = depth > 1e-12
    for fid, cls, i in pt_meta:
        if ok[i]:
            out.points.append((fid, uv[i], cls))
        else:
            out.dropped.append(fid)
    for fid, cls, i in ln_meta:
        if ok[i] and ok[i + 1] and np.linalg.norm(uv[i + 1] - uv[i]) > MIN_LINE_LENGTH_PX:
            out.lines.append((fid, ImageLine(uv[i], uv[i + 1]), cls))
        else:
            out.dropped.append(fid)
    out.dropped.sort()
    return out


def _mutual_nearest(cost: np.ndarray, gate: float) -> list:
    """Pairs (i, j) that are each other's nearest match and within the gate."""
    if cost.size == 0:
        return []
    pairs = []
    best_j = cost.argmin(axis=1)
    best_i = cost.argmin(axis=0)
    for i, j in enumerate(best_j):
        if best_i[j] == i and cost[i, j] <= gate:
            pairs.append((i, int(j)))
    return pairs


def _segment_distance(a: ImageLine, b: ImageLine) -> float:
    """Association metric for line pairs: mean endpoint distance, best pairing.

    Unlike the D_L residual this keeps the along-line position, so collinear
    segments at different image positions do not alias during gating.
    """
    d1 = 0.5 * (point_distance(a.p1, b.p1) + point_distance(a.p2, b.p2))
    d2 = 0.5 * (point_distance(a.p1, b.p2) + point_distance(a.p2, b.p1))
    return min(d1, d2)


def associate(projected: ProjectedFeatures, recognized: RecognizedFeatures,
              gate_px: float) -> Correspondences:
    """Gated mutual-nearest pairing of projections and detections, class-aware."""
    c_p: dict = {}
    c_l: dict = {}

    if projected.points and recognized.points:
        proj = np.stack([uv for _, uv, _ in projected.points])
        det = np.stack([d.uv for d in recognized.points])
        cost = np.linalg.norm(proj[:, None, :] - det[None, :, :], axis=2)
        same = np.array([[d.semantic_class == cls for d in recognized.points]
                         for _, _, cls in projected.points])
        cost[~same] = np.inf
        for i, j in _mutual_nearest(cost, gate_px):
            c_p[projected.points[i][0]] = j

    if projected.lines and recognized.lines:
        p1 = np.stack([l.p1 for _, l, _ in projected.lines])
        p2 = np.stack([l.p2 for _, l, _ in projected.lines])
        q1 = np.stack([d.line.p1 for d in recognized.lines])
        q2 = np.stack([d.line.p2 for d in recognized.lines])

        def pd(a, b):
            return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)

        straight = 0.5 * (pd(p1, q1) + pd(p2, q2))
        crossed = 0.5 * (pd(p1, q2) + pd(p2, q1))
        cost = np.minimum(straight, crossed)
        same = np.array([[d.semantic_class == cls for d in recognized.lines]
                         for _, _, cls in projected.lines])
        cost[~same] = np.inf
        for i, j in _mutual_nearest(cost, gate_px):
            c_l[projected.lines[i][0]] = j

    return Correspondences(c_l=c_l, c_p=c_p)


@dataclass
class RegionBinding:
    """Resampled lane control points bound to candidate region EDTs."""

    feature_id: str
    points_map: np.ndarray    # (k, 3) map-frame sample points
    region_indices: tuple     # same-class detected regions to sample (min over)


def bind_regions(features, recognized: RecognizedFeatures, edts, pose: CameraPose,
                 intrinsics: CameraIntrinsics, opts: MatchingOptions,
                 exclude_ids=()) -> list:
    """Select which lane control points participate in the region residual.

    Association with the detected mask is implicit: points keep their binding
    when they currently project inside the image with an EDT value inside the
    gate. Lane features already matched as lines are skipped.
    """
    if not recognized.regions:
        return []
    w, h = recognized.image_size
    gate = max(opts.region_gate_px, opts.gate_px_initial)
    bindings = []
    for f in features:
        if f.kind != FeatureKind.SURFACE or f.id in exclude_ids:
            continue
        cand = tuple(i for i, r in enumerate(recognized.regions)
                     if r.semantic_class == f.semantic_class and not edts[i].empty)
        if not cand:
            continue
        samples = resample_polyline(f.control_points, opts.region_spacing)
        keep = []
        for p in samples:
            uv = project_point(p, pose, intrinsics)
            if uv is None or not (0 <= uv[0] < w and 0 <= uv[1] < h):
                continue
            if min(edt_sample(edts[i], uv) for i in cand) <= gate:
                keep.append(p)
        if len(keep) >= 2:
            bindings.append(RegionBinding(f.id, np.asarray(keep), cand))
    return bindings


def _nearest_lane_height(features, center) -> float:
    """Height of the closest lane control point; 0 on maps without lanes."""
    best, z = math.inf, 0.0
    for f in features:
        if f.kind != FeatureKind.SURFACE:
            continue
        d2 = (f.control_points[:, 0] - center[0]) ** 2 + (f.control_points[:, 1] - center[1]) ** 2
        i = int(np.argmin(d2))
        if d2[i] < best:
            best, z = float(d2[i]), float(f.control_points[i, 2])
    return z


class _ResidualPlan:
    """Frozen residual layout for one association round.

    All 3D points needed by the residual are stacked once so each evaluation
    is a single batched projection; the solver calls this hundreds of times
    per solve while differencing.
    """

    def __init__(self, features, recognized, corr, region_bindings, edts, z_lane,
                 intrinsics, opts):
        by_id = {f.id: f for f in features}
        self.intrinsics = intrinsics
        self.opts = opts
        self.z_target = z_lane + opts.camera_height

        line_pts, line_normal, line_offset = [], [], []
        for fid in sorted(corr.c_l):
            f = by_id[fid]
            det = recognized.lines[corr.c_l[fid]].line
            d = det.p2 - det.p1
            length = np.linalg.norm(d)
            n = np.array([-d[1], d[0]]) / length  # unit normal of the detected line
            for cp in (f.control_points[0], f.control_points[-1]):
                line_pts.append(cp)
                line_normal.append(n)
                line_offset.append(n @ det.p1)
        self.line_pts = np.asarray(line_pts, dtype=float).reshape(-1, 3)
        self.line_normal = np.asarray(line_normal, dtype=float).reshape(-1, 2)
        self.line_offset = np.asarray(line_offset, dtype=float)

        pt_pts, pt_det = [], []
        for fid in sorted(corr.c_p):
            pt_pts.append(by_id[fid].reference_point)
            pt_det.append(recognized.points[corr.c_p[fid]].uv)
        self.pt_pts = np.asarray(pt_pts, dtype=float).reshape(-1, 3)
        self.pt_det = np.asarray(pt_det, dtype=float).reshape(-1, 2)

        reg_pts, reg_grids = [], []
        for b in sorted(region_bindings, key=lambda b: b.feature_id):
            grids = tuple(edts[i] for i in b.region_indices)
            for p in b.points_map:
                reg_pts.append(p)
                reg_grids.append(grids)
        self.reg_pts = np.asarray(reg_pts, dtype=float).reshape(-1, 3)
        self.reg_grids = reg_grids

        self.n_terms = (2 * len(corr.c_l) + 2 * len(corr.c_p) + len(reg_pts)
                        + (3 if opts.lambda_n > 0.0 else 0))

    def _project(self, pts, R, center):
        if pts.shape[0] == 0:
            return np.zeros((0, 2)), np.zeros(0, dtype=bool)
        cam = (pts - center) @ R.T
        depth = cam[:, 2]
        ok = depth > 1e-12
        safe = np.where(ok, depth, 1.0)
        k = self.intrinsics
        uv = np.stack([k.fx * cam[:, 0] / safe + k.cx,
                       k.fy * cam[:, 1] / safe + k.cy], axis=1)
        return uv, ok

    def _uv_jacobians(self, pts, vec):
        """d(uv)/d(pose vector) for each point, (n, 2, 6); behind rows zeroed."""
        center = vec[:3]
        R = rotation_map_to_camera(vec[3], vec[4], vec[5])
        dRs = rotation_derivatives(vec[3], vec[4], vec[5])
        d = pts - center
        cam = d @ R.T
        depth = cam[:, 2]
        ok = depth > 1e-12
        z = np.where(ok, depth, 1.0)
        k = self.intrinsics
        # d(uv)/d(cam): rows [fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]
        duv_dcam = np.zeros((len(pts), 2, 3))
        duv_dcam[:, 0, 0] = k.fx / z
        duv_dcam[:, 0, 2] = -k.fx * cam[:, 0] / z**2
        duv_dcam[:, 1, 1] = k.fy / z
        duv_dcam[:, 1, 2] = -k.fy * cam[:, 1] / z**2
        J = np.zeros((len(pts), 2, 6))
        J[:, :, :3] = duv_dcam @ (-R)
        for a, dR in enumerate(dRs):
            J[:, :, 3 + a] = np.einsum("nij,nj->ni", duv_dcam, d @ dR.T)
        J[~ok] = 0.0
        return J, ok

    def __call__(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=float).ravel()
        center = vec[:3]
        R = rotation_map_to_camera(vec[3], vec[4], vec[5])
        opts = self.opts
        out = np.empty(self.n_terms)
        i = 0

        uv, ok = self._project(self.line_pts, R, center)
        if uv.shape[0]:
            terms = np.einsum("ij,ij->i", self.line_normal, uv) - self.line_offset
            # a line is unusable when either endpoint is behind the camera
            pair_ok = ok.reshape(-1, 2).all(axis=1).repeat(2)
            out[i:i + uv.shape[0]] = np.where(pair_ok, terms, BEHIND_PENALTY_PX)
            i += uv.shape[0]

        uv, ok = self._project(self.pt_pts, R, center)
        if uv.shape[0]:
            terms = (uv - self.pt_det).ravel()
            out[i:i + 2 * uv.shape[0]] = np.where(ok.repeat(2), terms, BEHIND_PENALTY_PX)
            i += 2 * uv.shape[0]

        uv, ok = self._project(self.reg_pts, R, center)
        for j in range(uv.shape[0]):
            if ok[j]:
                out[i] = min(edt_sample(g, uv[j]) for g in self.reg_grids[j])
            else:
                out[i] = BEHIND_PENALTY_PX
            i += 1

        if opts.lambda_n > 0.0:
            out[i] = opts.lambda_n * vec[4]
            out[i + 1] = opts.lambda_n * vec[5]
            out[i + 2] = opts.lambda_n * (center[2] - self.z_target)
        return out

    def jacobian(self, vec) -> np.ndarray:
        """Analytic residual Jacobian; region rows fall back to differencing.

        Behind-camera terms are constants (penalties), so their rows are zero,
        matching what differencing the penalty would give.
        """
        vec = np.asarray(vec, dtype=float).ravel()
        J = np.zeros((self.n_terms, 6))
        i = 0
        if self.line_pts.shape[0]:
            Juv, ok = self._uv_jacobians(self.line_pts, vec)
            rows = np.einsum("nj,njk->nk", self.line_normal, Juv)
            pair_ok = ok.reshape(-1, 2).all(axis=1).repeat(2)
            rows[~pair_ok] = 0.0
            J[i:i + rows.shape[0]] = rows
            i += rows.shape[0]
        if self.pt_pts.shape[0]:
            Juv, ok = self._uv_jacobians(self.pt_pts, vec)
            Juv[~ok] = 0.0
            J[i:i + 2 * Juv.shape[0]] = Juv.reshape(-1, 6)
            i += 2 * Juv.shape[0]
        n_reg = self.reg_pts.shape[0]
        if n_reg:
            # the EDT sample is piecewise-bilinear; central differences keep
            # its gradient logic in one place
            steps = np.array([1e-6] * 3 + [1e-7] * 3)
            base = slice(i, i + n_reg)
            for j in range(6):
                vp = vec.copy(); vm = vec.copy()
                vp[j] += steps[j]; vm[j] -= steps[j]
                J[base, j] = (self._region_terms(vp) - self._region_terms(vm)) / (2 * steps[j])
            i += n_reg
        if self.opts.lambda_n > 0.0:
            J[i, 4] = self.opts.lambda_n
            J[i + 1, 5] = self.opts.lambda_n
            J[i + 2, 2] = self.opts.lambda_n
        return J

    def _region_terms(self, vec) -> np.ndarray:
        center = vec[:3]
        R = rotation_map_to_camera(vec[3], vec[4], vec[5])
        uv, ok = self._project(self.reg_pts, R, center)
        out = np.empty(uv.shape[0])
        for j in range(uv.shape[0]):
            if ok[j]:
                out[j] = min(edt_sample(g, uv[j]) for g in self.reg_grids[j])
            else:
                out[j] = BEHIND_PENALTY_PX
        return out


def matching_residual(features, recognized: RecognizedFeatures, corr: Correspondences,
                      pose: CameraPose, intrinsics: CameraIntrinsics,
                      opts: MatchingOptions, region_bindings=None, edts=None,
                      z_lane=None) -> np.ndarray:
    """Stacked matching residual at one pose.

    Order is fixed: line terms (feature id order), point terms, region EDT
    samples (feature id order, sample order), then the three ground terms
    scaled by lambda_n. Each matched line contributes its two signed endpoint
    offsets rather than the scalar D_L, and each matched point its (du, dv)
    offset rather than the scalar D_P: the squared sums keep the same zero sets
    (for points the identical cost), but stay differentiable where the scalar
    forms have absolute-value kinks that stall the LM solve. Matched features
    that fall behind the camera contribute a large constant penalty so such
    poses lose in the step acceptance test.
    """
    if edts is None:
        edts = [euclidean_distance_transform(r.mask) for r in recognized.regions]
    if region_bindings is None:
        region_bindings = bind_regions(features, recognized, edts, pose, intrinsics,
                                       opts, exclude_ids=set(corr.c_l))
    if z_lane is None:
        z_lane = _nearest_lane_height(features, pose.center)
    plan = _ResidualPlan(features, recognized, corr, region_bindings, edts, z_lane,
                         intrinsics, opts)
    return plan(pose.as_vector())


def estimate_pose(hd_map: HdMap, recognized: RecognizedFeatures, initial: CameraPose,
                  intrinsics: CameraIntrinsics, opts: MatchingOptions | None = None):
    """Iterative closest-feature pose solve. Returns (CameraPose, MatchingReport).

    Raises UnderConstrainedError when there is nothing to constrain the pose at
    all, and MatchingNonConvergence when the accepted-step budget runs out.
    """
    opts = opts or MatchingOptions()
    features = query_features(hd_map, initial.center[:2], opts.query_radius)
    edts = [euclidean_distance_transform(r.mask) for r in recognized.regions]
    z_lane = _nearest_lane_height(features, initial.center)

    report = MatchingReport()
    pose = CameraPose(initial.center.copy(), initial.angles.copy())
    damping = SolverOptions().initial_damping
    fd = np.array([opts.fd_step_m] * 3 + [opts.fd_step_rad] * 3)
    gate = max(opts.gate_px_initial, opts.gate_px)
    prev_key = None
    converged = False
    max_outer = 2 * opts.max_iterations + 20

    for _ in range(max_outer):
        proj = project_map_features(features, pose, intrinsics)
        corr = associate(proj, recognized, gate)
        bindings = bind_regions(features, recognized, edts, pose, intrinsics, opts,
                                exclude_ids=set(corr.c_l))
        n_region_pts = sum(len(b.points_map) for b in bindings)
        if len(corr) == 0 and n_region_pts == 0 and opts.lambda_n == 0.0:
            raise UnderConstrainedError(
                "no correspondences and no ground constraint: pose is unobservable"
            )
        at_final_gate = gate <= opts.gate_px * (1.0 + 1e-9)
        key = (tuple(sorted(corr.c_l.items())), tuple(sorted(corr.c_p.items())),
               tuple((b.feature_id, len(b.points_map)) for b in bindings))

        plan = _ResidualPlan(features, recognized, corr, bindings, edts, z_lane,
                             intrinsics, opts)
        problem = LeastSquaresProblem(plan, 6, jacobian_fn=plan.jacobian, fd_steps=fd)
        sopts = SolverOptions(
            initial_damping=damping, max_iterations=1,
            cost_tol=opts.cost_tol, step_tol=opts.step_tol, grad_tol=opts.grad_tol,
            max_step_norm=opts.max_step,
        )
        vec, srep = solve(problem, pose.as_vector(), sopts)
        pose = CameraPose.from_vector(vec)
        damping = max(srep.final_damping, 1e-12)
        if not report.cost_trace:
            report.initial_cost = srep.initial_cost
            report.cost_trace.append(srep.initial_cost)
        report.cost_trace.extend(srep.cost_trace[1:])
        report.iterations += srep.iterations
        report.final_cost = srep.final_cost
        report.dropped_features = proj.dropped
        report.n_line_matches = len(corr.c_l)
        report.n_point_matches = len(corr.c_p)
        report.n_region_points = n_region_pts

        if srep.reason in _CONVERGED and key == prev_key and at_final_gate:
            report.reason = srep.reason
            converged = True
            break
        if report.iterations >= opts.max_iterations:
            report.reason = ConvergenceReason.MAX_ITER
            break
        prev_key = key
        # the gate follows the fit: wide while misprojections are large, down
        # to the configured floor once the residual settles
        n_px_terms = len(corr) + n_region_pts
        if n_px_terms > 0:
            rms = math.sqrt(max(srep.final_cost, 0.0) / n_px_terms)
            gate = min(max(opts.gate_px, opts.gate_rms_factor * rms), opts.gate_px_initial)
    else:
        report.reason = ConvergenceReason.MAX_ITER

    # pixel-unit information matrix at the final pose; rank deficiency here is
    # the under-constrained flag (the damped solve itself never goes singular)
    final_corr = associate(project_map_features(features, pose, intrinsics), recognized,
                           max(gate, opts.gate_px))
    final_bind = bind_regions(features, recognized, edts, pose, intrinsics, opts,
                              exclude_ids=set(final_corr.c_l))
    final_plan = _ResidualPlan(features, recognized, final_corr, final_bind, edts,
                               z_lane, intrinsics, opts)
    try:
        J = final_plan.jacobian(pose.as_vector())
        report.pose_information = J.T @ J
        np.linalg.cholesky(report.pose_information)
    except np.linalg.LinAlgError:
        report.under_constrained = True

    if not converged:
        raise MatchingNonConvergence(
            f"pose solve did not converge within {opts.max_iterations} iterations",
            pose=pose, report=report,
        )
    if report.under_constrained:
        raise UnderConstrainedError(
            "pose information is rank deficient at the solution "
            "(not enough independent constraints)",
            pose=pose, report=report,
        )
    return pose, report


# ---------------------------------------------------------------------------
# recognized-feature file format (for the localize CLI)

def rle_encode(mask: np.ndarray) -> list:
    """Row-major run lengths of a boolean mask, starting with a zero run."""
    flat = np.asarray(mask).astype(bool).ravel()
    counts = []
    current = False
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current = v
            run = 1
    counts.append(run)
    return counts


def rle_decode(counts, width: int, height: int) -> np.ndarray:
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != flat.size:
        raise ValueError("run lengths do not cover the image")
    return flat.reshape(height, width)


def save_recognized(rec: RecognizedFeatures, path) -> None:
    doc = {
        "image": {"width": rec.image_size[0], "height": rec.image_size[1]},
        "points": [
            {"u": float(p.uv[0]), "v": float(p.uv[1]), "class": p.semantic_class.value}
            for p in rec.points
        ],
        "lines": [
            {"u1": float(l.line.p1[0]), "v1": float(l.line.p1[1]),
             "u2": float(l.line.p2[0]), "v2": float(l.line.p2[1]),
             "class": l.semantic_class.value}
            for l in rec.lines
        ],
        "regions": [
            {"class": r.semantic_class.value, "rle": rle_encode(r.mask)}
            for r in rec.regions
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_recognized(path) -> RecognizedFeatures:
    with open(path) as fh:
        doc = json.load(fh)
    w, h = int(doc["image"]["width"]), int(doc["image"]["height"])
    return RecognizedFeatures(
        image_size=(w, h),
        points=[DetectedPoint((p["u"], p["v"]), SemanticClass(p["class"]))
                for p in doc.get("points", [])],
        lines=[DetectedLine(ImageLine((l["u1"], l["v1"]), (l["u2"], l["v2"])),
                            SemanticClass(l["class"]))
               for l in doc.get("lines", [])],
        regions=[DetectedRegion(rle_decode(r["rle"], w, h), SemanticClass(r["class"]))
                 for r in doc.get("regions", [])],
    )
