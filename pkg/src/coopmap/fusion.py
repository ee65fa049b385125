"""Cooperative-perception fusion: local estimation, messages and the host solve.

Distributed mode: each connected vehicle solves its own sub-graph (own pose
from GNSS and map matching, plus locally observed agents), then transmits a
compact message: Gaussian priors for state it summarizes plus the raw
observation records selected by the share policy. The host rebuilds a joint
graph from its own sensing and the received messages, using received means as
the initial value.

To avoid double counting, the transmitted priors are computed from a re-solve
of the sender's graph *without* the factor classes it forwards raw; a subject
whose information came only from forwarded records then simply has no prior to
transmit.

Centralized mode is the accuracy and bandwidth reference: every vehicle ships
all raw observations (including camera detections), and one joint solve runs
over the full factor set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .estimator import (
    DrivingState,
    FactorGraph,
    JointSolveReport,
    MarginalBlock,
    marginal_covariance,
    solve_joint,
)
from .geometry import CameraIntrinsics, CameraPose, wrap_angle
from .map_matching import (
    MatchingNonConvergence,
    MatchingOptions,
    RecognizedFeatures,
    UnderConstrainedError,
    estimate_pose,
    rle_encode,
)
from .map_model import HdMap
from .observations import ObservationRecord, SourceClass
from .solver import SolverOptions

__all__ = [
    "CameraRig",
    "VehicleSensing",
    "LocalEstimate",
    "FusionMessage",
    "FusionMode",
    "FusionConfig",
    "LocalResult",
    "local_estimate",
    "host_fuse",
    "centralized_fuse",
    "sensing_payload_bytes",
]

# pose covariance used when map matching succeeds but its information matrix
# cannot be inverted (degenerate geometry); generous on purpose
_FALLBACK_POSE_SIGMA = np.array([0.5, 0.5, 0.2, np.deg2rad(2), np.deg2rad(2), np.deg2rad(2)])


class FusionMode(str, Enum):
    CENTRALIZED = "centralized"
    DISTRIBUTED = "distributed"


@dataclass
class CameraRig:
    """Camera intrinsics plus its mount on the vehicle body.

    The mount offset is expressed in the vehicle frame (x forward, y left) and
    rotated by vehicle yaw only; scenarios keep vehicles level so pitch/roll
    transfer directly.
    """

    intrinsics: CameraIntrinsics
    mount_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.5]))
    pixel_sigma: float = 1.0

    def __post_init__(self):
        self.mount_offset = np.asarray(self.mount_offset, dtype=float).ravel()

    @property
    def height(self) -> float:
        return float(self.mount_offset[2])

    def _offset_map(self, yaw: float) -> np.ndarray:
        c, s = np.cos(yaw), np.sin(yaw)
        dx, dy, dz = self.mount_offset
        return np.array([c * dx - s * dy, s * dx + c * dy, dz])

    def camera_pose(self, vehicle_pose: np.ndarray) -> CameraPose:
        """Vehicle (x, y, z, pitch, yaw, roll) -> camera pose in the map frame."""
        v = np.asarray(vehicle_pose, dtype=float)
        center = v[:3] + self._offset_map(v[4])
        return CameraPose(center=center, angles=(v[4], v[3], v[5]))

    def vehicle_pose(self, camera: CameraPose) -> np.ndarray:
        """Inverse of camera_pose."""
        pos = camera.center - self._offset_map(camera.yaw)
        return np.array([pos[0], pos[1], pos[2], camera.pitch, camera.yaw, camera.roll])


@dataclass
class VehicleSensing:
    """One vehicle's sensor output for one tick."""

    vehicle_id: str
    stamp: float
    records: list = field(default_factory=list)     # G, V-O, V-V raw records
    recognized: RecognizedFeatures | None = None    # camera detections
    camera: CameraRig | None = None
    yaw_hint: float = 0.0                           # coarse heading prior


@dataclass
class LocalEstimate:
    """Transmitted Gaussian prior on one subject's observable components."""

    subject_id: str
    kind: str  # "vehicle" | "obstacle"
    components: tuple
    mean: np.ndarray
    covariance: np.ndarray

    def to_dict(self) -> dict:
        return {
            "subject": self.subject_id,
            "kind": self.kind,
            "components": list(self.components),
            "mean": [float(v) for v in self.mean],
            "covariance": [[float(c) for c in row] for row in self.covariance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LocalEstimate":
        return cls(
            subject_id=d["subject"],
            kind=d["kind"],
            components=tuple(d["components"]),
            mean=np.asarray(d["mean"], dtype=float),
            covariance=np.asarray(d["covariance"], dtype=float),
        )


@dataclass
class FusionMessage:
    """The distributed-architecture payload, canonically serializable.

    ``pose_mean`` is the sender's full local pose estimate and is used only to
    initialize the host solve (components the sender could not observe carry
    no covariance and enter no factor).
    """

    sender_id: str
    stamp: float
    local_estimates: list = field(default_factory=list)
    shared_observations: list = field(default_factory=list)
    pose_mean: np.ndarray | None = None

    def to_json(self) -> str:
        doc = {
            "sender": self.sender_id,
            "stamp": self.stamp,
            "estimates": [e.to_dict() for e in self.local_estimates],
            "observations": [r.to_dict() for r in self.shared_observations],
            "pose_mean": None if self.pose_mean is None else [float(v) for v in self.pose_mean],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "FusionMessage":
        doc = json.loads(text)
        pose = doc.get("pose_mean")
        return cls(
            sender_id=doc["sender"],
            stamp=float(doc["stamp"]),
            local_estimates=[LocalEstimate.from_dict(d) for d in doc["estimates"]],
            shared_observations=[ObservationRecord.from_dict(d) for d in doc["observations"]],
            pose_mean=None if pose is None else np.asarray(pose, dtype=float),
        )

    @property
    def payload_size(self) -> int:
        """Length in bytes of the canonical serialization."""
        return len(self.to_json().encode())


@dataclass
class FusionConfig:
    mode: FusionMode = FusionMode.DISTRIBUTED
    window: float = 0.1            # fusion window, seconds
    staleness: float = 0.2         # messages older than this are rejected
    share_raw_classes: tuple = (SourceClass.V_O, SourceClass.V_V)
    solver: SolverOptions = field(default_factory=SolverOptions)
    matching: MatchingOptions = field(default_factory=MatchingOptions)
    min_pixel_sigma: float = 0.05  # floor when converting matching info to covariance

    def __post_init__(self):
        self.mode = FusionMode(self.mode)
        if self.window <= 0:
            raise ValueError("fusion window must be positive")
        self.share_raw_classes = tuple(SourceClass(c) for c in self.share_raw_classes)


@dataclass
class LocalResult:
    """Everything a vehicle produces in one tick of local processing."""

    state: DrivingState
    message: FusionMessage
    report: JointSolveReport
    records: list = field(default_factory=list)  # raw + pose pseudo-measurement
    matching_succeeded: bool = False
    matching_report: object = None


def _pose_record_from_matching(vehicle_id, stamp, camera_pose, report, rig,
                               config: FusionConfig) -> ObservationRecord:
    """Wrap a matched camera pose as an M-V pseudo-measurement on the vehicle."""
    value = rig.vehicle_pose(camera_pose)
    sigma_px = max(rig.pixel_sigma, config.min_pixel_sigma)
    cov = None
    if report.pose_information is not None:
        try:
            cov_cam = sigma_px**2 * np.linalg.inv(report.pose_information)
            # camera order (x,y,z,yaw,pitch,roll) -> vehicle (x,y,z,pitch,yaw,roll)
            perm = [0, 1, 2, 4, 3, 5]
            cov = cov_cam[np.ix_(perm, perm)]
            cov = 0.5 * (cov + cov.T) + 1e-10 * np.eye(6)
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            cov = None
    if cov is None:
        cov = np.diag(_FALLBACK_POSE_SIGMA**2)
    return ObservationRecord(SourceClass.M_V, vehicle_id, vehicle_id, stamp, value, cov)


def _run_matching(sensing: VehicleSensing, hd_map: HdMap, config: FusionConfig):
    """Map-match one vehicle's camera frame; None when unusable or failed."""
    if (hd_map is None or sensing.recognized is None or sensing.camera is None
            or sensing.recognized.n_detections == 0):
        return None, None
    gnss = [r for r in sensing.records if r.source_class == SourceClass.G]
    if not gnss:
        return None, None
    guess = np.array([gnss[0].value[0], gnss[0].value[1], 0.0, 0.0, sensing.yaw_hint, 0.0])
    opts = config.matching
    initial = sensing.camera.camera_pose(guess)
    try:
        pose, rep = estimate_pose(hd_map, sensing.recognized, initial,
                                  sensing.camera.intrinsics, opts)
    except (MatchingNonConvergence, UnderConstrainedError):
        return None, None
    record = _pose_record_from_matching(sensing.vehicle_id, sensing.stamp, pose, rep,
                                        sensing.camera, config)
    return record, rep


def _initial_state(records, stamp: float, hints=None) -> DrivingState:
    """Seed a driving state from the records themselves.

    Priority per vehicle: M-V value, then prior hint, then GNSS position.
    Obstacles are seeded by inverting the first relative observation.
    """
    hints = hints or {}
    vehicles: dict[str, np.ndarray] = {}
    obstacles: dict[str, np.ndarray] = {}

    def vehicle_slot(vid):
        if vid not in vehicles:
            vehicles[vid] = np.asarray(hints.get(("vehicle", vid), np.zeros(6)), dtype=float).copy()
        return vehicles[vid]

    for r in records:
        if r.source_class == SourceClass.M_V:
            vehicles[r.subject_id] = r.value.copy()
    for r in records:
        if r.source_class == SourceClass.G:
            v = vehicle_slot(r.subject_id)
            if not np.any(v[:2]):
                v[:2] = r.value
    for r in records:
        if r.source_class in (SourceClass.V_O, SourceClass.V_V):
            obs = vehicle_slot(r.observer_id)
            c, s = np.cos(obs[4]), np.sin(obs[4])
            world = obs[:2] + np.array([[c, -s], [s, c]]) @ r.value
            if r.source_class == SourceClass.V_O:
                if r.subject_id not in obstacles:
                    obstacles[r.subject_id] = np.array([world[0], world[1], 0.0])
            else:
                v = vehicle_slot(r.subject_id)
                if not np.any(v[:2]):
                    v[:2] = world
        elif r.source_class == SourceClass.M_O:
            if r.subject_id not in obstacles:
                obstacles[r.subject_id] = np.array([r.value[0], r.value[1], 0.0])
    return DrivingState(vehicles=vehicles, obstacles=obstacles, stamp=stamp)


def _estimates_from_marginals(solution: DrivingState, blocks: dict, own_id: str) -> list:
    """Build transmittable priors from marginal blocks (own pose first)."""
    out = []
    order = [own_id] + sorted(k for k in blocks if k != own_id)
    for sid in order:
        if sid not in blocks:
            continue
        blk: MarginalBlock = blocks[sid]
        k = int(blk.free_mask.sum())
        if k == 0:
            continue
        if sid in solution.vehicles:
            kind, vec = "vehicle", solution.vehicles[sid]
        elif sid in solution.obstacles:
            kind, vec = "obstacle", solution.obstacles[sid]
        else:
            continue
        comps = tuple(np.asarray(blk.components)[blk.free_mask])
        out.append(LocalEstimate(
            subject_id=sid, kind=kind, components=comps,
            mean=vec[blk.free_mask].copy(), covariance=blk.covariance.copy(),
        ))
    return out


def estimate_to_prior_record(est: LocalEstimate, stamp: float) -> ObservationRecord | None:
    """Convert a transmitted estimate into a prior factor for the host graph.

    Full vehicle poses become M-V pseudo-measurements, planar vehicle estimates
    GNSS-class records, obstacle positions map-frame M-O records. Estimates
    whose components fit none of these are dropped (information on weakly
    observable components is not worth a bespoke factor class).
    """
    comps = tuple(est.components)
    if est.kind == "vehicle" and comps == ("x", "y", "z", "pitch", "yaw", "roll"):
        return ObservationRecord(SourceClass.M_V, est.subject_id, est.subject_id,
                                 stamp, est.mean, est.covariance)
    if est.kind == "vehicle" and comps[:2] == ("x", "y"):
        return ObservationRecord(SourceClass.G, est.subject_id, est.subject_id,
                                 stamp, est.mean[:2], est.covariance[:2, :2])
    if est.kind == "obstacle" and comps[:2] == ("x", "y"):
        return ObservationRecord(SourceClass.M_O, None, est.subject_id,
                                 stamp, est.mean[:2], est.covariance[:2, :2])
    return None


def local_estimate(vehicle_id: str, sensing: VehicleSensing, hd_map: HdMap | None,
                   config: FusionConfig) -> LocalResult:
    """Per-vehicle local solve and message assembly.

    Needs at least one self-localization factor (GNSS or a successful map
    match). When matching fails the message still goes out with a GNSS-grade
    pose prior.
    """
    mv_record, matching_report = _run_matching(sensing, hd_map, config)
    records = list(sensing.records) + ([mv_record] if mv_record is not None else [])
    own_loc = [r for r in records
               if r.subject_id == vehicle_id
               and r.source_class in (SourceClass.G, SourceClass.M_V)]
    if not own_loc:
        raise ValueError(f"vehicle {vehicle_id!r} has no self-localization factor")

    own_hint = np.array([0.0, 0.0, 0.0, 0.0, sensing.yaw_hint, 0.0])
    initial = _initial_state(records, sensing.stamp,
                             hints={("vehicle", vehicle_id): own_hint})
    graph = FactorGraph(initial, records)
    solution, report = solve_joint(graph, initial, config.solver)

    shared = [r for r in records if r.source_class in config.share_raw_classes]
    summarized = [r for r in records if r.source_class not in config.share_raw_classes]
    if shared:
        # transmitted priors must not contain the forwarded records' information
        guard_graph = FactorGraph(solution, summarized)
        guard_solution, _ = solve_joint(guard_graph, solution, config.solver)
        blocks = marginal_covariance(guard_graph, guard_solution)
        estimates = _estimates_from_marginals(guard_solution, blocks, vehicle_id)
    else:
        blocks = marginal_covariance(graph, solution)
        estimates = _estimates_from_marginals(solution, blocks, vehicle_id)

    message = FusionMessage(
        sender_id=vehicle_id,
        stamp=sensing.stamp,
        local_estimates=estimates,
        shared_observations=shared,
        pose_mean=solution.vehicles[vehicle_id].copy(),
    )
    return LocalResult(
        state=solution, message=message, report=report, records=records,
        matching_succeeded=mv_record is not None, matching_report=matching_report,
    )


def host_fuse(host_id: str, own_sensing: VehicleSensing, inbox, hd_map: HdMap | None,
              config: FusionConfig, own_result: LocalResult | None = None):
    """Host-side global refinement over own sensing plus received messages.

    Returns (DrivingState, JointSolveReport, stats dict). Received local
    estimates enter as Gaussian prior factors; shared raw observations enter
    as ordinary factors; received means provide the initial value. Passing the
    host's own LocalResult reuses its records (map matching runs once).
    """
    if own_result is not None:
        records = list(own_result.records)
    else:
        mv_record, _ = _run_matching(own_sensing, hd_map, config)
        records = list(own_sensing.records) + ([mv_record] if mv_record is not None else [])

    fresh, n_stale = [], 0
    for msg in sorted(inbox, key=lambda m: m.sender_id):
        if abs(own_sensing.stamp - msg.stamp) <= config.staleness:
            fresh.append(msg)
        else:
            n_stale += 1

    hints = {("vehicle", host_id): np.array([0.0, 0.0, 0.0, 0.0, own_sensing.yaw_hint, 0.0])}
    names = ("x", "y", "z", "pitch", "yaw", "roll")
    prior_records = []
    for msg in fresh:
        for est in msg.local_estimates:
            rec = estimate_to_prior_record(est, msg.stamp)
            if rec is not None:
                prior_records.append(rec)
            if est.kind == "vehicle":
                vec = np.zeros(6)
                for comp, m in zip(est.components, est.mean):
                    vec[names.index(comp)] = m
                hints[("vehicle", est.subject_id)] = vec
        if msg.pose_mean is not None:
            hints[("vehicle", msg.sender_id)] = np.asarray(msg.pose_mean, dtype=float)
        prior_records.extend(msg.shared_observations)

    factors = records + prior_records
    initial = _initial_state(factors, own_sensing.stamp, hints=hints)
    graph = FactorGraph(initial, factors)
    solution, report = solve_joint(graph, initial, config.solver)
    stats = {
        "n_messages": len(fresh),
        "n_stale_rejected": n_stale,
        "received_bytes": sum(m.payload_size for m in fresh),
    }
    return solution, report, stats


def centralized_fuse(all_sensing, hd_map: HdMap | None, config: FusionConfig,
                     host_id: str | None = None):
    """One joint solve over every vehicle's raw observations.

    The host runs map matching for each vehicle from the transmitted camera
    detections; transmitted bytes count the full raw payload (records plus
    detections) of every non-host vehicle.
    """
    all_sensing = sorted(all_sensing, key=lambda s: s.vehicle_id)
    if host_id is None:
        host_id = all_sensing[0].vehicle_id
    factors = []
    transmitted = 0
    hints = {}
    for sensing in all_sensing:
        mv_record, _ = _run_matching(sensing, hd_map, config)
        factors.extend(sensing.records)
        if mv_record is not None:
            factors.append(mv_record)
        hints[("vehicle", sensing.vehicle_id)] = np.array(
            [0.0, 0.0, 0.0, 0.0, sensing.yaw_hint, 0.0])
        if sensing.vehicle_id != host_id:
            transmitted += sensing_payload_bytes(sensing)
    initial = _initial_state(factors, all_sensing[0].stamp, hints=hints)
    graph = FactorGraph(initial, factors)
    solution, report = solve_joint(graph, initial, config.solver)
    stats = {"transmitted_bytes": transmitted, "n_vehicles": len(all_sensing)}
    return solution, report, stats


def sensing_payload_bytes(sensing: VehicleSensing) -> int:
    """Serialized size of one vehicle's raw sensing (centralized transmission)."""
    doc = {
        "vehicle": sensing.vehicle_id,
        "stamp": sensing.stamp,
        "records": [r.to_dict() for r in sensing.records],
    }
    if sensing.recognized is not None:
        rec = sensing.recognized
        doc["recognized"] = {
            "image": list(rec.image_size),
            "points": [[float(p.uv[0]), float(p.uv[1]), p.semantic_class.value]
                       for p in rec.points],
            "lines": [[float(l.line.p1[0]), float(l.line.p1[1]),
                       float(l.line.p2[0]), float(l.line.p2[1]), l.semantic_class.value]
                      for l in rec.lines],
            "regions": [{"class": r.semantic_class.value, "rle": rle_encode(r.mask)}
                        for r in rec.regions],
        }
    return len(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode())
