"""Scenario generation, sensor simulation and Monte-Carlo trials.

Scenarios are scripted: agents follow time-stamped waypoint trajectories on a
straight two-lane road corridor, the map carries lamp posts, traffic lights,
signs and lane lines. Sensing is simulated from ground truth: GNSS with
Gaussian noise, a body-frame relative-position sensor with range, field of
view and rectangle occlusion, and camera feature detections (pixel noise)
feeding the map-matching localizer.

All randomness flows from seeded generators derived per (seed, trial, tick,
vehicle), so results are bit-reproducible regardless of execution order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .estimator import DrivingState
from .fusion import (
    CameraRig,
    FusionConfig,
    FusionMode,
    LocalResult,
    VehicleSensing,
    centralized_fuse,
    host_fuse,
    local_estimate,
)
from .geometry import CameraIntrinsics, project_points, rasterize_polyline, resample_polyline, wrap_angle
from .map_matching import (
    DetectedLine,
    DetectedPoint,
    DetectedRegion,
    LaneModel,
    MatchingOptions,
    RecognizedFeatures,
    select_lane_model,
)
from .map_model import FeatureKind, HdMap, MapFeature, SemanticClass, map_from_dict, map_to_dict
from .geometry import ImageLine
from .observations import ObservationRecord, SourceClass

__all__ = [
    "AgentKind",
    "Trajectory",
    "Agent",
    "Scenario",
    "SensorSuite",
    "TrialConfig",
    "TickResult",
    "TrialResult",
    "PRESET_NAMES",
    "build_preset",
    "sense",
    "run_trial",
    "run_monte_carlo",
    "load_scenario",
    "save_scenario",
    "scenario_to_dict",
    "scenario_from_dict",
    "default_suite",
    "build_matching_demo",
    "write_trials_csv",
    "trial_rows",
    "TRIAL_CSV_COLUMNS",
]

# covariance floor so zero-noise runs still produce valid Gaussian factors
MIN_RECORD_SIGMA = 1e-4

AGENT_SIZES = {"connected": (4.6, 1.8), "vehicle": (4.6, 1.8), "pedestrian": (0.5, 0.5)}

PRESET_NAMES = ("urban", "suburban", "overlap", "blindspot1", "blindspot2")


class AgentKind(str, Enum):
    CONNECTED = "connected"
    OBSTACLE_VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"


@dataclass
class Trajectory:
    """Piecewise-linear scripted motion; yaw follows the segment direction
    unless given explicitly."""

    times: np.ndarray
    positions: np.ndarray  # (n, 3)
    yaws: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[1] == 2:
            self.positions = np.hstack([self.positions, np.zeros((len(self.positions), 1))])
        if self.yaws is not None:
            self.yaws = np.asarray(self.yaws, dtype=float).ravel()
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions must align")
        if len(self.times) < 1 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def pose_at(self, t: float) -> np.ndarray:
        """Interpolated (x, y, z, pitch, yaw, roll) at time t (clamped)."""
        ts, ps = self.times, self.positions
        pos = np.array([np.interp(t, ts, ps[:, k]) for k in range(3)])
        if self.yaws is not None:
            yaw = float(np.interp(t, ts, np.unwrap(self.yaws)))
        elif len(ts) == 1:
            yaw = 0.0
        else:
            i = min(np.searchsorted(ts, t, side="right"), len(ts) - 1)
            d = ps[i, :2] - ps[i - 1, :2]
            yaw = math.atan2(d[1], d[0]) if np.linalg.norm(d) > 1e-12 else 0.0
        return np.array([pos[0], pos[1], pos[2], 0.0, wrap_angle(yaw), 0.0])

    @staticmethod
    def straight(start, velocity, duration: float) -> "Trajectory":
        start = np.asarray(start, dtype=float)
        velocity = np.asarray(velocity, dtype=float)
        end = start + velocity * duration
        if np.linalg.norm(velocity[:2]) < 1e-12:
            yaw = 0.0
        else:
            yaw = math.atan2(velocity[1], velocity[0])
        return Trajectory(times=[0.0, duration],
                          positions=np.stack([start, end]),
                          yaws=[yaw, yaw])


@dataclass
class Agent:
    id: str
    kind: AgentKind
    trajectory: Trajectory

    def __post_init__(self):
        self.kind = AgentKind(self.kind)

    @property
    def size(self):
        return AGENT_SIZES[self.kind.value]


@dataclass
class Scenario:
    name: str
    hd_map: HdMap
    agents: list
    duration: float
    tick: float = 0.1

    def __post_init__(self):
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        if not any(a.kind == AgentKind.CONNECTED for a in self.agents):
            raise ValueError("a scenario needs at least one connected vehicle")
        for a in self.agents:
            if a.trajectory.times[0] > 0.0 or a.trajectory.times[-1] < self.duration - 1e-9:
                raise ValueError(f"agent {a.id!r} trajectory does not cover the duration")

    @property
    def connected_ids(self) -> list:
        return [a.id for a in self.agents if a.kind == AgentKind.CONNECTED]

    @property
    def target_ids(self) -> list:
        return [a.id for a in self.agents if a.kind != AgentKind.CONNECTED]

    def agent(self, agent_id: str) -> Agent:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    def times(self) -> np.ndarray:
        n = int(round(self.duration / self.tick))
        return np.round(np.arange(n + 1) * self.tick, 9)


@dataclass
class SensorSuite:
    """Per-vehicle sensor models and noise levels.

    Defaults are tuned so desk-scale runs land near decimeter accuracy: a
    consumer GNSS receiver, a 0.3 m relative perception sensor and ~1 px
    camera detection noise. They are settings, not measurements.
    """

    camera: CameraRig = field(default_factory=lambda: CameraRig(
        CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)))
    point_sigma_px: float = 1.0
    line_sigma_px: float = 1.0
    camera_min_depth: float = 2.0
    camera_max_depth: float = 80.0
    perception_range: float = 50.0
    perception_fov_deg: float = 120.0
    relative_sigma: float = 0.3
    occlusion: bool = True
    gnss_sigma: float = 1.5
    gnss_bias_walk: float = 0.0   # random-walk hook, off by default
    yaw_hint_sigma: float = math.radians(2.0)
    lane_sample_spacing: float = 2.0
    lane_fit_outlier_px: float = 3.0
    lane_mask_thickness: float = 3.0

    def scaled(self, factor: float) -> "SensorSuite":
        """Copy with all noise magnitudes multiplied by ``factor`` (0 = ideal)."""
        out = SensorSuite(
            camera=CameraRig(self.camera.intrinsics, self.camera.mount_offset.copy(),
                             max(self.camera.pixel_sigma * factor, 0.0)),
            point_sigma_px=self.point_sigma_px * factor,
            line_sigma_px=self.line_sigma_px * factor,
            camera_min_depth=self.camera_min_depth,
            camera_max_depth=self.camera_max_depth,
            perception_range=self.perception_range,
            perception_fov_deg=self.perception_fov_deg,
            relative_sigma=self.relative_sigma * factor,
            occlusion=self.occlusion,
            gnss_sigma=self.gnss_sigma * factor,
            gnss_bias_walk=self.gnss_bias_walk * factor,
            yaw_hint_sigma=self.yaw_hint_sigma * factor,
            lane_sample_spacing=self.lane_sample_spacing,
            lane_fit_outlier_px=self.lane_fit_outlier_px,
            lane_mask_thickness=self.lane_mask_thickness,
        )
        return out


@dataclass
class TrialConfig:
    seed: int
    n_trials: int = 1
    preset: str = "urban"

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("need at least one trial")


def default_suite() -> SensorSuite:
    return SensorSuite()


# ---------------------------------------------------------------------------
# presets

_LANE_YS = (-3.5, 0.0, 3.5)


def _lane_features(x0: float, x1: float, step: float = 8.0, curve: float = 0.0):
    feats = []
    xs = np.arange(x0, x1 + 1e-9, step)
    for j, y in enumerate(_LANE_YS):
        pts = [[x, y + curve * ((x - x0) / max(x1 - x0, 1.0)) ** 2, 0.0] for x in xs]
        feats.append(MapFeature(f"lane{j}", FeatureKind.SURFACE, SemanticClass.LANE_LINE, pts))
    return feats


def _lamp(i, x, y, h=5.0):
    return MapFeature(f"lamp{i:02d}", FeatureKind.LINE, SemanticClass.LAMP_POST,
                      [[x, y, 0.0], [x, y, h]])


def _point_feature(prefix, i, x, y, z, cls):
    return MapFeature(f"{prefix}{i}", FeatureKind.POINT, cls, [[x, y, z]])


def _road_scene(n_lamps: int, n_lights: int, n_signs: int, x0=-60.0, x1=170.0):
    """Static features along the corridor; density set by the counts."""
    feats = _lane_features(x0, x1)
    lamp_x = np.linspace(x0 + 12.0, x1 - 12.0, n_lamps)
    for i, x in enumerate(lamp_x):
        y = -6.0 if i % 2 == 0 else 6.0
        feats.append(_lamp(i, round(float(x), 3), y))
    light_x = np.linspace(x0 + 30.0, x1 - 20.0, max(n_lights, 1))[:n_lights]
    for i, x in enumerate(light_x):
        y = 5.2 if i % 2 == 0 else -5.2
        feats.append(_point_feature("light", i, round(float(x), 3), y, 4.5,
                                    SemanticClass.TRAFFIC_LIGHT))
    sign_x = np.linspace(x0 + 20.0, x1 - 30.0, max(n_signs, 1))[:n_signs]
    for i, x in enumerate(sign_x):
        y = -5.6 if i % 2 == 0 else 5.6
        feats.append(_point_feature("sign", i, round(float(x), 3), y, 2.5,
                                    SemanticClass.TRAFFIC_SIGN))
    return feats


def _mk_map(feats) -> HdMap:
    pts = np.vstack([f.control_points[:, :2] for f in feats])
    bounds = (float(pts[:, 0].min()), float(pts[:, 1].min()),
              float(pts[:, 0].max()), float(pts[:, 1].max()))
    return HdMap(features=tuple(feats), frame_origin=(39.9, 116.3, 40.0), bounds=bounds)


def build_preset(name: str) -> Scenario:
    """Deterministic scenario for one of the named topologies."""
    name = str(name).lower()
    if name == "urban":
        return _preset_road("urban", n_lamps=14, n_lights=4, n_signs=4)
    if name == "suburban":
        return _preset_road("suburban", n_lamps=7, n_lights=2, n_signs=2)
    if name == "overlap":
        return _preset_overlap()
    if name == "blindspot1":
        return _preset_blindspot1()
    if name == "blindspot2":
        return _preset_blindspot2()
    raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


def _preset_road(name, n_lamps, n_lights, n_signs) -> Scenario:
    duration = 3.0
    hd = _mk_map(_road_scene(n_lamps, n_lights, n_signs))
    agents = [
        Agent("cv1", AgentKind.CONNECTED, Trajectory.straight([2.0, -1.75, 0.0], [10.0, 0.0, 0.0], duration)),
        Agent("cv2", AgentKind.CONNECTED, Trajectory.straight([32.0, -1.75, 0.0], [10.0, 0.0, 0.0], duration)),
        Agent("cv3", AgentKind.CONNECTED, Trajectory.straight([120.0, 1.75, 0.0], [-10.0, 0.0, 0.0], duration)),
        Agent("cv4", AgentKind.CONNECTED, Trajectory.straight([88.0, 1.75, 0.0], [-10.0, 0.0, 0.0], duration)),
    ]
    # 6 obstacle vehicles spread over both lanes, 8 pedestrians on the walkways
    veh = [
        ((16.0, -1.75), (9.0, 0.0)), ((52.0, -1.75), (8.0, 0.0)), ((70.0, -1.75), (9.5, 0.0)),
        ((62.0, 1.75), (-9.0, 0.0)), ((30.0, 1.75), (-8.5, 0.0)), ((104.0, 1.75), (-9.0, 0.0)),
    ]
    for i, (p, v) in enumerate(veh):
        agents.append(Agent(f"ov{i+1}", AgentKind.OBSTACLE_VEHICLE,
                            Trajectory.straight([p[0], p[1], 0.0], [v[0], v[1], 0.0], duration)))
    ped = [
        ((12.0, 5.0), (1.2, 0.0)), ((26.0, -5.0), (1.2, 0.0)), ((40.0, 5.0), (-1.2, 0.0)),
        ((58.0, -5.0), (1.0, 0.0)), ((76.0, 5.0), (1.2, 0.0)), ((88.0, -5.0), (-1.2, 0.0)),
        ((100.0, 5.0), (1.2, 0.0)), ((116.0, -5.0), (1.0, 0.0)),
    ]
    for i, (p, v) in enumerate(ped):
        agents.append(Agent(f"ped{i+1}", AgentKind.PEDESTRIAN,
                            Trajectory.straight([p[0], p[1], 0.0], [v[0], v[1], 0.0], duration)))
    return Scenario(name=name, hd_map=hd, agents=agents, duration=duration)


def _preset_overlap() -> Scenario:
    # the target stays inside both connected vehicles' perception all the time
    duration = 3.0
    hd = _mk_map(_road_scene(n_lamps=8, n_lights=2, n_signs=2, x0=-20.0, x1=90.0))
    agents = [
        Agent("cv1", AgentKind.CONNECTED, Trajectory.straight([0.0, -1.75, 0.0], [8.0, 0.0, 0.0], duration)),
        Agent("cv2", AgentKind.CONNECTED, Trajectory.straight([6.0, 1.75, 0.0], [5.0, 0.0, 0.0], duration)),
        Agent("target", AgentKind.OBSTACLE_VEHICLE, Trajectory.straight([18.0, 0.0, 0.0], [5.0, 0.0, 0.0], duration)),
    ]
    return Scenario(name="overlap", hd_map=hd, agents=agents, duration=duration)


def _preset_blindspot1() -> Scenario:
    # ego's line of sight to the target passes through the connected vehicle
    duration = 3.0
    hd = _mk_map(_road_scene(n_lamps=8, n_lights=2, n_signs=2, x0=-20.0, x1=90.0))
    v = [8.0, 0.0, 0.0]
    agents = [
        Agent("cv1", AgentKind.CONNECTED, Trajectory.straight([0.0, -1.75, 0.0], v, duration)),
        Agent("cv2", AgentKind.CONNECTED, Trajectory.straight([12.0, -1.75, 0.0], v, duration)),
        Agent("target", AgentKind.OBSTACLE_VEHICLE, Trajectory.straight([24.0, -1.75, 0.0], v, duration)),
    ]
    return Scenario(name="blindspot1", hd_map=hd, agents=agents, duration=duration)


def _preset_blindspot2() -> Scenario:
    # connected vehicle and target both behind the ego, outside its field of view
    duration = 3.0
    hd = _mk_map(_road_scene(n_lamps=10, n_lights=2, n_signs=2, x0=-80.0, x1=90.0))
    v = [8.0, 0.0, 0.0]
    agents = [
        Agent("cv1", AgentKind.CONNECTED, Trajectory.straight([0.0, -1.75, 0.0], v, duration)),
        Agent("cv2", AgentKind.CONNECTED, Trajectory.straight([-35.0, -1.75, 0.0], v, duration)),
        Agent("target", AgentKind.OBSTACLE_VEHICLE, Trajectory.straight([-20.0, -1.75, 0.0], v, duration)),
    ]
    return Scenario(name="blindspot2", hd_map=hd, agents=agents, duration=duration)


# ---------------------------------------------------------------------------
# sensing

def _body_frame(pose6, point_xy) -> np.ndarray:
    c, s = math.cos(pose6[4]), math.sin(pose6[4])
    d = np.asarray(point_xy, dtype=float) - pose6[:2]
    return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])


def _segment_hits_rect(p0, p1, center, yaw, size) -> bool:
    """Does the open segment p0->p1 cross the oriented rectangle?"""
    c, s = math.cos(yaw), math.sin(yaw)
    half_l, half_w = size[0] / 2.0, size[1] / 2.0

    def to_rect(p):
        d = np.asarray(p, dtype=float) - center
        return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])

    a, b = to_rect(p0), to_rect(p1)
    d = b - a
    t0, t1 = 0.0, 1.0
    for k, half in ((0, half_l), (1, half_w)):
        if abs(d[k]) < 1e-12:
            if abs(a[k]) > half:
                return False
            continue
        lo = (-half - a[k]) / d[k]
        hi = (half - a[k]) / d[k]
        if lo > hi:
            lo, hi = hi, lo
        t0, t1 = max(t0, lo), min(t1, hi)
        if t0 > t1:
            return False
    # clip interval strictly inside the segment: endpoints touching don't occlude
    return t1 > 1e-9 and t0 < 1.0 - 1e-9


def visible_targets(scenario: Scenario, vehicle_id: str, t: float,
                    suite: SensorSuite) -> list:
    """Agent ids inside range and field of view and not occluded."""
    me = scenario.agent(vehicle_id)
    my_pose = me.trajectory.pose_at(t)
    half_fov = math.radians(suite.perception_fov_deg) / 2.0
    poses = {a.id: a.trajectory.pose_at(t) for a in scenario.agents}
    out = []
    for a in scenario.agents:
        if a.id == vehicle_id:
            continue
        rel = _body_frame(my_pose, poses[a.id][:2])
        dist = float(np.linalg.norm(rel))
        if dist > suite.perception_range or dist < 1e-9:
            continue
        if abs(math.atan2(rel[1], rel[0])) > half_fov:
            continue
        if suite.occlusion:
            blocked = False
            for other in scenario.agents:
                if other.id in (vehicle_id, a.id):
                    continue
                op = poses[other.id]
                if _segment_hits_rect(my_pose[:2], poses[a.id][:2], op[:2], op[4], other.size):
                    blocked = True
                    break
            if blocked:
                continue
        out.append(a.id)
    return out


def _detect_map_features(hd_map: HdMap, cam_pose, suite: SensorSuite, rng,
                         matching_opts: MatchingOptions) -> RecognizedFeatures:
    K = suite.camera.intrinsics
    w, h = K.width, K.height
    points, lines, regions = [], [], []

    def in_image(uv):
        return 0.0 <= uv[0] < w and 0.0 <= uv[1] < h

    for f in hd_map:
        if f.kind == FeatureKind.POINT:
            uv, depth = project_points(f.control_points[:1], cam_pose, K)
            if (depth[0] < suite.camera_min_depth or depth[0] > suite.camera_max_depth
                    or not in_image(uv[0])):
                continue
            noisy = uv[0] + rng.normal(0.0, suite.point_sigma_px, 2) if suite.point_sigma_px > 0 else uv[0]
            points.append(DetectedPoint(noisy, f.semantic_class))
        elif f.kind == FeatureKind.LINE:
            uv, depth = project_points(f.control_points, cam_pose, K)
            if np.any(depth < suite.camera_min_depth) or np.any(depth > suite.camera_max_depth):
                continue
            if not (in_image(uv[0]) and in_image(uv[-1])):
                continue
            n = rng.normal(0.0, suite.line_sigma_px, (2, 2)) if suite.line_sigma_px > 0 else 0.0
            p1, p2 = uv[0] + np.atleast_2d(n)[0], uv[-1] + np.atleast_2d(n)[-1]
            if np.linalg.norm(p2 - p1) > 1e-6:
                lines.append(DetectedLine(ImageLine(p1, p2), f.semantic_class))
        else:
            samples = resample_polyline(f.control_points, suite.lane_sample_spacing)
            uv, depth = project_points(samples, cam_pose, K)
            keep = [(u, d) for u, d in zip(uv, depth)
                    if suite.camera_min_depth <= d <= suite.camera_max_depth and in_image(u)]
            if len(keep) < 4:
                continue
            pix = np.array([u for u, _ in keep])
            if suite.line_sigma_px > 0:
                pix = pix + rng.normal(0.0, suite.line_sigma_px, pix.shape)
            # orthogonal line fit; outlier share decides line vs region detection
            mean = pix.mean(axis=0)
            centered = pix - mean
            _, _, vt = np.linalg.svd(centered, full_matrices=False)
            direction = vt[0]
            offsets = centered @ np.array([-direction[1], direction[0]])
            ratio = float(np.mean(np.abs(offsets) > suite.lane_fit_outlier_px))
            if select_lane_model(ratio, matching_opts) == LaneModel.LINEAR:
                along = centered @ direction
                p1 = mean + along.min() * direction
                p2 = mean + along.max() * direction
                if np.linalg.norm(p2 - p1) > 1e-6:
                    lines.append(DetectedLine(ImageLine(p1, p2), f.semantic_class))
            else:
                mask = rasterize_polyline(pix, w, h, thickness=suite.lane_mask_thickness)
                if mask.any():
                    regions.append(DetectedRegion(mask, f.semantic_class))
    return RecognizedFeatures(image_size=(w, h), points=points, lines=lines, regions=regions)


def sense(scenario: Scenario, vehicle_id: str, t: float, suite: SensorSuite,
          rng: np.random.Generator,
          matching_opts: MatchingOptions | None = None) -> VehicleSensing:
    """Simulate one vehicle's sensors at time t.

    Produces the GNSS record, V-O / V-V relative records for every visible
    agent, and camera feature detections for the map-matching localizer.
    """
    matching_opts = matching_opts or MatchingOptions()
    me = scenario.agent(vehicle_id)
    my_pose = me.trajectory.pose_at(t)
    records = []

    gnss_sigma = max(suite.gnss_sigma, MIN_RECORD_SIGMA)
    gnss = my_pose[:2] + (rng.normal(0.0, suite.gnss_sigma, 2) if suite.gnss_sigma > 0 else 0.0)
    records.append(ObservationRecord(SourceClass.G, vehicle_id, vehicle_id, t,
                                     gnss, np.eye(2) * gnss_sigma**2))

    rel_sigma = max(suite.relative_sigma, MIN_RECORD_SIGMA)
    for aid in visible_targets(scenario, vehicle_id, t, suite):
        target = scenario.agent(aid)
        rel = _body_frame(my_pose, target.trajectory.pose_at(t)[:2])
        if suite.relative_sigma > 0:
            rel = rel + rng.normal(0.0, suite.relative_sigma, 2)
        cls = SourceClass.V_V if target.kind == AgentKind.CONNECTED else SourceClass.V_O
        records.append(ObservationRecord(cls, vehicle_id, aid, t, rel,
                                         np.eye(2) * rel_sigma**2))

    cam_pose = suite.camera.camera_pose(my_pose)
    recognized = _detect_map_features(scenario.hd_map, cam_pose, suite, rng, matching_opts)
    yaw_hint = my_pose[4] + (rng.normal(0.0, suite.yaw_hint_sigma) if suite.yaw_hint_sigma > 0 else 0.0)
    return VehicleSensing(
        vehicle_id=vehicle_id,
        stamp=t,
        records=records,
        recognized=recognized,
        camera=suite.camera,
        yaw_hint=yaw_hint,
    )


# ---------------------------------------------------------------------------
# trials

@dataclass
class TickResult:
    index: int
    t: float
    truth: dict                      # id -> pose6 (vehicles) / pos3 (targets)
    gnss: dict                       # vehicle id -> raw GNSS (2,)
    locals: dict                     # vehicle id -> DrivingState
    fused: DrivingState | None
    observed: dict                   # vehicle id -> list of target ids it saw
    bandwidth_bytes: int = 0
    failed: bool = False
    error: str | None = None


@dataclass
class TrialResult:
    trial_index: int
    base_seed: int
    mode: str
    scenario_name: str
    host_id: str = ""
    ticks: list = field(default_factory=list)

    @property
    def failed_ticks(self) -> int:
        return sum(1 for tk in self.ticks if tk.failed)


def _stream(base_seed: int, trial: int, tick: int, lane: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((base_seed, trial, tick, lane)))


def _truth_at(scenario: Scenario, t: float) -> dict:
    out = {}
    for a in scenario.agents:
        pose = a.trajectory.pose_at(t)
        out[a.id] = pose if a.kind == AgentKind.CONNECTED else pose[:3]
    return out


def run_trial(scenario: Scenario, suites: dict, config: FusionConfig, seed: int,
              trial_index: int = 0) -> TrialResult:
    """One simulated run: sense, locally estimate, publish, fuse, record.

    ``suites`` maps connected-vehicle id to its SensorSuite (a single suite is
    accepted and shared). Per-tick failures are recorded, not raised.
    """
    cvs = scenario.connected_ids
    if not isinstance(suites, dict):
        suites = {vid: suites for vid in cvs}
    host = cvs[0]
    result = TrialResult(trial_index=trial_index, base_seed=seed, mode=config.mode.value,
                         scenario_name=scenario.name, host_id=host)

    for k, t in enumerate(scenario.times()):
        sensings = {}
        for vi, vid in enumerate(cvs):
            rng = _stream(seed, trial_index, k, vi)
            sensings[vid] = sense(scenario, vid, float(t), suites[vid], rng,
                                  matching_opts=config.matching)
        tick = TickResult(
            index=k, t=float(t), truth=_truth_at(scenario, float(t)),
            gnss={vid: next(r.value.copy() for r in sensings[vid].records
                            if r.source_class == SourceClass.G) for vid in cvs},
            locals={}, fused=None,
            observed={vid: sorted(r.subject_id for r in sensings[vid].records
                                  if r.source_class in (SourceClass.V_O, SourceClass.V_V))
                      for vid in cvs},
        )
        try:
            results = {}
            for vid in cvs:
                results[vid] = local_estimate(vid, sensings[vid], scenario.hd_map, config)
                tick.locals[vid] = results[vid].state
            if config.mode == FusionMode.DISTRIBUTED:
                inbox = [results[vid].message for vid in cvs if vid != host]
                fused, _, stats = host_fuse(host, sensings[host], inbox, scenario.hd_map,
                                            config, own_result=results[host])
                tick.bandwidth_bytes = stats["received_bytes"]
            else:
                fused, _, stats = centralized_fuse(list(sensings.values()), scenario.hd_map,
                                                   config, host_id=host)
                tick.bandwidth_bytes = stats["transmitted_bytes"]
            tick.fused = fused
        except Exception as exc:  # keep the trial alive, flag the tick
            tick.failed = True
            tick.error = f"{type(exc).__name__}: {exc}"
        result.ticks.append(tick)
    return result


def run_monte_carlo(scenario: Scenario, suites, config: FusionConfig, n_trials: int,
                    base_seed: int) -> list:
    """Independent trials with per-trial derived random streams."""
    if n_trials < 1:
        raise ValueError("need at least one trial")
    return [run_trial(scenario, suites, config, base_seed, trial_index=i)
            for i in range(n_trials)]


# ---------------------------------------------------------------------------
# trial CSV output

TRIAL_CSV_COLUMNS = ("trial", "tick", "time", "source", "state_id", "kind", "visible",
                     "true_x", "true_y", "est_x", "est_y", "err_body_x", "err_body_y")


def _fmt(v) -> str:
    return repr(float(v))


def _body_error(obs_true, obs_est, tgt_true, tgt_est) -> tuple:
    e = _body_frame(obs_est, tgt_est[:2]) - _body_frame(obs_true, tgt_true[:2])
    return float(e[0]), float(e[1])


def trial_rows(results):
    """Flatten trial results into per-(trial, tick, source, state) dicts.

    Sources: ``fused`` (the cooperative output, target errors in the host body
    frame), ``local:<vid>`` (that vehicle's own solve, target errors in its
    frame) and ``gnss:<vid>`` (the raw receiver position). Failed ticks emit a
    single marker row with source ``failed``.
    """
    for res in results:
        host = res.host_id
        for tk in res.ticks:
            if tk.failed:
                yield {"trial": res.trial_index, "tick": tk.index, "time": tk.t,
                       "source": "failed", "state_id": "", "kind": "", "visible": 0,
                       "true_x": None, "true_y": None, "est_x": None, "est_y": None,
                       "err_body_x": None, "err_body_y": None}
                continue

            def row(source, sid, kind, visible, true_xy, est_xy, eb=(None, None)):
                return {"trial": res.trial_index, "tick": tk.index, "time": tk.t,
                        "source": source, "state_id": sid, "kind": kind,
                        "visible": int(visible),
                        "true_x": float(true_xy[0]), "true_y": float(true_xy[1]),
                        "est_x": float(est_xy[0]), "est_y": float(est_xy[1]),
                        "err_body_x": eb[0], "err_body_y": eb[1]}

            for vid, g in sorted(tk.gnss.items()):
                yield row(f"gnss:{vid}", vid, "vehicle", 1, tk.truth[vid][:2], g)
            for vid, st in sorted(tk.locals.items()):
                truth_v = tk.truth[vid]
                est_v = st.vehicles.get(vid)
                if est_v is None:
                    continue
                yield row(f"local:{vid}", vid, "vehicle", 1, truth_v[:2], est_v[:2])
                for tid in sorted(st.obstacles):
                    if tid not in tk.truth:
                        continue
                    eb = _body_error(truth_v, est_v, tk.truth[tid], st.obstacles[tid])
                    yield row(f"local:{vid}", tid, "target",
                              tid in tk.observed.get(vid, []),
                              tk.truth[tid][:2], st.obstacles[tid][:2], eb)
            if tk.fused is not None:
                st = tk.fused
                anyone = {tid for v in tk.observed.values() for tid in v}
                for vid in sorted(st.vehicles):
                    if vid in tk.truth:
                        yield row("fused", vid, "vehicle", 1,
                                  tk.truth[vid][:2], st.vehicles[vid][:2])
                host_est = st.vehicles.get(host)
                if host_est is not None:
                    for tid in sorted(st.obstacles):
                        if tid not in tk.truth:
                            continue
                        eb = _body_error(tk.truth[host], host_est,
                                         tk.truth[tid], st.obstacles[tid])
                        yield row("fused", tid, "target", tid in anyone,
                                  tk.truth[tid][:2], st.obstacles[tid][:2], eb)


def write_trials_csv(results, path) -> None:
    """One CSV row per (trial, tick, source, state), reproducible byte for byte."""
    with open(path, "w") as fh:
        fh.write(",".join(TRIAL_CSV_COLUMNS) + "\n")
        for r in trial_rows(results):
            cells = []
            for col in TRIAL_CSV_COLUMNS:
                v = r[col]
                if v is None:
                    cells.append("")
                elif col in ("trial", "tick", "visible"):
                    cells.append(str(int(v)))
                elif isinstance(v, str):
                    cells.append(v)
                else:
                    cells.append(_fmt(v))
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# scenario files

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "name": s.name,
        "duration": s.duration,
        "tick": s.tick,
        "map": map_to_dict(s.hd_map),
        "agents": [
            {
                "id": a.id,
                "kind": a.kind.value,
                "trajectory": {
                    "times": [float(v) for v in a.trajectory.times],
                    "positions": [[float(c) for c in p] for p in a.trajectory.positions],
                    "yaws": None if a.trajectory.yaws is None
                            else [float(v) for v in a.trajectory.yaws],
                },
            }
            for a in s.agents
        ],
    }


def scenario_from_dict(doc: dict) -> Scenario:
    agents = [
        Agent(
            id=a["id"], kind=AgentKind(a["kind"]),
            trajectory=Trajectory(
                times=np.asarray(a["trajectory"]["times"], dtype=float),
                positions=np.asarray(a["trajectory"]["positions"], dtype=float),
                yaws=None if a["trajectory"].get("yaws") is None
                     else np.asarray(a["trajectory"]["yaws"], dtype=float),
            ),
        )
        for a in doc["agents"]
    ]
    return Scenario(name=doc["name"], hd_map=map_from_dict(doc["map"]), agents=agents,
                    duration=float(doc["duration"]), tick=float(doc.get("tick", 0.1)))


def save_scenario(s: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(s), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# bundled single-frame localization demo (also used by tests)

def build_matching_demo(sparse: bool = False):
    """Synthetic single-frame scene: map, true camera pose and intrinsics.

    The full variant has 4 lamp posts, 2 lane lines and a traffic sign; the
    sparse variant keeps only 3 lamp posts, which leaves camera height blind
    without the ground constraint.
    """
    K = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)
    true_pose_vec = np.array([0.0, 0.0, 1.5, 0.0, 0.0, 0.0])
    poles = [(9.0, -3.4), (12.0, 4.2), (17.0, -2.0)] if sparse else \
            [(9.0, -3.4), (12.0, 4.2), (16.0, -8.0), (21.0, 3.2)]
    feats = [MapFeature(f"pole{i}", FeatureKind.LINE, SemanticClass.LAMP_POST,
                        [[x, y, 0.0], [x, y, 4.0]]) for i, (x, y) in enumerate(poles)]
    if not sparse:
        for j, y in enumerate((-1.75, 1.75)):
            pts = [[x, y, 0.0] for x in np.arange(6.0, 30.1, 2.0)]
            feats.append(MapFeature(f"lane{j}", FeatureKind.SURFACE, SemanticClass.LANE_LINE, pts))
        feats.append(MapFeature("sign0", FeatureKind.POINT, SemanticClass.TRAFFIC_SIGN,
                                [[15.0, 1.0, 2.5]]))
    hd = _mk_map(feats)
    from .geometry import CameraPose
    return hd, CameraPose(true_pose_vec[:3], (0.0, 0.0, 0.0)), K


def write_preset_files(out_dir) -> list:
    """Write every preset scenario as a JSON file; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name in PRESET_NAMES:
        path = os.path.join(out_dir, f"{name}.json")
        save_scenario(build_preset(name), path)
        paths.append(path)
    return paths


def build_localize_demo():
    """Demo scene for the localize command: the matching scene plus one curved
    lane, whose detection-side line fit fails the outlier test and therefore
    enters as a region mask. True camera pose is (0, 0, 1.5) at zero attitude."""
    hd, true_pose, K = build_matching_demo()
    xs = np.arange(6.0, 26.1, 2.0)
    curve = [[x, 5.0 + 2.5 * ((x - 6.0) / 20.0) ** 2, 0.0] for x in xs]
    feats = list(hd) + [MapFeature("lane_curved", FeatureKind.SURFACE,
                                   SemanticClass.LANE_LINE, curve)]
    return _mk_map(feats), true_pose, K


def write_demo_files(out_dir) -> dict:
    """Write the bundled localize demo (full + sparse variants)."""
    import os

    from .map_matching import save_recognized
    from .map_model import save_map

    os.makedirs(out_dir, exist_ok=True)
    out = {}
    hd, pose, K = build_localize_demo()
    suite = default_suite().scaled(0.0)
    rec = _detect_map_features(hd, pose, suite, np.random.default_rng(0), MatchingOptions())
    save_map(hd, os.path.join(out_dir, "demo_map.json"))
    save_recognized(rec, os.path.join(out_dir, "demo_features.json"))
    out["demo"] = ("demo_map.json", "demo_features.json")

    hd_s, pose_s, _ = build_matching_demo(sparse=True)
    rec_s = _detect_map_features(hd_s, pose_s, suite, np.random.default_rng(0), MatchingOptions())
    save_map(hd_s, os.path.join(out_dir, "sparse_map.json"))
    save_recognized(rec_s, os.path.join(out_dir, "sparse_features.json"))
    out["sparse"] = ("sparse_map.json", "sparse_features.json")
    return out


def render_detections(hd_map: HdMap, cam_pose, intrinsics, rng=None,
                      sigma_px: float = 0.0) -> RecognizedFeatures:
    """Noiseless (or noisy) detections of every map feature, no frustum culling
    beyond the behind-camera test; used for demo scenes and tests."""
    from .geometry import project_line, project_point

    pts, lns = [], []
    for f in hd_map:
        noise = (lambda n: rng.normal(0.0, sigma_px, n)) if (rng is not None and sigma_px > 0) \
            else (lambda n: np.zeros(n))
        if f.kind == FeatureKind.POINT:
            uv = project_point(f.reference_point, cam_pose, intrinsics)
            if uv is not None:
                pts.append(DetectedPoint(uv + noise(2), f.semantic_class))
        else:
            ends = np.stack([f.control_points[0], f.control_points[-1]])
            line = project_line(ends, cam_pose, intrinsics)
            if line is not None:
                lns.append(DetectedLine(ImageLine(line.p1 + noise(2), line.p2 + noise(2)),
                                        f.semantic_class))
    return RecognizedFeatures(image_size=(intrinsics.width, intrinsics.height),
                              points=pts, lines=lns)
