"""Joint driving-state estimation: factor graph assembly and the whitened MLE solve.

The driving state stacks connected-vehicle poses and obstacle positions (plus
map-feature positions, normally held fixed as priors). Each observation record
contributes a residual z - h(state) whitened by the inverse square root of its
covariance, so the summed squared norm equals the Mahalanobis objective
sum e^T R^-1 e. The stacked problem is handed to the shared LM solver.

State components that no factor touches are frozen at their initial values and
reported as unobservable rather than left to wander in the optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .geometry import wrap_angle
from .observations import ObservationRecord, SourceClass
from .solver import LeastSquaresProblem, SolveReport, SolverOptions, solve

__all__ = [
    "DrivingState",
    "FactorGraph",
    "JointSolveReport",
    "MarginalBlock",
    "UnknownStateError",
    "SingularInformationError",
    "measurement_model",
    "whitened_residual",
    "solve_joint",
    "marginal_covariance",
]

VEHICLE_COMPONENTS = ("x", "y", "z", "pitch", "yaw", "roll")
POINT_COMPONENTS = ("x", "y", "z")
_VEH_YAW = VEHICLE_COMPONENTS.index("yaw")
_ANGLE_IDX = (3, 4, 5)  # pitch, yaw, roll slots of a vehicle pose vector


class UnknownStateError(KeyError):
    """A factor references a vehicle/obstacle/feature id missing from the state."""


class SingularInformationError(RuntimeError):
    """The information matrix at the solution cannot be inverted."""


@dataclass
class DrivingState:
    """All estimated entities over one fusion window.

    Vehicle poses are (x, y, z, pitch, yaw, roll); obstacles and features are
    3D positions. Feature entries are fixed map priors unless a V-F factor
    frees them.
    """

    vehicles: dict = field(default_factory=dict)
    obstacles: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    stamp: float = 0.0

    def __post_init__(self):
        self.vehicles = {k: self._vec(v, 6) for k, v in self.vehicles.items()}
        self.obstacles = {k: self._vec(v, 3) for k, v in self.obstacles.items()}
        self.features = {k: self._vec(v, 3) for k, v in self.features.items()}
        ids = list(self.vehicles) + list(self.obstacles) + list(self.features)
        if len(set(ids)) != len(ids):
            raise ValueError("entity ids must be unique across categories")
        for v in self.vehicles.values():
            v[3:6] = [wrap_angle(a) for a in v[3:6]]

    @staticmethod
    def _vec(v, n):
        v = np.asarray(v, dtype=float).ravel().copy()
        if v.shape != (n,):
            raise ValueError(f"state vector has size {v.size}, expected {n}")
        return v

    def copy(self) -> "DrivingState":
        return DrivingState(
            vehicles={k: v.copy() for k, v in self.vehicles.items()},
            obstacles={k: v.copy() for k, v in self.obstacles.items()},
            features={k: v.copy() for k, v in self.features.items()},
            stamp=self.stamp,
        )


def _entity(state: DrivingState, record: ObservationRecord, which: str) -> np.ndarray:
    """Look up the observer/subject vector a record refers to."""
    sc = record.source_class
    if which == "observer":
        vid = record.observer_id
        if vid not in state.vehicles:
            raise UnknownStateError(f"unknown observer vehicle {vid!r}")
        return state.vehicles[vid]
    sid = record.subject_id
    if sc in (SourceClass.V_O, SourceClass.M_O):
        pool, name = state.obstacles, "obstacle"
    elif sc == SourceClass.V_V:
        pool, name = state.vehicles, "vehicle"
    elif sc in (SourceClass.V_F, SourceClass.M_F):
        pool, name = state.features, "feature"
    else:  # G, M-V: subject is the vehicle itself
        pool, name = state.vehicles, "vehicle"
    if sid not in pool:
        raise UnknownStateError(f"unknown {name} {sid!r}")
    return pool[sid]


def _yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, s], [-s, c]])


def measurement_model(record: ObservationRecord, state: DrivingState) -> np.ndarray:
    """Predicted value h(state) for one observation record."""
    sc = record.source_class
    if sc == SourceClass.G:
        return _entity(state, record, "subject")[:2].copy()
    if sc == SourceClass.M_V:
        return _entity(state, record, "subject").copy()
    if sc == SourceClass.M_F:
        return _entity(state, record, "subject").copy()
    if sc == SourceClass.M_O:
        return _entity(state, record, "subject")[:2].copy()
    # relative classes: subject position in the observer's yaw-aligned frame
    obs = _entity(state, record, "observer")
    subj = _entity(state, record, "subject")
    return _yaw_rotation(obs[_VEH_YAW]) @ (subj[:2] - obs[:2])


def measurement_jacobian(record: ObservationRecord, state: DrivingState) -> dict:
    """dh/d(entity components), keyed by (category, id). Unwhitened."""
    sc = record.source_class
    if sc == SourceClass.G:
        J = np.zeros((2, 6))
        J[0, 0] = J[1, 1] = 1.0
        return {("vehicle", record.subject_id): J}
    if sc == SourceClass.M_V:
        return {("vehicle", record.subject_id): np.eye(6)}
    if sc == SourceClass.M_F:
        return {("feature", record.subject_id): np.eye(3)}
    if sc == SourceClass.M_O:
        J = np.zeros((2, 3))
        J[0, 0] = J[1, 1] = 1.0
        return {("obstacle", record.subject_id): J}

    obs = _entity(state, record, "observer")
    subj = _entity(state, record, "subject")
    yaw = obs[_VEH_YAW]
    c, s = np.cos(yaw), np.sin(yaw)
    d = subj[:2] - obs[:2]
    R = np.array([[c, s], [-s, c]])
    dR = np.array([[-s, c], [-c, -s]])
    J_obs = np.zeros((2, 6))
    J_obs[:, 0:2] = -R
    J_obs[:, _VEH_YAW] = dR @ d
    subj_cat = {SourceClass.V_O: "obstacle", SourceClass.V_V: "vehicle", SourceClass.V_F: "feature"}[sc]
    subj_dim = 6 if subj_cat == "vehicle" else 3
    J_subj = np.zeros((2, subj_dim))
    J_subj[:, 0:2] = R
    out = {("vehicle", record.observer_id): J_obs}
    key = (subj_cat, record.subject_id)
    if key in out:  # a vehicle observing itself would collide; not meaningful
        raise ValueError("relative observation of the observer itself")
    out[key] = J_subj
    return out


def _raw_residual(record: ObservationRecord, state: DrivingState) -> np.ndarray:
    e = record.value - measurement_model(record, state)
    if record.source_class == SourceClass.M_V:
        for i in _ANGLE_IDX:
            e[i] = wrap_angle(e[i])
    return e


def whitened_residual(record: ObservationRecord, state: DrivingState) -> np.ndarray:
    """L^-1 (z - h) with L the lower Cholesky factor of the covariance."""
    L = np.linalg.cholesky(record.covariance)
    return linalg.solve_triangular(L, _raw_residual(record, state), lower=True, check_finite=False)


_TOUCH = {
    SourceClass.G: {"subject": (0, 1)},
    SourceClass.M_V: {"subject": (0, 1, 2, 3, 4, 5)},
    SourceClass.M_F: {"subject": (0, 1, 2)},
    SourceClass.M_O: {"subject": (0, 1)},
    SourceClass.V_O: {"observer": (0, 1, _VEH_YAW), "subject": (0, 1)},
    SourceClass.V_V: {"observer": (0, 1, _VEH_YAW), "subject": (0, 1)},
    SourceClass.V_F: {"observer": (0, 1, _VEH_YAW), "subject": (0, 1)},
}


def _subject_category(record: ObservationRecord) -> str:
    sc = record.source_class
    if sc in (SourceClass.V_O, SourceClass.M_O):
        return "obstacle"
    if sc in (SourceClass.V_F, SourceClass.M_F):
        return "feature"
    return "vehicle"


class FactorGraph:
    """Factors bound to a fixed flat ordering of the state entities.

    The layout is deterministic: vehicles, then obstacles, then free features,
    each sorted by id. Features are free (estimated) only when some V-F factor
    observes them; M-F priors on fixed features carry no gradient and are
    excluded from the solve.
    """

    def __init__(self, template: DrivingState, factors):
        self.template = template.copy()
        self.factors = list(factors)
        free_features = sorted(
            {r.subject_id for r in self.factors if r.source_class == SourceClass.V_F}
        )
        self.entries = (
            [("vehicle", i) for i in sorted(template.vehicles)]
            + [("obstacle", i) for i in sorted(template.obstacles)]
            + [("feature", i) for i in free_features]
        )
        self._entry_dim = {e: (6 if e[0] == "vehicle" else 3) for e in self.entries}
        # structural observability: mark components any factor touches
        touched = {e: np.zeros(self._entry_dim[e], dtype=bool) for e in self.entries}
        self.active_factors = []
        for r in self.factors:
            _entity(self.template, r, "subject")  # id validation
            if r.observer_id is not None and r.source_class not in (SourceClass.G, SourceClass.M_V):
                _entity(self.template, r, "observer")
            if r.source_class == SourceClass.M_F and r.subject_id not in free_features:
                continue  # prior on a fixed feature: constant, no gradient
            self.active_factors.append(r)
            for role, comps in _TOUCH[r.source_class].items():
                if role == "observer":
                    key = ("vehicle", r.observer_id)
                else:
                    key = (_subject_category(r), r.subject_id)
                if key in touched:
                    for cidx in comps:
                        touched[key][cidx] = True
        self.free_mask = touched
        self.offsets = {}
        off = 0
        for e in self.entries:
            self.offsets[e] = off
            off += int(touched[e].sum())
        self.n_free = off
        self.residual_dim = sum(r.dim for r in self.active_factors)
        # cache whitening factors
        self._chol = [np.linalg.cholesky(r.covariance) for r in self.active_factors]

    def unobservable(self) -> list:
        """Names of state components untouched by any factor."""
        out = []
        for (cat, eid) in self.entries:
            names = VEHICLE_COMPONENTS if cat == "vehicle" else POINT_COMPONENTS
            mask = self.free_mask[(cat, eid)]
            out.extend(f"{cat}:{eid}.{names[i]}" for i in range(len(mask)) if not mask[i])
        return out

    # flat-vector packing over free components only
    def flatten(self, state: DrivingState) -> np.ndarray:
        x = np.empty(self.n_free)
        for e in self.entries:
            vec = self._entity_vec(state, e)
            m = self.free_mask[e]
            x[self.offsets[e]:self.offsets[e] + int(m.sum())] = vec[m]
        return x

    def unflatten(self, x: np.ndarray, base: DrivingState) -> DrivingState:
        state = base.copy()
        for e in self.entries:
            vec = self._entity_vec(state, e)
            m = self.free_mask[e]
            vec[m] = x[self.offsets[e]:self.offsets[e] + int(m.sum())]
        for v in state.vehicles.values():
            v[3:6] = [wrap_angle(a) for a in v[3:6]]
        return state

    @staticmethod
    def _entity_vec(state: DrivingState, entry) -> np.ndarray:
        cat, eid = entry
        return getattr(state, cat + "s")[eid]

    def residual(self, state: DrivingState) -> np.ndarray:
        parts = []
        for r, L in zip(self.active_factors, self._chol):
            parts.append(linalg.solve_triangular(L, _raw_residual(r, state), lower=True,
                                                 check_finite=False))
        return np.concatenate(parts) if parts else np.zeros(0)

    def jacobian(self, state: DrivingState) -> np.ndarray:
        """Whitened residual Jacobian over the free components, d(L^-1(z-h))/dx."""
        J = np.zeros((self.residual_dim, self.n_free))
        row = 0
        for r, L in zip(self.active_factors, self._chol):
            for key, Jh in measurement_jacobian(r, state).items():
                if key not in self.offsets:
                    continue  # fixed feature: no columns
                m = self.free_mask[key]
                block = linalg.solve_triangular(L, -Jh[:, m], lower=True, check_finite=False)
                J[row:row + r.dim, self.offsets[key]:self.offsets[key] + int(m.sum())] = block
            row += r.dim
        return J

    def cost(self, state: DrivingState) -> float:
        f = self.residual(state)
        return float(f @ f)


@dataclass
class JointSolveReport(SolveReport):
    class_residual_norms: dict = field(default_factory=dict)
    unobservable: list = field(default_factory=list)


def solve_joint(graph: FactorGraph, initial: DrivingState,
                options: SolverOptions | None = None):
    """Minimize the stacked whitened residual. Returns (DrivingState, report)."""
    base = initial.copy()

    def residual_fn(x):
        return graph.residual(graph.unflatten(x, base))

    def jacobian_fn(x):
        return graph.jacobian(graph.unflatten(x, base))

    problem = LeastSquaresProblem(residual_fn, graph.n_free, jacobian_fn=jacobian_fn)
    x0 = graph.flatten(base)
    x_star, rep = solve(problem, x0, options)
    solution = graph.unflatten(x_star, base)

    norms: dict[str, float] = {}
    for r in graph.active_factors:
        e = whitened_residual(r, solution)
        norms[r.source_class.value] = norms.get(r.source_class.value, 0.0) + float(e @ e)
    report = JointSolveReport(
        iterations=rep.iterations,
        initial_cost=rep.initial_cost,
        final_cost=rep.final_cost,
        reason=rep.reason,
        cost_trace=rep.cost_trace,
        final_damping=rep.final_damping,
        class_residual_norms={k: float(np.sqrt(v)) for k, v in norms.items()},
        unobservable=graph.unobservable(),
    )
    return solution, report


@dataclass
class MarginalBlock:
    """Marginal covariance over an entity's observable components."""

    components: tuple
    free_mask: np.ndarray
    covariance: np.ndarray  # (k, k) over free components, in component order

    def full(self, fill: float = np.inf) -> np.ndarray:
        """Expand to the entity's full dimension, ``fill`` on frozen diagonals."""
        n = self.free_mask.size
        out = np.zeros((n, n))
        np.fill_diagonal(out, fill)
        idx = np.flatnonzero(self.free_mask)
        out[np.ix_(idx, idx)] = self.covariance
        return out


def marginal_covariance(graph: FactorGraph, solution: DrivingState) -> dict:
    """Diagonal covariance blocks of (J^T J)^-1 at the solution, per entity id."""
    J = graph.jacobian(solution)
    info = J.T @ J
    try:
        cov = linalg.inv(info)
    except linalg.LinAlgError as exc:
        raise SingularInformationError("information matrix is singular") from exc
    if not np.all(np.isfinite(cov)):
        raise SingularInformationError("information matrix is singular")
    cov = 0.5 * (cov + cov.T)
    blocks = {}
    for e in graph.entries:
        cat, eid = e
        m = graph.free_mask[e]
        k = int(m.sum())
        off = graph.offsets[e]
        names = VEHICLE_COMPONENTS if cat == "vehicle" else POINT_COMPONENTS
        blocks[eid] = MarginalBlock(
            components=tuple(names),
            free_mask=m.copy(),
            covariance=cov[off:off + k, off:off + k].copy(),
        )
    return blocks
