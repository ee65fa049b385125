"""Dense damped least-squares (Levenberg-Marquardt) engine.

Shared by the map-matching localizer and the joint state estimator. The solver
iterates the damped normal equations

    (J^T J + damping * I) dx = -J^T f

accepting a step only when the squared-residual cost strictly decreases;
rejected steps raise the damping and retry with the same Jacobian. After an
accepted step the damping is updated from the gain ratio (actual vs modeled
cost decrease, the Nielsen rule), so strongly nonlinear residuals keep the
damping near the scale where the quadratic model is trustworthy instead of
oscillating around it. Problem sizes here stay small (<~100 states), so dense
factorization is adequate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy import linalg

__all__ = [
    "LeastSquaresProblem",
    "SolverOptions",
    "SolveReport",
    "ConvergenceReason",
    "NonFiniteResidualError",
    "solve",
    "numeric_jacobian",
]


class NonFiniteResidualError(RuntimeError):
    """Residual function produced NaN/Inf where a finite value was required."""


class ConvergenceReason(str, Enum):
    COST_TOL = "cost_tol"
    STEP_TOL = "step_tol"
    GRAD_TOL = "grad_tol"
    MAX_ITER = "max_iter"
    SINGULAR = "singular"


@dataclass
class LeastSquaresProblem:
    """Residual callback plus state dimension; Jacobian is optional.

    The residual length must stay constant across evaluations. When no
    ``jacobian_fn`` is given, central finite differences are used with
    ``fd_steps`` (scalar or per-component).
    """

    residual_fn: Callable[[np.ndarray], np.ndarray]
    dimension: int
    jacobian_fn: Callable[[np.ndarray], np.ndarray] | None = None
    fd_steps: np.ndarray | float = 1e-7


@dataclass
class SolverOptions:
    initial_damping: float = 1e-3
    damping_decrease: float = 3.0
    damping_increase: float = 2.0
    damping_ceiling: float = 1e9
    max_iterations: int = 100
    cost_tol: float = 1e-10  # relative cost decrease
    step_tol: float = 1e-8
    grad_tol: float = 1e-8
    # optional trust cap: steps longer than this are rejected (damping raised);
    # callers with re-linearization loops use it to keep iterates in pull-in range
    max_step_norm: float | None = None

    def __post_init__(self):
        if self.initial_damping <= 0:
            raise ValueError("initial damping must be positive")
        if self.damping_decrease <= 1 or self.damping_increase <= 1:
            raise ValueError("damping factors must exceed 1")


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    reason: ConvergenceReason = ConvergenceReason.MAX_ITER
    cost_trace: list = field(default_factory=list)
    final_damping: float = 0.0


def _as_residual(problem: LeastSquaresProblem, x: np.ndarray, expected_len: int | None) -> np.ndarray:
    f = np.asarray(problem.residual_fn(x), dtype=float).ravel()
    if expected_len is not None and f.size != expected_len:
        raise ValueError(
            f"residual length changed during solve ({f.size} != {expected_len})"
        )
    return f


def _jacobian(problem: LeastSquaresProblem, x: np.ndarray) -> np.ndarray:
    if problem.jacobian_fn is not None:
        J = np.asarray(problem.jacobian_fn(x), dtype=float)
    else:
        J = numeric_jacobian(problem.residual_fn, x, problem.fd_steps)
    return J


def numeric_jacobian(residual_fn, x, steps=1e-7) -> np.ndarray:
    """Central-difference Jacobian, column j = (f(x+h e_j) - f(x-h e_j)) / 2h."""
    x = np.asarray(x, dtype=float).ravel()
    h = np.broadcast_to(np.asarray(steps, dtype=float), x.shape)
    if np.any(h <= 0):
        raise ValueError("finite-difference steps must be positive")
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        fp = np.asarray(residual_fn(xp), dtype=float).ravel()
        fm = np.asarray(residual_fn(xm), dtype=float).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteResidualError(
                f"non-finite residual while differencing component {j}"
            )
        cols.append((fp - fm) / (2.0 * h[j]))
    return np.stack(cols, axis=1)


def solve(problem: LeastSquaresProblem, x0, options: SolverOptions | None = None):
    """Minimize ||residual_fn(x)||^2 from x0. Returns (x, SolveReport).

    Raises NonFiniteResidualError when the residual is non-finite at the start
    point. A non-finite *trial* step is treated as a rejection; if no finite,
    cost-decreasing step exists even at the damping ceiling the solver stops
    where it stands.
    """
    opts = options or SolverOptions()
    x = np.asarray(x0, dtype=float).ravel().copy()
    if x.size != problem.dimension:
        raise ValueError(f"x0 has size {x.size}, expected {problem.dimension}")

    f = _as_residual(problem, x, None)
    if not np.all(np.isfinite(f)):
        raise NonFiniteResidualError("residual is non-finite at the initial state")
    n_res = f.size
    cost = float(f @ f)

    report = SolveReport(initial_cost=cost, final_cost=cost, cost_trace=[cost])
    damping = float(opts.initial_damping)
    eye = np.eye(problem.dimension)

    while report.iterations < opts.max_iterations:
        J = _jacobian(problem, x)
        if J.shape != (n_res, problem.dimension):
            raise ValueError(f"Jacobian shape {J.shape}, expected {(n_res, problem.dimension)}")
        if not np.all(np.isfinite(J)):
            report.reason = ConvergenceReason.SINGULAR
            break
        g = J.T @ f
        if np.max(np.abs(g), initial=0.0) <= opts.grad_tol:
            report.reason = ConvergenceReason.GRAD_TOL
            break
        A = J.T @ J

        accepted = False
        singular = False
        nu = opts.damping_increase
        while True:
            try:
                cho = linalg.cho_factor(A + damping * eye, lower=True, check_finite=False)
                if np.min(np.abs(np.diag(cho[0]))) < 1e-12:
                    raise np.linalg.LinAlgError("pivot below threshold")
                dx = linalg.cho_solve(cho, -g, check_finite=False)
            except (np.linalg.LinAlgError, linalg.LinAlgError, ValueError):
                damping *= nu
                nu *= 2.0
                if damping > opts.damping_ceiling:
                    singular = True
                    break
                continue
            if opts.max_step_norm is not None and np.linalg.norm(dx) > opts.max_step_norm:
                damping *= nu
                nu *= 2.0
                if damping > opts.damping_ceiling:
                    break
                continue
            x_try = x + dx
            f_try = _as_residual(problem, x_try, n_res)
            finite = np.all(np.isfinite(f_try))
            cost_try = float(f_try @ f_try) if finite else np.inf
            if finite and cost_try < cost:
                accepted = True
                break
            damping *= nu
            nu *= 2.0
            if damping > opts.damping_ceiling:
                break

        if singular:
            report.reason = ConvergenceReason.SINGULAR
            break
        if not accepted:
            # even near-zero steps cannot reduce the cost: treat as converged in step
            report.reason = ConvergenceReason.STEP_TOL
            break

        step_norm = float(np.linalg.norm(dx))
        cost_drop = cost - cost_try
        # gain ratio: actual decrease over the decrease the quadratic model
        # promised; damping relaxes only as far as the model has earned
        model_drop = float(dx @ (damping * dx - g))
        rho = cost_drop / model_drop if model_drop > 0 else 1.0
        scale = max(1.0 / opts.damping_decrease, 1.0 - (2.0 * rho - 1.0) ** 3)
        x, f, cost = x_try, f_try, cost_try
        damping = max(damping * scale, 1e-12)
        report.iterations += 1
        report.cost_trace.append(cost)

        if step_norm <= opts.step_tol * (np.linalg.norm(x) + opts.step_tol):
            report.reason = ConvergenceReason.STEP_TOL
            break
        if cost_drop <= opts.cost_tol * max(cost, 1e-300):
            report.reason = ConvergenceReason.COST_TOL
            break
    else:
        report.reason = ConvergenceReason.MAX_ITER

    report.final_cost = cost
    report.final_damping = damping
    return x, report
