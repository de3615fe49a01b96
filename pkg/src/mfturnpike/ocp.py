"""Direct transcription of the N-particle control problem.

Decision variables are the per-step, per-particle controls ``u[k, i]`` held
constant on each RK4 step.  The objective is the left-endpoint quadrature

    J(u) = sum_k dt * (1/N) sum_i L(x_k,i) + Psi(u_k,i)

and its gradient is the exact discrete adjoint of the RK4 step map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .dynamics import CheapFeedback, DivergenceError, Trajectory, integrate
from .model import ProblemSpec
from .turnpike import CheckReport, choose_beta

__all__ = [
    "SolverOptions",
    "SolveResult",
    "LQOracle",
    "step_costs",
    "discrete_cost",
    "cost_gradient",
    "project",
    "warm_start",
    "solve_ocp",
    "riccati_lq_oracle",
    "verify_dpp",
]


@dataclass(frozen=True)
class SolverOptions:
    """Projected gradient settings.

    ``tol`` applies to the sup-norm of the gradient rescaled by ``N / dt``,
    i.e. the pointwise gradient of the continuous-time cost, so the stopping
    rule does not drift with the grid or the particle count.
    """

    max_iters: int = 5000
    tol: float = 1e-6
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60
    enforce_bound: bool = False

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "SolverOptions":
        d = d or {}
        names = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown solver options {sorted(unknown)}")
        return cls(**d)


@dataclass
class SolveResult:
    trajectory: Trajectory
    cost: float
    iterations: int
    grad_norm: float
    lipschitz_proxy: np.ndarray
    converged: bool
    line_search_failed: bool = False
    cost_history: list = field(default_factory=list)
    warm_start_cost: float = math.nan
    clipped: int = 0
    active_bound: int = 0

    def summary(self) -> dict:
        return {
            "cost": self.cost,
            "iters": self.iterations,
            "grad_norm": self.grad_norm,
            "lipschitz_proxy_max": float(np.max(self.lipschitz_proxy)) if self.lipschitz_proxy.size else 0.0,
            "converged": self.converged,
            "line_search_failed": self.line_search_failed,
            "warm_start_cost": self.warm_start_cost,
            "clipped": self.clipped,
            "active_bound": self.active_bound,
        }


# --------------------------------------------------------------------------
# objective


def _check_controls(spec: ProblemSpec, u) -> np.ndarray:
    u = np.ascontiguousarray(u, dtype=float)
    shape = (spec.n_steps, spec.particle_count, spec.dimension)
    if u.shape != shape:
        raise ValueError(f"controls must have shape {shape}, got {u.shape}")
    return u


def _rollout(spec: ProblemSpec, u):
    xs, stages, bad = _kernels.rollout(np.array(spec.initial_positions), u, spec.dt, *spec.kernel.args)
    if bad >= 0:
        raise DivergenceError(bad)
    return xs, stages


def step_costs(spec: ProblemSpec, xs, u) -> np.ndarray:
    """Quadrature terms ``dt * (L(x_ki) + Psi(u_ki)) / N``, shape (K, N)."""
    return spec.dt * spec.cost.running(xs[:-1], u) / spec.particle_count


def discrete_cost(spec: ProblemSpec, controls) -> float:
    """Left-endpoint quadrature of the running cost under held controls."""
    u = _check_controls(spec, controls)
    xs, _ = _rollout(spec, u)
    return math.fsum(step_costs(spec, xs, u).ravel())


def _evaluate(spec, u, want_grad=True):
    xs, stages = _rollout(spec, u)
    terms = step_costs(spec, xs, u)
    if not want_grad:
        return xs, terms, None
    w = spec.dt / spec.particle_count
    dl_dx = np.ascontiguousarray(w * spec.cost.state_grad(xs[:-1]))
    dl_du = np.ascontiguousarray(w * spec.cost.control_grad(u))
    g = _kernels.adjoint_sweep(xs, stages, spec.dt, *spec.kernel.args, dl_dx, dl_du)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite adjoint")
    return xs, terms, g


def cost_gradient(spec: ProblemSpec, controls) -> np.ndarray:
    """Exact gradient of :func:`discrete_cost`, shape (K, N, d)."""
    u = _check_controls(spec, controls)
    return _evaluate(spec, u)[2]


def project(u, bound: float):
    """Clip each control vector to norm ``bound``; returns (projected, clipped mask)."""
    if not math.isfinite(bound):
        return u, np.zeros(u.shape[:-1], dtype=bool)
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    over = norms > bound
    scale = np.where(over, bound / np.where(over, norms, 1.0), 1.0)
    return u * scale, over[..., 0]


# --------------------------------------------------------------------------
# solver


def warm_start(spec: ProblemSpec, beta: Optional[float] = None) -> np.ndarray:
    """Controls of the cheap feedback closed loop at the step left endpoints."""
    c = spec.cost
    if beta is None:
        beta = choose_beta(spec.kernel.lipschitz_constant, c.cpsi, c.cl)
    law = CheapFeedback(beta, spec.target, spec.kernel)
    return np.ascontiguousarray(integrate(spec, law).controls)


def _residual(u, gs, bound):
    if math.isfinite(bound):
        p, _ = project(u - gs, bound)
        return float(np.max(np.abs(u - p))) if u.size else 0.0
    return float(np.max(np.abs(gs))) if gs.size else 0.0


def solve_ocp(spec: ProblemSpec, options: Optional[SolverOptions] = None, initial=None,
              beta: Optional[float] = None) -> SolveResult:
    """Projected gradient descent with Armijo backtracking.

    Trial steps start from the Barzilai-Borwein length and halve until the
    sufficient-decrease test holds.  The decrease is summed term by term so
    late-horizon progress far below the cost's rounding unit still counts.
    """
    opt = options or SolverOptions()
    bound = spec.control_bound if opt.enforce_bound else math.inf
    scale = spec.particle_count / spec.dt
    u0 = warm_start(spec, beta) if initial is None else _check_controls(spec, initial).copy()
    u, clipped_mask = project(u0, bound)
    clipped = int(clipped_mask.sum())

    xs, terms, g = _evaluate(spec, u)
    J = math.fsum(terms.ravel())
    warm_cost = J
    gs = scale * g
    history = [J]
    res = _residual(u, gs, bound)
    step = 1.0
    u_prev = gs_prev = None
    failed = False
    it = 0
    while res > opt.tol and it < opt.max_iters:
        if u_prev is not None:
            s = (u - u_prev).ravel()
            y = (gs - gs_prev).ravel()
            sy = float(s @ y)
            if sy > 0:
                step = float(s @ s) / sy
        accepted = False
        trial = step
        u_scale = 1.0 + float(np.max(np.abs(u)))
        for _ in range(opt.max_backtracks):
            un, _ = project(u - trial * gs, bound)
            d = un - u
            slope = float(np.sum(g * d))
            # below this the step is lost in the rounding of u itself
            if slope >= 0 or float(np.max(np.abs(d))) <= 1e-15 * u_scale:
                break
            try:
                xn, tn, gn = _evaluate(spec, un)
            except (DivergenceError, FloatingPointError):
                trial *= opt.backtrack
                continue
            dJ = math.fsum((tn - terms).ravel())
            if dJ <= opt.armijo_c * slope:
                accepted = True
                break
            trial *= opt.backtrack
        if not accepted:
            failed = True
            break
        u_prev, gs_prev = u, gs
        u, xs, terms, g = un, xn, tn, gn
        gs = scale * g
        J = math.fsum(terms.ravel())
        history.append(J)
        res = _residual(u, gs, bound)
        step = trial
        it += 1

    traj = Trajectory(spec.times, xs, u)
    active = int(np.sum(np.linalg.norm(u, axis=-1) >= bound * (1 - 1e-12))) if math.isfinite(bound) else 0
    return SolveResult(
        trajectory=traj, cost=J, iterations=it, grad_norm=res,
        lipschitz_proxy=traj.lipschitz_proxy(), converged=res <= opt.tol,
        line_search_failed=failed, cost_history=history, warm_start_cost=warm_cost,
        clipped=clipped, active_bound=active,
    )


# --------------------------------------------------------------------------
# scalar LQ oracle


@dataclass(frozen=True)
class LQOracle:
    trajectory: Trajectory
    p: np.ndarray
    cost: float


def riccati_lq_oracle(T: float, x0: float, dt: float) -> LQOracle:
    """Scalar ``dx/dt = u`` with cost ``int x^2 + u^2``.

    Integrates ``-p' = 1 - p^2``, ``p(T) = 0`` backward with RK4 on the half
    grid, then the closed loop ``x' = -p x`` forward, using the half-grid
    values of ``p`` at the RK4 midpoints.  The optimal cost is ``p(0) x0^2``.
    """
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * T:
        raise ValueError("T must be a positive multiple of dt")
    h = dt / 2.0
    p = np.empty(2 * K + 1)
    p[-1] = 0.0
    f = lambda q: 1.0 - q * q  # dp/d(T - t)
    for j in range(2 * K, 0, -1):
        q = p[j]
        k1 = f(q)
        k2 = f(q + 0.5 * h * k1)
        k3 = f(q + 0.5 * h * k2)
        k4 = f(q + h * k3)
        p[j - 1] = q + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    x = np.empty(K + 1)
    x[0] = x0
    for k in range(K):
        pa, pm, pb = p[2 * k], p[2 * k + 1], p[2 * k + 2]
        k1 = -pa * x[k]
        k2 = -pm * (x[k] + 0.5 * dt * k1)
        k3 = -pm * (x[k] + 0.5 * dt * k2)
        k4 = -pb * (x[k] + dt * k3)
        x[k + 1] = x[k] + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    pg = p[::2]
    u = -pg[:-1] * x[:-1]
    traj = Trajectory(dt * np.arange(K + 1), x[:, None, None], u[:, None, None])
    return LQOracle(traj, pg, float(pg[0] * x0 * x0))


# --------------------------------------------------------------------------
# dynamic programming check


def verify_dpp(spec: ProblemSpec, result: SolveResult, a: float, options: Optional[SolverOptions] = None,
               rel_tol: float = 1e-2) -> CheckReport:
    """Compare the tail cost of ``result`` on ``[a, T]`` with a cold re-solve.

    The discrepancy is relative to the re-solved cost (absolute when that
    cost vanishes).
    """
    traj = result.trajectory
    ka = traj.index(a)
    if not 0 <= ka < traj.n_steps:
        raise ValueError("a must be a grid time in [0, T)")
    terms = step_costs(spec, traj.positions, traj.controls)
    tail = math.fsum(terms[ka:].ravel())
    sub = spec.restarted(traj.positions[ka], spec.horizon - a)
    resolved = solve_ocp(sub, options)
    denom = abs(resolved.cost) if resolved.cost > 0 else 1.0
    disc = abs(tail - resolved.cost) / denom
    return CheckReport.build(
        "dpp", {"a": float(a), "rel_tol": rel_tol},
        times=[float(a)], observed=[disc], bound=[rel_tol],
        extras={"tail_cost": tail, "resolved_cost": resolved.cost,
                "resolved_converged": resolved.converged, "resolved_iterations": resolved.iterations},
    )
