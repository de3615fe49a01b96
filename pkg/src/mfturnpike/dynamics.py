"""Time integration of the controlled particle system and its feedback laws.

The state equation is ``dx_i/dt = (1/N) sum_j P(x_i - x_j) + u(t, x_i)``,
integrated with classic fixed-step RK4.  Feedback laws are evaluated at the
RK stage times; open-loop control grids are held constant over each step.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .model import InteractionKernel, ProblemSpec, as_positions, second_moment

__all__ = [
    "Trajectory",
    "DivergenceError",
    "ControlBoundError",
    "ControlLaw",
    "ZeroControl",
    "ConstantControl",
    "OpenLoopControl",
    "CheapFeedback",
    "ThreePhaseFeedback",
    "mean_field_force",
    "forces",
    "cheap_feedback",
    "three_phase_feedback",
    "integrate",
    "integrate_with_tracers",
    "flow_map_distance",
    "lipschitz_proxy",
    "reparameterization_residuals",
]

_GRID_TOL = 1e-9


class DivergenceError(RuntimeError):
    """A rollout produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


class ControlBoundError(RuntimeError):
    """An evaluated control exceeded the declared bound."""


def _on_grid(t: float, dt: float) -> int:
    k = t / dt
    if abs(k - round(k)) > _GRID_TOL * max(1.0, abs(k)):
        raise ValueError(f"time {t} is not on the grid of step {dt}")
    return int(round(k))


# --------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Trajectory:
    """Uniform time grid, ensembles at every grid time and the step controls.

    ``controls[k]`` is the control applied at ``times[k]`` (left endpoint of
    step k), so there is one fewer control than ensembles.
    """

    times: np.ndarray
    positions: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        for name in ("times", "positions", "controls"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        K = self.controls.shape[0]
        if self.positions.shape[0] != K + 1 or self.times.shape[0] != K + 1:
            raise ValueError("trajectory needs K+1 times/ensembles for K controls")
        if K:
            steps = np.diff(self.times)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps[0]:
                raise ValueError("time grid must be uniform and increasing")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.controls))):
            raise ValueError("trajectory contains non-finite values")

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def index(self, t: float) -> int:
        return _on_grid(t - self.times[0], self.dt)

    def second_moments(self, target) -> np.ndarray:
        target = np.asarray(target, dtype=float)
        return np.mean(np.sum((self.positions - target) ** 2, axis=2), axis=1)

    def control_energy(self) -> np.ndarray:
        """``(1/N) sum_i |u_i|^2`` at every left endpoint."""
        return np.mean(np.sum(self.controls**2, axis=2), axis=1)

    def running_cost(self, cost) -> np.ndarray:
        """``(1/N) sum_i L(x_i) + Psi(u_i)`` at every left endpoint."""
        return np.mean(cost.running(self.positions[:-1], self.controls), axis=1)

    def lipschitz_proxy(self) -> np.ndarray:
        return np.array([lipschitz_proxy(x, u) for x, u in zip(self.positions[:-1], self.controls)])

    def to_csv(self, path, target) -> None:
        """One row per particle per grid time; the final time has no control."""
        d = self.dim
        m2 = self.second_moments(target)
        header = ["t", "particle"] + [f"x_{c + 1}" for c in range(d)] + [f"u_{c + 1}" for c in range(d)] + ["m2"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k, t in enumerate(self.times):
                for i in range(self.n_particles):
                    u = self.controls[k, i].tolist() if k < self.n_steps else [""] * d
                    w.writerow([repr(float(t)), i] + [repr(float(v)) for v in self.positions[k, i]]
                               + [v if v == "" else repr(float(v)) for v in u] + [repr(float(m2[k]))])

    def summary_csv(self, path, target) -> None:
        """Per-step ``t, m2, control_energy`` (blank energy at the final time)."""
        m2 = self.second_moments(target)
        energy = self.control_energy()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "m2", "control_energy"])
            for k, t in enumerate(self.times):
                e = repr(float(energy[k])) if k < self.n_steps else ""
                w.writerow([repr(float(t)), repr(float(m2[k])), e])


def lipschitz_proxy(x, u) -> float:
    """Largest pairwise slope ``|u_i - u_j| / |x_i - x_j|`` over distinct particles."""
    x = as_positions(x)
    u = as_positions(u)
    if x.shape[0] < 2:
        return 0.0
    i, j = np.triu_indices(x.shape[0], k=1)
    dx = np.linalg.norm(x[i] - x[j], axis=1)
    du = np.linalg.norm(u[i] - u[j], axis=1)
    ok = dx > 1e-12
    return float(np.max(du[ok] / dx[ok])) if ok.any() else 0.0


# --------------------------------------------------------------------------
# forces


def mean_field_force(e, kernel: InteractionKernel, i: int) -> np.ndarray:
    """``(1/N) sum_j P(x_i - x_j)`` for one particle, summed in index order."""
    x = as_positions(e)
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"particle index {i} out of range for N={x.shape[0]}")
    acc = np.zeros(x.shape[1])
    for xj in x:
        acc = acc + kernel(x[i] - xj)
    return acc / x.shape[0]


def forces(x, kernel: InteractionKernel, source=None) -> np.ndarray:
    """Interaction velocity of every particle (compiled, fixed summation order).

    With ``source`` given, returns the field generated by ``source`` at ``x``.
    """
    x = np.ascontiguousarray(x, dtype=float)
    if source is None:
        return _kernels.pair_forces(x, *kernel.args)
    return _kernels.cross_forces(x, np.ascontiguousarray(source, dtype=float), *kernel.args)


# --------------------------------------------------------------------------
# control laws


class ControlLaw:
    """Control as a function of time and the current ensemble.

    ``__call__(t, x, step)`` gets the stage time, the stage ensemble and the
    ``(t_lo, t_hi)`` bounds of the RK step being taken.  ``is_field`` marks
    laws that are genuine vector fields ``u(t, y)`` (independent of which
    ensemble they are applied to).
    """

    kind = "abstract"
    is_field = False
    lipschitz_bound: Optional[float] = None

    def __call__(self, t: float, x: np.ndarray, step: tuple[float, float]) -> np.ndarray:
        raise NotImplementedError


class ZeroControl(ControlLaw):
    kind = "zero"
    is_field = True
    lipschitz_bound = 0.0

    def __call__(self, t, x, step):
        return np.zeros_like(x)


class ConstantControl(ControlLaw):
    """The same control vector for every particle at every time."""

    kind = "constant"
    is_field = True
    lipschitz_bound = 0.0

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def __call__(self, t, x, step):
        return np.broadcast_to(self.value, x.shape).copy()


class OpenLoopControl(ControlLaw):
    """Per-step, per-particle control grid held constant on each step."""

    kind = "open_loop_grid"

    def __init__(self, controls, dt: float, t0: float = 0.0):
        self.controls = np.asarray(controls, dtype=float)
        self.dt = float(dt)
        self.t0 = float(t0)

    def step_index(self, t_lo: float) -> int:
        k = _on_grid(t_lo - self.t0, self.dt)
        if not 0 <= k < self.controls.shape[0]:
            raise ValueError(f"time {t_lo} outside the control grid")
        return k

    def __call__(self, t, x, step):
        return self.controls[self.step_index(step[0])].copy()


class CheapFeedback(ControlLaw):
    """Stabilizing feedback ``-beta (x - target) - (P * mu)(x)``.

    Closed-loop form (``reference=None``): the interaction term uses the
    ensemble the law is applied to, so every particle obeys
    ``dx/dt = -beta (x - target)`` exactly.

    Field form: the interaction term is generated by the closed-loop
    reference ensemble started from ``reference`` at ``t_ref``, whose
    positions are known in closed form.  This is a fixed vector field
    ``u(t, y)`` with Lipschitz constant at most ``beta + C_P``.
    """

    kind = "cheap_feedback"

    def __init__(self, beta: float, target, kernel: InteractionKernel, reference=None, t_ref: float = 0.0):
        if not beta > 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)
        self.target = np.atleast_1d(np.asarray(target, dtype=float))
        self.kernel = kernel
        self.reference = None if reference is None else as_positions(reference).copy()
        self.t_ref = float(t_ref)
        self.is_field = reference is not None
        self.lipschitz_bound = self.beta + kernel.lipschitz_constant

    def reference_positions(self, t: float) -> np.ndarray:
        return self.target + math.exp(-self.beta * (t - self.t_ref)) * (self.reference - self.target)

    def __call__(self, t, x, step):
        if self.reference is None:
            return cheap_feedback(x, self.beta, self.target, self.kernel)
        src = self.reference_positions(t)
        return -self.beta * (x - self.target) - forces(x, self.kernel, source=src)


class ThreePhaseFeedback(ControlLaw):
    """Time-rescaled replay of a base trajectory's controls.

    On ``[0, s)`` the base controls are replayed; on ``[s, s + m h]`` the
    base control at the slowed time ``s + (t - s)/m`` is scaled by ``1/m``
    and ``(m-1)/m`` of the interaction is cancelled, so the ensemble retraces
    the base path at speed ``1/m``; after ``s + m h`` the base controls are
    replayed with delay ``(m - 1) h``.

    ``interp="hold"`` reads base controls as the piecewise-constant signal
    that produced the base trajectory; ``interp="linear"`` interpolates the
    grid values linearly in time.
    """

    kind = "three_phase"

    def __init__(self, base: Trajectory, s: float, h: float, m: float, kernel: InteractionKernel,
                 interp: str = "hold"):
        if interp not in ("hold", "linear"):
            raise ValueError("interp must be 'hold' or 'linear'")
        T = base.times[-1]
        if not s > 0 or not h > 0 or m < 1:
            raise ValueError("need s > 0, h > 0 and m >= 1")
        if s + m * h > T * (1 + _GRID_TOL):
            raise ValueError(f"s + m h = {s + m * h} exceeds the horizon {T}")
        base.index(s)
        base.index(s + m * h)
        self.base = base
        self.s, self.h, self.m = float(s), float(h), float(m)
        self.kernel = kernel
        self.interp = interp

    def base_time(self, t: float) -> float:
        s, h, m = self.s, self.h, self.m
        if t < s:
            return t
        if t <= s + m * h:
            return s + (t - s) / m
        return t - (m - 1) * h

    def phase(self, t_mid: float) -> int:
        if t_mid < self.s:
            return 0
        if t_mid < self.s + self.m * self.h:
            return 1
        return 2

    def base_control(self, t: float, t_mid: float) -> np.ndarray:
        b = self.base
        u = b.controls
        if self.interp == "hold":
            k = int(math.floor((self.base_time(t_mid) - b.times[0]) / b.dt))
            return u[min(max(k, 0), b.n_steps - 1)]
        pos = (self.base_time(t) - b.times[0]) / b.dt
        k = min(max(int(math.floor(pos)), 0), b.n_steps - 1)
        if k >= b.n_steps - 1:
            return u[b.n_steps - 1]
        w = pos - k
        return (1.0 - w) * u[k] + w * u[k + 1]

    def __call__(self, t, x, step):
        t_mid = 0.5 * (step[0] + step[1])
        ub = self.base_control(t, t_mid)
        if self.phase(t_mid) != 1:
            return ub.copy()
        m = self.m
        return ub / m - (m - 1.0) / m * forces(x, self.kernel)


def cheap_feedback(e, beta: float, target, kernel: InteractionKernel) -> np.ndarray:
    """Control values ``-beta (x_i - target) - (1/N) sum_j P(x_i - x_j)``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    x = as_positions(e)
    return -beta * (x - np.asarray(target, dtype=float)) - forces(x, kernel)


def three_phase_feedback(base: Trajectory, s: float, h: float, m: float, kernel: InteractionKernel,
                         interp: str = "hold") -> ThreePhaseFeedback:
    return ThreePhaseFeedback(base, s, h, m, kernel, interp)


# --------------------------------------------------------------------------
# integration


def _check_bound(u, bound, step):
    if np.any(np.linalg.norm(u, axis=-1) > bound * (1 + 1e-12)):
        raise ControlBoundError(f"control norm exceeds bound {bound} at step {step}")


def integrate(spec: ProblemSpec, law: ControlLaw, t_start: float = 0.0, t_end: Optional[float] = None,
              x_start=None, enforce_bound: bool = False) -> Trajectory:
    """RK4 trajectory of the particle system under ``law`` on ``[t_start, t_end]``."""
    dt = spec.dt
    t_end = spec.horizon if t_end is None else t_end
    k0, k1 = _on_grid(t_start, dt), _on_grid(t_end, dt)
    if k1 <= k0:
        raise ValueError("need t_start < t_end")
    x = np.array(spec.initial_positions if x_start is None else as_positions(x_start, spec.dimension))
    K = k1 - k0
    times = dt * np.arange(k0, k1 + 1)
    args = spec.kernel.args

    if isinstance(law, OpenLoopControl):
        j = law.step_index(t_start)
        u = np.ascontiguousarray(law.controls[j:j + K])
        if u.shape[0] != K:
            raise ValueError("open-loop control grid is shorter than the integration window")
        if enforce_bound:
            _check_bound(u, spec.control_bound, 0)
        xs, _, bad = _kernels.rollout(x, u, dt, *args)
        if bad >= 0:
            raise DivergenceError(bad)
        return Trajectory(times, xs, u)

    xs = np.empty((K + 1,) + x.shape)
    us = np.empty((K,) + x.shape)
    xs[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        _rk4_loop(spec, law, times, x, xs, us, enforce_bound)
    return Trajectory(times, xs, us)


def _rk4_loop(spec, law, times, x, xs, us, enforce_bound):
    dt = spec.dt
    for k in range(len(us)):
        t = times[k]
        step = (t, times[k + 1])
        u1 = law(t, x, step)
        if enforce_bound:
            _check_bound(u1, spec.control_bound, k)
        k1_ = forces(x, spec.kernel) + u1
        z = x + 0.5 * dt * k1_
        k2_ = forces(z, spec.kernel) + law(t + 0.5 * dt, z, step)
        z = x + 0.5 * dt * k2_
        k3_ = forces(z, spec.kernel) + law(t + 0.5 * dt, z, step)
        z = x + dt * k3_
        k4_ = forces(z, spec.kernel) + law(t + dt, z, step)
        x = x + (dt / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k)
        xs[k + 1] = x
        us[k] = u1


def integrate_with_tracers(spec: ProblemSpec, law: ControlLaw, tracers, t_end: Optional[float] = None):
    """Advect ``tracers`` by the velocity field of the ensemble from ``spec``.

    The carrier ensemble evolves self-consistently; tracers move with
    ``(P * mu(t))(y) + u(t, y)`` and do not feed back.  Returns the carrier
    trajectory and the tracer positions at every grid time.
    """
    if not law.is_field:
        raise ValueError("tracer advection needs a control law that is a vector field")
    dt = spec.dt
    K = _on_grid(spec.horizon if t_end is None else t_end, dt)
    x = np.array(spec.initial_positions)
    y = np.array(as_positions(tracers, spec.dimension))
    times = dt * np.arange(K + 1)
    xs = np.empty((K + 1,) + x.shape)
    ys = np.empty((K + 1,) + y.shape)
    us = np.empty((K,) + x.shape)
    xs[0], ys[0] = x, y
    P = spec.kernel

    def vel(t, xc, yc, step):
        ux = law(t, xc, step)
        return forces(xc, P) + ux, forces(yc, P, source=xc) + law(t, yc, step), ux

    for k in range(K):
        t = times[k]
        step = (t, times[k + 1])
        a1, b1, u1 = vel(t, x, y, step)
        a2, b2, _ = vel(t + 0.5 * dt, x + 0.5 * dt * a1, y + 0.5 * dt * b1, step)
        a3, b3, _ = vel(t + 0.5 * dt, x + 0.5 * dt * a2, y + 0.5 * dt * b2, step)
        a4, b4, _ = vel(t + dt, x + dt * a3, y + dt * b3, step)
        x = x + (dt / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
        y = y + (dt / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DivergenceError(k)
        xs[k + 1], ys[k + 1], us[k] = x, y, u1
    return Trajectory(times, xs, us), ys


def flow_map_distance(spec: ProblemSpec, law: ControlLaw, e0, f0, t: float) -> float:
    """``max_i |x_i(t) - y_i(t)|`` for two ensembles run under the same law."""
    x0 = as_positions(e0, spec.dimension)
    y0 = as_positions(f0, spec.dimension)
    if x0.shape != y0.shape:
        raise ValueError("ensembles must have the same N and d")
    if _on_grid(t, spec.dt) == 0:
        return float(np.max(np.linalg.norm(x0 - y0, axis=1)))
    a = integrate(spec, law, 0.0, t, x_start=x0)
    b = integrate(spec, law, 0.0, t, x_start=y0)
    return float(np.max(np.linalg.norm(a.positions[-1] - b.positions[-1], axis=1)))


def reparameterization_residuals(base: Trajectory, rescaled: Trajectory, s: float, h: float, m: float) -> dict:
    """Sup-norm gaps between a three-phase run and its time-rescaled base.

    Compares ``x_hat(t)`` with ``x(t)`` before ``s``, with ``x(s + (t - s)/m)``
    on ``[s, s + m h]`` and with ``x(t - (m - 1) h)`` afterwards, at the grid
    times whose base time also lies on the grid.
    """
    dt = base.dt
    out = {}
    spans = {
        "before": (0.0, s, lambda t: t),
        "middle": (s, s + m * h, lambda t: s + (t - s) / m),
        "after": (s + m * h, rescaled.times[-1], lambda t: t - (m - 1) * h),
    }
    for name, (lo, hi, tb) in spans.items():
        worst = 0.0
        for k, t in enumerate(rescaled.times):
            if t < lo - 1e-12 or t > hi + 1e-12:
                continue
            q = (tb(t) - base.times[0]) / dt
            j = int(round(q))
            if abs(q - j) > 1e-9 or not 0 <= j <= base.n_steps:
                continue
            gap = float(np.max(np.linalg.norm(rescaled.positions[k] - base.positions[j], axis=1)))
            worst = max(worst, gap)
        out[name] = worst
    return out
