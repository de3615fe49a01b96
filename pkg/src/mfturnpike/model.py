"""Problem instances: interaction kernels, running costs, particle ensembles.

All types are frozen after construction.  Arrays held by them are made
read-only so instances can be shared between worker threads.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import _kernels

__all__ = [
    "InteractionKernel",
    "CostSpec",
    "ProblemSpec",
    "ParticleEnsemble",
    "Violation",
    "validate_spec",
    "second_moment",
    "as_positions",
    "sample_initial",
    "spec_from_dict",
    "spec_to_dict",
]

_KIND_CODES = {
    "zero": _kernels.ZERO,
    "linear": _kernels.LINEAR,
    "saturating": _kernels.SATURATING,
    "tabulated": _kernels.TABULATED,
}


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def as_positions(e, dim: Optional[int] = None) -> np.ndarray:
    """Coerce an ensemble or array-like to a float (N, d) array."""
    if isinstance(e, ParticleEnsemble):
        x = e.positions
    else:
        x = np.asarray(e, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"positions must be (N, d), got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"dimension mismatch: expected d={dim}, got d={x.shape[1]}")
    return x


# --------------------------------------------------------------------------
# kernels


@dataclass(frozen=True, eq=False)
class InteractionKernel:
    """Radial pairwise interaction ``P(z) = -phi(|z|) z``.

    ``lipschitz_constant`` is the declared ``C_P``; :func:`validate_spec`
    checks it against sampled pairs.
    """

    kind: str
    kappa: float = 0.0
    lipschitz_constant: float = 0.0
    radii: np.ndarray = field(default_factory=lambda: _frozen([]))
    values: np.ndarray = field(default_factory=lambda: _frozen([]))

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.lipschitz_constant < 0:
            raise ValueError("kernel Lipschitz constant must be >= 0")
        object.__setattr__(self, "radii", _frozen(self.radii))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.kind == "tabulated":
            if self.radii.size < 2 or self.radii.shape != self.values.shape:
                raise ValueError("tabulated kernel needs matching radii/values, >= 2 nodes")
            if np.any(np.diff(self.radii) <= 0) or self.radii[0] < 0:
                raise ValueError("tabulated radii must be nonnegative and increasing")

    def _key(self):
        return (self.kind, self.kappa, self.lipschitz_constant, self.radii.tobytes(), self.values.tobytes())

    def __eq__(self, other):
        return isinstance(other, InteractionKernel) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    @classmethod
    def zero(cls) -> "InteractionKernel":
        return cls("zero")

    @classmethod
    def linear(cls, kappa: float, cp: Optional[float] = None) -> "InteractionKernel":
        """``P(z) = -kappa z``; the exact Lipschitz constant is ``|kappa|``."""
        return cls("linear", kappa, abs(kappa) if cp is None else cp)

    @classmethod
    def saturating(cls, kappa: float, cp: Optional[float] = None) -> "InteractionKernel":
        """``P(z) = -kappa z / (1 + |z|^2)``, C_P estimated by sampling when not given."""
        k = cls("saturating", kappa, 0.0)
        if cp is None:
            cp = 1.1 * k.estimate_lipschitz()
        return dataclasses.replace(k, lipschitz_constant=cp)

    @classmethod
    def tabulated(cls, radii, values, cp: Optional[float] = None) -> "InteractionKernel":
        """``phi`` piecewise linear on ``radii``, held constant outside the table."""
        k = cls("tabulated", 0.0, 0.0, radii, values)
        if cp is None:
            cp = 1.1 * k.estimate_lipschitz()
        return dataclasses.replace(k, lipschitz_constant=cp)

    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    @property
    def args(self) -> tuple:
        """Positional arguments for the compiled loops."""
        radii = self.radii if self.radii.size else np.zeros(1)
        values = self.values if self.values.size else np.zeros(1)
        return (self.code, float(self.kappa), np.ascontiguousarray(radii), np.ascontiguousarray(values))

    def profile(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = np.asarray(r, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(r), np.zeros_like(r)
        if self.kind == "linear":
            return np.full_like(r, self.kappa), np.zeros_like(r)
        if self.kind == "saturating":
            q = 1.0 + r**2
            return self.kappa / q, -2.0 * self.kappa / q**2
        phi = np.interp(r, self.radii, self.values)
        j = np.clip(np.searchsorted(self.radii, r, side="right") - 1, 0, self.radii.size - 2)
        slope = np.diff(self.values)[j] / np.diff(self.radii)[j]
        inside = (r > 0) & (r >= self.radii[0]) & (r < self.radii[-1])
        dphi_r = np.where(inside, slope / np.where(r > 0, r, 1.0), 0.0)
        return phi, dphi_r

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        phi, _ = self.profile(np.linalg.norm(z, axis=-1))
        return -phi[..., None] * z

    def jacobian(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        phi, dphi_r = self.profile(np.linalg.norm(z, axis=-1))
        d = z.shape[-1]
        eye = np.eye(d)
        return -phi[..., None, None] * eye - dphi_r[..., None, None] * z[..., :, None] * z[..., None, :]

    def estimate_lipschitz(self, radius: float = 10.0, n: int = 4096, dim: int = 3) -> float:
        """Largest sampled spectral norm of the Jacobian (origin included)."""
        pts = _ball_points(dim, radius, n)
        norms = np.linalg.norm(self.jacobian(pts), ord=2, axis=(-2, -1))
        return float(norms.max())


# --------------------------------------------------------------------------
# costs


def _quad_state(target, weight):
    return lambda x: weight * np.sum((x - target) ** 2, axis=-1)


def _quad_state_grad(target, weight):
    return lambda x: 2.0 * weight * (x - target)


def _quad_control(weight):
    return lambda u: weight * np.sum(u**2, axis=-1)


def _quad_control_grad(weight):
    return lambda u: 2.0 * weight * u


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``L(x) + Psi(u)`` with its declared assumption constants.

    Callables act on the trailing axis: ``(..., d) -> (...)`` for the costs
    and ``(..., d) -> (..., d)`` for their gradients.  The constants are
    declared by the caller and checked by :func:`validate_spec`, never
    inferred.
    """

    target: np.ndarray
    cd: float
    cpsi: float
    cl: float
    state_cost: Callable
    state_grad: Callable
    control_cost: Callable
    control_grad: Callable
    kind: str = "custom"
    state_weight: float = 1.0
    control_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "target", _frozen(np.atleast_1d(self.target)))

    @classmethod
    def quadratic(cls, target, cd=1.0, cpsi=1.0, cl=1.0, state_weight=1.0, control_weight=1.0):
        """``L = q|x - target|^2``, ``Psi = r|u|^2``."""
        target = _frozen(np.atleast_1d(target))
        return cls(
            target, float(cd), float(cpsi), float(cl),
            _quad_state(target, state_weight), _quad_state_grad(target, state_weight),
            _quad_control(control_weight), _quad_control_grad(control_weight),
            kind="quadratic", state_weight=float(state_weight), control_weight=float(control_weight),
        )

    def running(self, x, u) -> np.ndarray:
        """Per-particle running cost ``L(x_i) + Psi(u_i)``."""
        return self.state_cost(x) + self.control_cost(u)


# --------------------------------------------------------------------------
# ensembles and problems


@dataclass(frozen=True)
class ParticleEnsemble:
    """N particle positions in d dimensions, the atoms of an empirical measure."""

    positions: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"positions must be (N, d) with N >= 1, got {x.shape}")
        object.__setattr__(self, "positions", _frozen(x))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def second_moment(self, target) -> float:
        return second_moment(self, target)


def second_moment(e, target) -> float:
    """Mean squared distance ``(1/N) sum_i |x_i - target|^2``."""
    target = np.atleast_1d(np.asarray(target, dtype=float))
    x = as_positions(e, dim=target.shape[0])
    return float(np.mean(np.sum((x - target) ** 2, axis=1)))


@dataclass(frozen=True)
class ProblemSpec:
    """A full instance of the N-particle optimal control problem."""

    dimension: int
    horizon: float
    dt: float
    kernel: InteractionKernel
    cost: CostSpec
    initial_positions: np.ndarray
    support_radius: float
    control_bound: float = math.inf

    def __post_init__(self):
        x0 = as_positions(self.initial_positions, dim=self.dimension)
        object.__setattr__(self, "initial_positions", _frozen(x0))
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.horizon <= 0 or self.dt <= 0:
            raise ValueError("horizon and dt must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
            raise ValueError(f"horizon/dt = {steps} is not a positive integer")
        if self.cost.target.shape != (self.dimension,):
            raise ValueError("cost target dimension does not match the problem")
        if self.support_radius <= 0:
            raise ValueError("support radius must be positive")
        radii = np.linalg.norm(x0, axis=1)
        if np.any(radii > self.support_radius * (1 + 1e-12)):
            raise ValueError(
                f"initial particle at radius {radii.max():.6g} outside the support ball "
                f"B(0, {self.support_radius})"
            )
        if not self.control_bound > 0:
            raise ValueError("control bound must be positive")

    @property
    def particle_count(self) -> int:
        return self.initial_positions.shape[0]

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def target(self) -> np.ndarray:
        return self.cost.target

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)

    def restarted(self, positions, horizon: float) -> "ProblemSpec":
        """Same dynamics and cost, new initial ensemble and horizon."""
        x = as_positions(positions, dim=self.dimension)
        radius = max(self.support_radius, float(np.linalg.norm(x, axis=1).max()) * (1 + 1e-9))
        return dataclasses.replace(self, initial_positions=x, horizon=horizon, support_radius=radius)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    item: str
    message: str
    witness: tuple

    def __str__(self):
        return f"[{self.item}] {self.message}; witness {self.witness}"


def _ball_points(dim: int, radius: float, n: int) -> np.ndarray:
    """Deterministic points in the closed ball: axis grid plus a Sobol fill."""
    axis = np.linspace(-1.0, 1.0, 21)
    grid = np.concatenate([np.outer(axis, np.eye(dim)[k]) for k in range(dim)])
    m = int(math.ceil(math.log2(max(n, 2))))
    cube = 2.0 * qmc.Sobol(dim, scramble=False).random_base2(m) - 1.0
    fill = cube[np.linalg.norm(cube, axis=1) <= 1.0][: max(n - len(grid), 0)]
    return radius * np.concatenate([grid, fill])


def validate_spec(spec: ProblemSpec, n_samples: int = 10_000) -> list[Violation]:
    """Check the declared assumption constants on sampled points.

    States are sampled in ``B(target, 2R)``, controls in ``B(0, C_B)`` (or
    ``B(0, 2R)`` when the control bound is infinite), kernel arguments in
    ``B(0, 4R)``.  Strict dissipativity is tested through the pointwise
    surrogate ``L(x) + Psi(u) >= C_D (|x - target|^2 + |u|^2)``, which implies
    the integrated form.
    """
    out: list[Violation] = []
    d = spec.dimension
    c = spec.cost
    R = spec.support_radius
    ctrl_r = spec.control_bound if math.isfinite(spec.control_bound) else 2 * R
    rtol, atol = 1e-10, 1e-14

    for name, value in (("cd", c.cd), ("cpsi", c.cpsi), ("cl", c.cl)):
        if not value > 0:
            out.append(Violation("i" if name == "cd" else "ii", f"{name} must be positive, got {value}", ()))
    if out:
        return out

    dx = _ball_points(d, 2 * R, n_samples)
    du = _ball_points(d, ctrl_r, n_samples)
    x = c.target + dx
    L = c.state_cost(x)
    r2 = np.sum(dx**2, axis=1)
    bad = L > c.cl * r2 * (1 + rtol) + atol
    if bad.any():
        k = int(np.argmax(np.where(bad, L - c.cl * r2, -np.inf)))
        out.append(Violation("ii", f"state cost exceeds C_L|x - target|^2 with C_L={c.cl}", tuple(dx[k])))
    psi = c.control_cost(du)
    u2 = np.sum(du**2, axis=1)
    bad = psi > c.cpsi * u2 * (1 + rtol) + atol
    if bad.any():
        k = int(np.argmax(np.where(bad, psi - c.cpsi * u2, -np.inf)))
        out.append(Violation("ii", f"control cost exceeds C_Psi|u|^2 with C_Psi={c.cpsi}", tuple(du[k])))

    joint = _ball_points(2 * d, 1.0, n_samples)
    jx = c.target + 2 * R * joint[:, :d]
    ju = ctrl_r * joint[:, d:]
    lhs = c.running(jx, ju)
    rhs = c.cd * (np.sum((jx - c.target) ** 2, axis=1) + np.sum(ju**2, axis=1))
    bad = lhs < rhs * (1 - rtol) - atol
    if bad.any():
        k = int(np.argmax(np.where(bad, rhs - lhs, -np.inf)))
        out.append(Violation(
            "i", f"strict dissipativity fails with C_D={c.cd}",
            tuple(np.concatenate([jx[k] - c.target, ju[k]])),
        ))

    P = spec.kernel
    p0 = P(np.zeros(d))
    if np.any(p0 != 0):
        out.append(Violation("iii", "kernel does not vanish at the origin", tuple(p0)))
    pairs = _ball_points(2 * d, 4 * R, n_samples)
    za, zb = pairs[:, :d], pairs[:, d:]
    # pair every point with the origin too, where saturating kernels are steepest
    za = np.concatenate([za, za])
    zb = np.concatenate([zb, np.zeros_like(zb)])
    gap = np.linalg.norm(P(za) - P(zb), axis=1)
    dist = np.linalg.norm(za - zb, axis=1)
    bad = gap > P.lipschitz_constant * dist * (1 + 1e-9) + atol
    if bad.any():
        k = int(np.argmax(np.where(bad, gap - P.lipschitz_constant * dist, -np.inf)))
        out.append(Violation(
            "iii", f"kernel Lipschitz bound C_P={P.lipschitz_constant} violated",
            (tuple(za[k]), tuple(zb[k])),
        ))
    return out


# --------------------------------------------------------------------------
# sampling and config


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for one cell of a seeded computation."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def sample_initial(kind: str, n: int, dim: int, radius: float, seed: int = 0, sigma: float = 0.5,
                   center: Optional[Sequence[float]] = None) -> np.ndarray:
    """Draw i.i.d. initial positions supported in ``B(0, radius)``.

    The draw is nested: the first ``n`` points of a larger draw with the same
    seed are exactly the smaller draw.
    """
    rng = rng_for(seed)
    if kind == "uniform_ball":
        pts = np.empty((n, dim))
        for i in range(n):
            g = rng.standard_normal(dim)
            pts[i] = radius * rng.random() ** (1.0 / dim) * g / np.linalg.norm(g)
        return pts
    if kind == "gaussian_truncated":
        c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        pts = np.empty((n, dim))
        for i in range(n):
            while True:
                p = c + sigma * rng.standard_normal(dim)
                if np.linalg.norm(p) < radius:
                    pts[i] = p
                    break
        return pts
    raise ValueError(f"unknown initial distribution {kind!r}")


def kernel_from_dict(d: dict) -> InteractionKernel:
    kind = d.get("kind", "zero")
    cp = d.get("cp")
    if kind == "zero":
        return InteractionKernel("zero", 0.0, 0.0 if cp is None else cp)
    if kind == "linear":
        return InteractionKernel.linear(d["kappa"], cp)
    if kind == "saturating":
        return InteractionKernel.saturating(d["kappa"], cp)
    if kind == "tabulated":
        return InteractionKernel.tabulated(d["radii"], d["values"], cp)
    raise ValueError(f"unknown kernel kind {kind!r}")


def spec_from_dict(cfg: dict, seed: Optional[int] = None) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from the problem keys of a config mapping."""
    dim = int(cfg["dimension"])
    cost_cfg = cfg.get("cost", {})
    target = cost_cfg.get("target", [0.0] * dim)
    cost = CostSpec.quadratic(
        target,
        cd=cost_cfg.get("cd", 1.0), cpsi=cost_cfg.get("cpsi", 1.0), cl=cost_cfg.get("cl", 1.0),
        state_weight=cost_cfg.get("state_weight", 1.0),
        control_weight=cost_cfg.get("control_weight", 1.0),
    )
    R = float(cfg.get("support_radius", 1.0))
    init = cfg.get("initial", {"kind": "uniform_ball"})
    if init.get("kind") == "explicit":
        x0 = np.asarray(init["positions"], dtype=float).reshape(-1, dim)
    else:
        s = init.get("seed", 0) if seed is None else seed
        x0 = sample_initial(init.get("kind", "uniform_ball"), int(cfg["particles"]), dim, R,
                            seed=s, sigma=init.get("sigma", 0.5), center=init.get("center"))
    return ProblemSpec(
        dimension=dim,
        horizon=float(cfg["horizon"]),
        dt=float(cfg["dt"]),
        kernel=kernel_from_dict(cfg.get("kernel", {"kind": "zero"})),
        cost=cost,
        initial_positions=x0,
        support_radius=R,
        control_bound=math.inf if cfg.get("control_bound") is None else float(cfg["control_bound"]),
    )


def spec_to_dict(spec: ProblemSpec) -> dict:
    """Serialize the quadratic-cost problem keys (positions written explicitly)."""
    if spec.cost.kind != "quadratic":
        raise ValueError("only quadratic costs serialize to config form")
    k = spec.kernel
    kernel = {"kind": k.kind, "kappa": k.kappa, "cp": k.lipschitz_constant}
    if k.kind == "tabulated":
        kernel.update(radii=k.radii.tolist(), values=k.values.tolist())
    return {
        "dimension": spec.dimension,
        "particles": spec.particle_count,
        "horizon": spec.horizon,
        "dt": spec.dt,
        "kernel": kernel,
        "cost": {
            "cd": spec.cost.cd, "cpsi": spec.cost.cpsi, "cl": spec.cost.cl,
            "target": spec.cost.target.tolist(),
            "state_weight": spec.cost.state_weight, "control_weight": spec.cost.control_weight,
        },
        "control_bound": spec.control_bound if math.isfinite(spec.control_bound) else None,
        "support_radius": spec.support_radius,
        "initial": {"kind": "explicit", "positions": spec.initial_positions.tolist()},
    }
