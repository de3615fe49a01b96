"""Turnpike constants, inequality checks on trajectories and large-N studies.

Every check returns a :class:`CheckReport` holding ``bound - observed`` at
each sampled time; a check passes when no margin falls below
``-1e-8 * (1 + |bound|)``.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .model import ProblemSpec, as_positions, sample_initial

__all__ = [
    "ConstantsError",
    "ConstantsLedger",
    "choose_beta",
    "compute_constants",
    "compute_c5",
    "ledger_for",
    "CheckReport",
    "DecayFit",
    "fit_decay_rate",
    "check_cheap_control",
    "check_moment_growth",
    "check_exponential_turnpike",
    "check_iteration_lemma",
    "check_control_decay",
    "check_cost_decay",
    "check_w2_stability",
    "check_flow_map_stability",
    "StudyRow",
    "StudyResult",
    "meanfield_convergence_study",
]


class ConstantsError(ValueError):
    """Assumption constants or the tau choice make the ledger undefined."""

    def __init__(self, message: str, item: str = ""):
        super().__init__(message)
        self.item = item


# --------------------------------------------------------------------------
# constants


def _require_constants(cp, cpsi, cl, cd=None):
    if cd is not None and not cd > 0:
        raise ConstantsError(f"strict dissipativity requires cd > 0, got {cd}", "i")
    if not cpsi > 0 or not cl > 0:
        raise ConstantsError(f"cost bounds require cpsi > 0 and cl > 0, got cpsi={cpsi}, cl={cl}", "ii")
    if not cp >= 0:
        raise ConstantsError(f"kernel Lipschitz constant must be >= 0, got {cp}", "iii")


def choose_beta(cp: float, cpsi: float, cl: float) -> float:
    """Feedback gain minimizing ``beta*cpsi + (8 cp^2 cpsi + cl) / (2 beta)``."""
    _require_constants(cp, cpsi, cl)
    return math.sqrt((8.0 * cp**2 * cpsi + cl) / (2.0 * cpsi))


def compute_c5(m: float, c4: float, cp: float) -> float:
    """Control-energy constant of the three-phase construction."""
    if m < 1:
        raise ConstantsError(f"m must be >= 1, got {m}")
    return m * c4 * (1.0 + 6.0 * cp**2 * ((m - 1.0) / m) ** 2)


FORMULAS = {
    "beta": "argmin of C~0(beta) unless given",
    "c_beta": "C(beta,C_P) = 2 beta^2 + 8 C_P^2",
    "c0_tilde": "C~0 = (C(beta,C_P) C_Psi + C_L) / (2 beta)",
    "c0": "C0 = C~0 / C_D",
    "c1": "C1 = (2 + 4 C_P) C0 + 1",
    "tau": "tau > C0 C1 (optimal: e C0 C1)",
    "c2_hat": "C^2 = tau / (C0 C1)",
    "alpha": "alpha = log(tau / (C0 C1)) / tau",
    "c2": "C2 = C1 C^2",
    "c4": "C4 = max(C_Psi, C_L)",
    "m": "m = max(2, 2 C4 / C_D)",
    "c5": "C5 = m C4 (1 + 6 C_P^2 ((m-1)/m)^2)",
    "c3": "C3 = 4 C2 C5 / C_D",
}


@dataclass(frozen=True)
class ConstantsLedger:
    cp: float
    cd: float
    cpsi: float
    cl: float
    beta: float
    c_beta: float
    c0_tilde: float
    c0: float
    c1: float
    tau: float
    c2_hat: float
    alpha: float
    c2: float
    c4: float
    m: float
    c5: float
    c3: float
    tau_policy: str = "optimal"

    @property
    def cost_decay_constant(self) -> float:
        return self.cl * self.c2 + self.cpsi * self.c3

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def rows(self) -> list[tuple[str, float, str]]:
        return [(k, getattr(self, k), f) for k, f in FORMULAS.items()]

    def table(self) -> str:
        lines = [f"{'name':<9} {'value':>22}  formula"]
        for name, value, formula in self.rows():
            lines.append(f"{name:<9} {value!r:>22}  {formula}")
        lines.append(f"{'cost':<9} {self.cost_decay_constant!r:>22}  C_L C2 + C_Psi C3")
        return "\n".join(lines)


def compute_constants(cp: float, cd: float, cpsi: float, cl: float, beta: Optional[float] = None,
                      tau: Union[str, float] = "optimal") -> ConstantsLedger:
    """Fill the ledger from the assumption constants.

    ``tau="optimal"`` takes ``tau = e C0 C1``, the maximizer of
    ``log(tau / (C0 C1)) / tau``; a number is used as given and must exceed
    ``C0 C1``.
    """
    _require_constants(cp, cpsi, cl, cd)
    if beta is None:
        beta = choose_beta(cp, cpsi, cl)
    if not beta > 0:
        raise ConstantsError(f"beta must be positive, got {beta}")
    c_beta = 2.0 * beta**2 + 8.0 * cp**2
    c0_tilde = (c_beta * cpsi + cl) / (2.0 * beta)
    c0 = c0_tilde / cd
    c1 = (2.0 + 4.0 * cp) * c0 + 1.0
    floor = c0 * c1
    if tau == "optimal":
        tau_v, policy = math.e * floor, "optimal"
    else:
        tau_v, policy = float(tau), "explicit"
        if not tau_v > floor:
            raise ConstantsError(f"tau = {tau_v} must exceed C0*C1 = {floor}")
    c2_hat = tau_v / floor
    alpha = math.log(c2_hat) / tau_v
    c2 = c1 * c2_hat
    c4 = max(cpsi, cl)
    m = max(2.0, 2.0 * c4 / cd)
    c5 = compute_c5(m, c4, cp)
    c3 = 4.0 * c2 * c5 / cd
    return ConstantsLedger(cp, cd, cpsi, cl, beta, c_beta, c0_tilde, c0, c1, tau_v, c2_hat, alpha, c2,
                           c4, m, c5, c3, policy)


def ledger_for(spec: ProblemSpec, beta: Optional[float] = None, tau: Union[str, float] = "optimal") -> ConstantsLedger:
    c = spec.cost
    return compute_constants(spec.kernel.lipschitz_constant, c.cd, c.cpsi, c.cl, beta, tau)


# --------------------------------------------------------------------------
# reports


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass(frozen=True)
class CheckReport:
    name: str
    params: dict
    times: np.ndarray
    observed: np.ndarray
    bound: np.ndarray
    margins: np.ndarray
    passed: bool
    worst_margin: float
    worst_t: float
    extras: dict = field(default_factory=dict)

    @classmethod
    def build(cls, name, params, times, observed, bound, extras=None) -> "CheckReport":
        t = np.asarray(times, dtype=float)
        obs = np.asarray(observed, dtype=float)
        bnd = np.asarray(bound, dtype=float)
        margins = bnd - obs
        if margins.size == 0:
            return cls(name, dict(params), t, obs, bnd, margins, True, math.inf, math.nan, dict(extras or {}))
        slack = 1e-8 * (1.0 + np.abs(bnd))
        # NaN margins compare False and therefore fail
        passed = bool(np.all(margins >= -slack))
        k = int(np.nanargmin(margins)) if np.any(np.isfinite(margins)) else 0
        if not passed and np.any(np.isnan(margins)):
            k = int(np.flatnonzero(np.isnan(margins))[0])
        return cls(name, dict(params), t, obs, bnd, margins, passed, float(margins[k]), float(t[k]),
                   dict(extras or {}))

    def to_json(self) -> dict:
        return _jsonable({
            "name": self.name,
            "pass": self.passed,
            "worst_margin": self.worst_margin,
            "worst_t": self.worst_t,
            "params": self.params,
            "extras": self.extras,
            "samples": [{"t": t, "observed": o, "bound": b} for t, o, b in zip(self.times, self.observed, self.bound)],
        })

    def line(self) -> str:
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'} (worst margin {self.worst_margin:.6g} at t={self.worst_t:.6g})"


# --------------------------------------------------------------------------
# decay fits


@dataclass(frozen=True)
class DecayFit:
    rate: float
    r2: float
    window: tuple
    shrunk: bool


def fit_decay_rate(times, values, window=(0.1, 0.9)) -> DecayFit:
    """Least-squares exponential rate ``-d log(value) / dt`` on a window of the horizon.

    The window is cut short at the first nonpositive value (flagged as
    ``shrunk``); with fewer than two usable points the rate is NaN.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    t0, t1 = t[0], t[-1]
    lo, hi = t0 + window[0] * (t1 - t0), t0 + window[1] * (t1 - t0)
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    tw, vw = t[sel], v[sel]
    shrunk = False
    bad = np.flatnonzero(~(vw > 0))
    if bad.size:
        shrunk = True
        tw, vw = tw[: bad[0]], vw[: bad[0]]
    if tw.size < 2:
        return DecayFit(math.nan, math.nan, (lo, hi), shrunk)
    y = np.log(vw)
    A = np.column_stack([tw, np.ones_like(tw)])
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * tw + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return DecayFit(float(-slope), r2, (float(tw[0]), float(tw[-1])), shrunk)


# --------------------------------------------------------------------------
# trajectory checks


def _left_integrals(traj, target):
    """Suffix sums ``int_{t_k}^T M2 + (1/N) sum |u|^2`` by the left-endpoint rule."""
    m2 = traj.second_moments(target)
    f = traj.dt * (m2[:-1] + traj.control_energy())
    tail = np.concatenate([np.cumsum(f[::-1])[::-1], [0.0]])
    return m2, tail


def check_cheap_control(traj, ledger: ConstantsLedger, target, a: Optional[float] = None) -> CheckReport:
    """``int_a^T M2 + (1/N) sum |u_i|^2 dt <= C0 M2(a)``; every grid ``a < T`` when ``a`` is None."""
    m2, tail = _left_integrals(traj, target)
    if a is None:
        idx = np.arange(traj.n_steps)
    else:
        k = traj.index(a)
        if not 0 <= k <= traj.n_steps:
            raise ValueError("a outside the trajectory")
        idx = np.array([k])
    return CheckReport.build(
        "cheap_control", {"c0": ledger.c0, "a": a},
        traj.times[idx], tail[idx], ledger.c0 * m2[idx],
    )


def check_moment_growth(traj, ledger: ConstantsLedger, target) -> CheckReport:
    """``M2(t2) <= C1 M2(t1)`` over every grid pair ``t1 <= t2`` (via suffix maxima)."""
    m2 = traj.second_moments(target)
    rev = m2[::-1]
    sufmax = np.maximum.accumulate(rev)[::-1]
    rep = CheckReport.build("moment_growth", {"c1": ledger.c1}, traj.times, sufmax, ledger.c1 * m2)
    k = int(np.argmin(rep.margins))
    j = k + int(np.argmax(m2[k:]))
    rep.extras["witness"] = {"t1": float(traj.times[k]), "t2": float(traj.times[j])}
    return rep


def check_exponential_turnpike(traj, ledger: ConstantsLedger, target) -> CheckReport:
    """``M2(t) <= C2 exp(-alpha t) M2(0)`` on the grid, plus a fitted decay rate of M2."""
    m2 = traj.second_moments(target)
    t = traj.times - traj.times[0]
    if m2[0] == 0.0 and np.any(m2[1:] > 0):
        raise ValueError("M2(0) = 0 but later moments are positive: integrator fault")
    fit = fit_decay_rate(t, m2)
    return CheckReport.build(
        "exponential_turnpike", {"c2": ledger.c2, "alpha": ledger.alpha},
        traj.times, m2, ledger.c2 * np.exp(-ledger.alpha * t) * m2[0],
        extras={"alpha_fit": fit.rate, "r2": fit.r2, "fit_window": list(fit.window), "fit_shrunk": fit.shrunk},
    )


def check_iteration_lemma(traj, ledger: ConstantsLedger, target) -> CheckReport:
    """``M2(t) <= (C0 C1 / tau)^n M2(0)`` for ``t >= n tau``, each ``1 <= n <= T / tau``."""
    m2 = traj.second_moments(target)
    t = traj.times - traj.times[0]
    T = t[-1]
    q = ledger.c0 * ledger.c1 / ledger.tau
    times, obs, bnd = [], [], []
    for n in range(1, int(math.floor(T / ledger.tau + 1e-12)) + 1):
        sel = t >= n * ledger.tau - 1e-12
        times.append(traj.times[sel])
        obs.append(m2[sel])
        bnd.append(np.full(int(sel.sum()), q**n * m2[0]))
    cat = lambda parts: np.concatenate(parts) if parts else np.empty(0)
    return CheckReport.build("iteration_lemma", {"tau": ledger.tau, "ratio": q}, cat(times), cat(obs), cat(bnd),
                             extras={"n_max": len(times)})


def check_control_decay(traj, ledger: ConstantsLedger, target) -> CheckReport:
    """``(1/N) sum |u_i(t)|^2 <= C3 exp(-alpha t) M2(0)`` at every step's left endpoint.

    The bound is an almost-everywhere statement; sampling grid times cannot
    detect a violation on a null set between them.
    """
    m2 = traj.second_moments(target)
    t = traj.times[:-1]
    return CheckReport.build(
        "control_decay", {"c3": ledger.c3, "alpha": ledger.alpha, "c5": ledger.c5},
        t, traj.control_energy(), ledger.c3 * np.exp(-ledger.alpha * (t - traj.times[0])) * m2[0],
    )


def check_cost_decay(traj, ledger: ConstantsLedger, cost) -> CheckReport:
    """Running cost ``<= (C_L C2 + C_Psi C3) exp(-alpha t) M2(0)`` at every step."""
    m2 = traj.second_moments(cost.target)
    t = traj.times[:-1]
    k = ledger.cost_decay_constant
    return CheckReport.build(
        "cost_decay", {"constant": k, "alpha": ledger.alpha},
        t, traj.running_cost(cost), k * np.exp(-ledger.alpha * (t - traj.times[0])) * m2[0],
    )


def _law_bound(spec: ProblemSpec, law) -> tuple[float, Optional[str]]:
    cb = spec.control_bound if math.isfinite(spec.control_bound) else law.lipschitz_bound
    if law.lipschitz_bound is None or not law.is_field:
        return cb, "law is not a fixed Lipschitz vector field"
    if cb is None or law.lipschitz_bound > cb * (1 + 1e-12):
        return cb, f"law Lipschitz bound {law.lipschitz_bound} exceeds C_B = {cb}"
    return cb, None


def _vacuous(name, params, reason):
    rep = CheckReport.build(name, params, [math.nan], [math.inf], [0.0], extras={"vacuous": reason})
    return rep


def check_w2_stability(spec: ProblemSpec, law, e0, f0) -> CheckReport:
    """``W2(mu(t), nu(t)) <= exp((2 C_P + C_B) t) W2(mu0, nu0)`` under one shared control field.

    ``C_B`` is the problem's control bound when finite, otherwise the law's own
    Lipschitz bound.  A law whose Lipschitz bound exceeds ``C_B`` makes the
    inequality vacuous; the report then fails and says why.
    """
    from .dynamics import integrate
    from .transport import wasserstein

    cb, reason = _law_bound(spec, law)
    cp = spec.kernel.lipschitz_constant
    params = {"cp": cp, "cb": cb, "rate": None if cb is None else 2 * cp + cb}
    if reason:
        return _vacuous("w2_stability", params, reason)
    a = integrate(spec.restarted(e0, spec.horizon), law)
    b = integrate(spec.restarted(f0, spec.horizon), law)
    w = np.array([wasserstein(2, x, y) for x, y in zip(a.positions, b.positions)])
    t = a.times
    proxy = max(float(np.max(a.lipschitz_proxy())), float(np.max(b.lipschitz_proxy())))
    return CheckReport.build("w2_stability", params, t, w, np.exp((2 * cp + cb) * t) * w[0],
                             extras={"lipschitz_proxy_max": proxy})


def check_flow_map_stability(spec: ProblemSpec, law, e0, f0) -> CheckReport:
    """One flow map pushing two ensembles: ``W2 <= exp((C_P + C_B) t) W2(mu0, nu0)``.

    The map is the flow of ``e0``'s own velocity field; ``f0`` is carried by
    it as passive tracers.
    """
    from .dynamics import integrate_with_tracers
    from .transport import wasserstein

    cb, reason = _law_bound(spec, law)
    cp = spec.kernel.lipschitz_constant
    params = {"cp": cp, "cb": cb, "rate": None if cb is None else cp + cb}
    if reason:
        return _vacuous("flow_map_stability", params, reason)
    carrier, ys = integrate_with_tracers(spec.restarted(e0, spec.horizon), law, f0)
    w = np.array([wasserstein(2, x, y) for x, y in zip(carrier.positions, ys)])
    t = carrier.times
    return CheckReport.build("flow_map_stability", params, t, w, np.exp((cp + cb) * t) * w[0])


# --------------------------------------------------------------------------
# mean-field studies


@dataclass(frozen=True)
class StudyRow:
    n: int
    seed: int
    t: float
    w2_gap: float
    cost: float
    ok: bool = True


@dataclass
class StudyResult:
    rows: list
    costs: dict
    failed: list

    def median_gaps(self, t_index: int = 0) -> dict:
        """Median over seeds of the gap at the ``t_index``-th sampled time, per N."""
        out = {}
        for n in sorted({r.n for r in self.rows}):
            ts = sorted({r.t for r in self.rows if r.n == n})
            t = ts[t_index]
            out[n] = float(np.median([r.w2_gap for r in self.rows if r.n == n and r.t == t]))
        return out

    def cauchy_gaps(self) -> dict:
        """``|V_N - V_2N| / V_N`` per seed and N, when both costs exist."""
        out = {}
        for (n, seed), v in sorted(self.costs.items()):
            w = self.costs.get((2 * n, seed))
            if w is not None and v is not None and w is not None:
                out[(n, seed)] = abs(v - w) / v if v > 0 else abs(v - w)
        return out

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "seed", "t", "w2_gap", "cost", "ok"])
            for r in self.rows:
                w.writerow([r.n, r.seed, repr(r.t), repr(r.w2_gap), repr(r.cost), int(r.ok)])


def _threads(limit: Optional[int]) -> int:
    env = os.environ.get("TURNPIKE_THREADS")
    n = limit or (int(env) if env else (os.cpu_count() or 1))
    return max(1, n)


def meanfield_convergence_study(template: ProblemSpec, n_list: Sequence[int], mode: str = "cheap_feedback",
                                seeds: Sequence[int] = (0,), initial: Optional[dict] = None,
                                beta: Optional[float] = None, solver_options=None, time_stride: int = 1,
                                threads: Optional[int] = None) -> StudyResult:
    """Compare N- and 2N-particle runs from nested samples of one initial law.

    ``mode`` is ``"cheap_feedback"`` (closed-loop feedback, cost of the
    feedback trajectory) or ``"solve"`` (optimal control, solved cost).  The
    N-point sample is the prefix of the 2N-point sample for the same seed.
    """
    from .dynamics import CheapFeedback, integrate
    from .ocp import solve_ocp, step_costs
    from .transport import wasserstein_mixed

    if mode not in ("cheap_feedback", "solve"):
        raise ValueError(f"unknown study mode {mode!r}")
    n_list = [int(n) for n in n_list]
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("N_list must be nonempty and increasing")
    init = dict(initial or {"kind": "uniform_ball"})
    kind = init.get("kind", "uniform_ball")
    sizes = sorted(set(n_list) | {2 * n for n in n_list})
    d, R = template.dimension, template.support_radius
    c = template.cost
    if beta is None:
        beta = choose_beta(template.kernel.lipschitz_constant, c.cpsi, c.cl)

    def run(cell):
        n, seed = cell
        x0 = sample_initial(kind, n, d, R, seed=seed, sigma=init.get("sigma", 0.5), center=init.get("center"))
        spec = template.restarted(x0, template.horizon)
        try:
            if mode == "cheap_feedback":
                tr = integrate(spec, CheapFeedback(beta, spec.target, spec.kernel))
                v = math.fsum(step_costs(spec, tr.positions, tr.controls).ravel())
                return cell, tr, v, True
            res = solve_ocp(spec, solver_options)
            return cell, res.trajectory, res.cost, bool(res.converged)
        except Exception:  # noqa: BLE001 - failed cells are flagged, the study continues
            return cell, None, None, False

    cells = [(n, s) for s in seeds for n in sizes]
    with ThreadPoolExecutor(max_workers=_threads(threads)) as pool:
        out = {cell: (tr, v, ok) for cell, tr, v, ok in pool.map(run, cells)}

    rows, failed = [], []
    costs = {cell: v for cell, (tr, v, ok) in out.items()}
    for n in n_list:
        for s in seeds:
            tr_a, v_a, ok_a = out[(n, s)]
            tr_b, _, ok_b = out[(2 * n, s)]
            ok = ok_a and ok_b
            if not ok:
                failed.append((n, s))
            if tr_a is None or tr_b is None:
                rows.append(StudyRow(n, s, math.nan, math.nan, math.nan if v_a is None else v_a, False))
                continue
            for k in range(0, tr_a.n_steps + 1, time_stride):
                gap = wasserstein_mixed(2, tr_a.positions[k], tr_b.positions[k])
                rows.append(StudyRow(n, s, float(tr_a.times[k]), gap, v_a, ok))
    return StudyResult(rows, costs, failed)
