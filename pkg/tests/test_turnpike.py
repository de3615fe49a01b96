import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfturnpike.dynamics import CheapFeedback, ConstantControl, ZeroControl, integrate
from mfturnpike.model import InteractionKernel, sample_initial
from mfturnpike.ocp import riccati_lq_oracle, solve_ocp
from mfturnpike.transport import wasserstein
from mfturnpike.turnpike import (CheckReport, ConstantsError, check_cheap_control, check_control_decay,
                                 check_cost_decay, check_exponential_turnpike, check_flow_map_stability,
                                 check_iteration_lemma, check_moment_growth, check_w2_stability, choose_beta,
                                 compute_c5, compute_constants, fit_decay_rate, ledger_for,
                                 meanfield_convergence_study)

from conftest import make_spec, scalar_lq

pos = st.floats(0.05, 20.0)


# ---- constants


def test_choose_beta_examples():
    assert choose_beta(0.0, 1.0, 1.0) == pytest.approx(1 / math.sqrt(2), rel=1e-15)
    assert compute_constants(0.0, 1.0, 1.0, 1.0).c0_tilde == pytest.approx(math.sqrt(2), rel=1e-15)
    assert choose_beta(0.0, 1.0, 4.0) == pytest.approx(math.sqrt(2), rel=1e-15)
    assert compute_constants(0.0, 1.0, 1.0, 4.0).c0_tilde == pytest.approx(2 * math.sqrt(2), rel=1e-15)


@given(st.floats(0.0, 3.0), pos, pos, st.floats(0.1, 10.0))
def test_choose_beta_scale_free_and_minimizing(cp, cpsi, cl, k):
    b = choose_beta(cp, cpsi, cl)
    assert choose_beta(cp, k * cpsi, k * cl) == pytest.approx(b, rel=1e-12)
    f = lambda beta: compute_constants(cp, 1.0, cpsi, cl, beta).c0_tilde
    assert f(b) <= f(1.01 * b) and f(b) <= f(0.99 * b)


@pytest.mark.parametrize("args", [(0.0, 0.0, 1.0), (0.0, 1.0, -1.0), (-1.0, 1.0, 1.0)])
def test_choose_beta_rejects(args):
    with pytest.raises(ConstantsError):
        choose_beta(*args)


def test_quadratic_ledger():
    L = compute_constants(0.0, 1.0, 1.0, 1.0, beta=1.0, tau=12.0)
    assert (L.c_beta, L.c0_tilde, L.c0, L.c1, L.c4, L.m) == (2.0, 1.5, 1.5, 4.0, 1.0, 2.0)
    assert L.c2_hat == 2.0 and L.c2 == 8.0
    assert L.alpha == pytest.approx(math.log(2) / 12, rel=1e-15)
    assert L.c5 == 2.0 and L.c3 == 64.0 and L.cost_decay_constant == 72.0


def test_optimal_tau():
    L = compute_constants(0.0, 1.0, 1.0, 1.0, beta=1.0)
    assert L.tau == pytest.approx(6 * math.e, rel=1e-15)
    assert L.alpha == pytest.approx(1 / (6 * math.e), rel=1e-14)


def test_tau_too_small():
    with pytest.raises(ConstantsError):
        compute_constants(0.0, 1.0, 1.0, 1.0, beta=1.0, tau=6.0)


def test_zero_cd_names_item():
    with pytest.raises(ConstantsError) as info:
        compute_constants(0.0, 0.0, 1.0, 1.0)
    assert info.value.item == "i"


@pytest.mark.parametrize("m,c4,cp,expected", [(2.0, 1.0, 0.0, 2.0), (1.0, 3.0, 2.0, 3.0), (2.0, 1.0, 1.0, 5.0)])
def test_c5(m, c4, cp, expected):
    assert compute_c5(m, c4, cp) == expected


@given(st.floats(0.0, 2.0), pos, pos, pos, st.floats(0.2, 5.0))
def test_ledger_arithmetic(cp, cd, cpsi, cl, beta):
    L = compute_constants(cp, cd, cpsi, cl, beta)
    assert L.c_beta == 2 * beta**2 + 8 * cp**2
    assert L.c0_tilde == (L.c_beta * cpsi + cl) / (2 * beta)
    assert L.c0 == L.c0_tilde / cd
    assert L.c1 == (2 + 4 * cp) * L.c0 + 1 and L.c1 >= 1
    assert L.tau > L.c0 * L.c1 and L.alpha > 0
    assert L.c2 == L.c1 * L.c2_hat
    assert L.m == max(2.0, 2 * max(cpsi, cl) / cd)
    assert L.c3 == 4 * L.c2 * L.c5 / cd


@given(st.floats(0.0, 2.0), pos, pos, pos)
def test_alpha_maximized_at_optimal_tau(cp, cd, cpsi, cl):
    L = compute_constants(cp, cd, cpsi, cl)
    floor = L.c0 * L.c1
    assert L.alpha == pytest.approx(1 / (math.e * floor), rel=1e-12)
    for f in np.linspace(1.05, 10.0, 40):
        assert compute_constants(cp, cd, cpsi, cl, tau=f * floor).alpha <= L.alpha * (1 + 1e-12)


# ---- reports and fits


def test_report_slack_and_json():
    rep = CheckReport.build("x", {}, [0.0, 1.0], [1.0, 2.0 + 1e-9], [1.0, 2.0])
    assert rep.passed and rep.worst_t == 1.0
    bad = CheckReport.build("x", {}, [0.0, 1.0], [1.0, 2.1], [1.0, 2.0])
    assert not bad.passed and bad.worst_margin == pytest.approx(-0.1)
    payload = json.loads(json.dumps(bad.to_json()))
    assert payload["pass"] is False and payload["samples"][1] == {"t": 1.0, "observed": 2.1, "bound": 2.0}


def test_fit_examples():
    t = np.linspace(0, 10, 201)
    f = fit_decay_rate(t, np.exp(-2 * t))
    assert f.rate == pytest.approx(2.0, abs=1e-6) and f.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit_decay_rate(t, np.full_like(t, 3.0)).rate == pytest.approx(0.0, abs=1e-12)


def test_fit_window_shrinks():
    t = np.linspace(0, 10, 101)
    v = np.exp(-t)
    v[60:] = 0.0
    f = fit_decay_rate(t, v)
    assert f.shrunk and f.window[1] < 6.0 and f.rate == pytest.approx(1.0, abs=1e-9)
    assert math.isnan(fit_decay_rate(t, np.zeros_like(t)).rate)


def test_fit_scalar_lq():
    tr = riccati_lq_oracle(20.0, 1.0, 0.01).trajectory
    f = fit_decay_rate(tr.times, tr.second_moments([0.0]))
    assert f.rate == pytest.approx(2.0, abs=0.05) and f.r2 >= 0.99


# ---- trajectory checks


@pytest.fixture(scope="module")
def quad_ledger():
    return compute_constants(0.0, 1.0, 1.0, 1.0, beta=1.0, tau=12.0)


@pytest.fixture(scope="module")
def feedback_run(quad_ledger):
    spec = make_spec(n=6, horizon=5.0, dt=1e-3, seed=11)
    return spec, integrate(spec, CheapFeedback(quad_ledger.beta, spec.target, spec.kernel))


def test_checks_at_target(quad_ledger):
    spec = make_spec(n=3, x0=np.zeros((3, 2)), horizon=2.0, dt=0.1)
    tr = integrate(spec, ZeroControl())
    for rep in (check_cheap_control(tr, quad_ledger, spec.target, 0.0),
                check_moment_growth(tr, quad_ledger, spec.target),
                check_exponential_turnpike(tr, quad_ledger, spec.target),
                check_control_decay(tr, quad_ledger, spec.target),
                check_cost_decay(tr, quad_ledger, spec.cost)):
        assert rep.passed and rep.worst_margin == 0.0


def test_cheap_control_closed_form(feedback_run, quad_ledger):
    spec, tr = feedback_run
    beta, T, dt = 1.0, spec.horizon, spec.dt
    m0 = tr.second_moments(spec.target)[0]
    rep = check_cheap_control(tr, quad_ledger, spec.target, 0.0)
    # left-endpoint sum of (1 + beta^2) m0 exp(-2 beta t)
    q = math.exp(-2 * beta * dt)
    discrete = (1 + beta**2) * m0 * dt * (1 - q ** round(T / dt)) / (1 - q)
    assert rep.observed[0] == pytest.approx(discrete, rel=1e-9)
    continuous = (1 + beta**2) / (2 * beta) * m0 * (1 - math.exp(-2 * beta * T))
    assert rep.observed[0] == pytest.approx(continuous, rel=2 * beta * dt)
    assert rep.passed and rep.worst_margin > 0


def test_all_grid_starts(feedback_run, quad_ledger):
    spec, tr = feedback_run
    rep = check_cheap_control(tr, quad_ledger, spec.target)
    assert rep.passed and len(rep.times) == tr.n_steps


@pytest.mark.parametrize("kappa", [0.0, 0.5, 1.0])
def test_feedback_trajectories_satisfy_bounds(kappa):
    spec = make_spec(n=8, kappa=kappa, horizon=20.0, dt=0.05, seed=2)
    L = ledger_for(spec)
    tr = integrate(spec, CheapFeedback(L.beta, spec.target, spec.kernel))
    reps = [check_cheap_control(tr, L, spec.target), check_moment_growth(tr, L, spec.target),
            check_exponential_turnpike(tr, L, spec.target), check_control_decay(tr, L, spec.target),
            check_cost_decay(tr, L, spec.cost), check_iteration_lemma(tr, L, spec.target)]
    assert all(r.passed for r in reps), [r.line() for r in reps if not r.passed]


def test_moment_growth_adversarial(quad_ledger):
    spec = make_spec(n=2, x0=np.zeros((2, 2)), horizon=1.0, dt=0.1)
    tr = integrate(spec, ConstantControl([1.0, 0.0]))
    rep = check_moment_growth(tr, quad_ledger, spec.target)
    assert not rep.passed
    assert rep.extras["witness"]["t1"] == 0.0 and rep.extras["witness"]["t2"] == 1.0


def test_moment_growth_monotone_decay(feedback_run, quad_ledger):
    spec, tr = feedback_run
    assert check_moment_growth(tr, quad_ledger, spec.target).passed


def test_exponential_turnpike_flags_fault(quad_ledger):
    spec = make_spec(n=2, x0=np.zeros((2, 2)), horizon=1.0, dt=0.1)
    tr = integrate(spec, ConstantControl([1.0, 0.0]))
    with pytest.raises(ValueError, match="integrator fault"):
        check_exponential_turnpike(tr, quad_ledger, spec.target)


def test_exponential_turnpike_scalar_lq():
    spec = scalar_lq(horizon=20.0, dt=0.01)
    L = ledger_for(spec)
    rep = check_exponential_turnpike(solve_ocp(spec).trajectory, L, spec.target)
    assert rep.passed and rep.extras["alpha_fit"] >= L.alpha


def test_control_and_cost_decay_scalar_lq(quad_ledger):
    spec = scalar_lq(horizon=10.0, dt=0.01)
    tr = solve_ocp(spec).trajectory
    assert check_control_decay(tr, quad_ledger, spec.target).passed
    assert check_cost_decay(tr, quad_ledger, spec.cost).passed


def test_iteration_lemma_grid():
    spec = make_spec(n=4, horizon=20.0, dt=0.05)
    L = compute_constants(0.0, 1.0, 1.0, 1.0, beta=1.0, tau=7.0)
    tr = solve_ocp(spec).trajectory
    rep = check_iteration_lemma(tr, L, spec.target)
    assert rep.extras["n_max"] == 2 and rep.passed
    assert check_exponential_turnpike(tr, L, spec.target).passed


# ---- stability


@pytest.mark.parametrize("kappa", [0.0, 1.0])
def test_w2_stability_feedback(kappa):
    e0 = sample_initial("uniform_ball", 6, 2, 1.0, seed=20)
    f0 = sample_initial("uniform_ball", 6, 2, 1.0, seed=21)
    spec = make_spec(x0=e0, n=6, kappa=kappa, horizon=3.0, dt=0.05)
    law = CheapFeedback(1.0, spec.target, spec.kernel, reference=e0)
    rep = check_w2_stability(spec, law, e0, f0)
    assert rep.passed
    assert rep.margins[-1] > rep.margins[1] > 0
    assert check_flow_map_stability(spec, law, e0, f0).passed


def test_w2_stability_trivial_cases():
    e0 = sample_initial("uniform_ball", 4, 2, 1.0, seed=3)
    f0 = sample_initial("uniform_ball", 4, 2, 1.0, seed=4)
    spec = make_spec(x0=e0, n=4, horizon=2.0, dt=0.1)
    same = check_w2_stability(spec, CheapFeedback(1.0, spec.target, spec.kernel, reference=e0), e0, e0)
    assert same.passed and np.all(same.observed == 0)
    free = check_w2_stability(spec, ZeroControl(), e0, f0)
    assert free.passed
    np.testing.assert_allclose(free.observed, wasserstein(2, e0, f0), rtol=1e-12)


def test_w2_stability_vacuous():
    e0 = sample_initial("uniform_ball", 4, 2, 1.0, seed=3)
    spec = make_spec(x0=e0, n=4, horizon=1.0, dt=0.1, control_bound=0.5)
    rep = check_w2_stability(spec, CheapFeedback(1.0, spec.target, spec.kernel, reference=e0), e0, e0)
    assert not rep.passed and "exceeds" in rep.extras["vacuous"]
    closed = CheapFeedback(1.0, spec.target, spec.kernel)
    assert not check_w2_stability(spec.replace(control_bound=math.inf), closed, e0, e0).passed


# ---- studies


def test_study_decoupled_contraction():
    spec = make_spec(n=8, horizon=2.0, dt=0.05)
    st_ = meanfield_convergence_study(spec, [4, 8], seeds=[0, 1], beta=1.0, time_stride=10)
    assert not st_.failed
    for n in (4, 8):
        for s in (0, 1):
            rows = [r for r in st_.rows if r.n == n and r.seed == s]
            assert len(rows) == 5
            g0 = rows[0].w2_gap
            for r in rows:
                assert r.w2_gap == pytest.approx(math.exp(-r.t) * g0, rel=1e-6)


def test_study_is_nested_and_deterministic():
    spec = make_spec(n=8, kappa=0.5, horizon=1.0, dt=0.1)
    a = meanfield_convergence_study(spec, [4, 8], seeds=[3], threads=2)
    b = meanfield_convergence_study(spec, [4, 8], seeds=[3], threads=1)
    assert a.rows == b.rows


def test_study_solved_cauchy_gaps():
    spec = make_spec(n=8, kappa=0.5, horizon=4.0, dt=0.1)
    st_ = meanfield_convergence_study(spec, [8, 16], mode="solve", seeds=[0])
    gaps = st_.cauchy_gaps()
    assert set(gaps) == {(8, 0), (16, 0)} and all(g >= 0 for g in gaps.values())


def test_study_rejects_bad_list():
    with pytest.raises(ValueError):
        meanfield_convergence_study(make_spec(), [16, 8])
