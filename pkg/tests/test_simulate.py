import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import aslyap as al
from aslyap.simulate import build_decay_gauge, default_weight_rule


def _inline(dynamics, n=1, m=1, candidate="", domain=None):
    lower, upper = domain or ("-1" + ", -1" * (n - 1), "1" + ", 1" * (n - 1))
    return al.parse_model(
        f"[dimensions]\nstate = {n}\nnoise = {m}\n[controls]\nhold = 0.0\n"
        f"[dynamics]\n{dynamics}\n"
        + (f"[candidate]\n{candidate}\n" if candidate else "")
        + f"[domain]\nlower = {lower}\nupper = {upper}\n"
    )


# -------------------------------------------------------------- determinism

def test_same_seed_bit_identical(rotational):
    kw = dict(x0=[0.5, 0.0], dt=1e-3, T=1.0, n_paths=100, seed=99,
              candidate=rotational.candidate, gauge=rotational.gauge)
    a = al.simulate_ensemble(rotational.model, **kw)
    b = al.simulate_ensemble(rotational.model, **kw)
    assert np.array_equal(a.sup_radius, b.sup_radius)
    assert np.array_equal(a.final_states, b.final_states)
    assert np.array_equal(a.supermax_excess, b.supermax_excess)
    assert a.to_csv() == b.to_csv()


def test_workers_do_not_change_results(rotational):
    kw = dict(x0=[0.5, 0.0], dt=1e-3, T=0.5, n_paths=128, seed=5)
    a = al.simulate_ensemble(rotational.model, **kw, workers=1)
    b = al.simulate_ensemble(rotational.model, **kw, workers=3)
    assert np.array_equal(a.final_states, b.final_states)
    assert np.array_equal(a.timeline_max_radius, b.timeline_max_radius)


def test_single_path_runs(linear1d):
    ens = al.simulate_ensemble(linear1d.model, [0.4], dt=1e-3, T=1.0, n_paths=1, seed=1)
    assert ens.final_states.shape == (1, 1)


# ----------------------------------------------------------- path statistics

def test_deterministic_decay_statistics(linear1d):
    ens = al.simulate_ensemble(linear1d.model, [1.0], dt=1e-3, T=5.0,
                               n_paths=20, seed=2)
    assert ens.sup_radius == pytest.approx(np.ones(20))
    final = np.linalg.norm(ens.final_states, axis=1)
    assert final == pytest.approx(np.exp(-5.0), rel=0.01)
    assert not ens.exited.any()


def test_rotational_pathwise_radius_bound(rotational):
    dt = 1e-3
    ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=dt, T=2.0,
                               n_paths=300, seed=8)
    assert ens.sup_radius.max() <= 0.5 * (1 + 5 * np.sqrt(dt))
    final = np.linalg.norm(ens.final_states, axis=1)
    # |X_T| = 0.5 e^{-0.5 T} pathwise up to Euler noise
    assert np.abs(final - 0.5 * np.exp(-1.0)).max() <= 0.15 * 0.5 * np.exp(-1.0)


def test_exit_flagging(unstable1d):
    ens = al.simulate_ensemble(unstable1d.model, [0.5], dt=1e-3, T=5.0,
                               n_paths=10, seed=3)
    assert ens.exited.all()
    assert np.isfinite(ens.exit_times).all()
    # statistics freeze at the exit: sup radius stays within the box
    assert ens.sup_radius.max() <= 1.0 + 1e-12


def test_dt_halving_shrinks_radius_overshoot(rotational):
    def overshoot(dt):
        ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=dt, T=2.0,
                                   n_paths=400, seed=13)
        return ens.sup_radius.max() - 0.5

    big, small = overshoot(2e-3), overshoot(1e-3)
    assert big / small >= 1.3


def test_thinned_path_storage(rotational):
    ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=1e-2, T=0.1,
                               n_paths=3, seed=4, thin=5)
    assert ens.paths.shape == (3, 3, 2)  # t = 0, 0.05, 0.1
    assert ens.path_times == pytest.approx([0.0, 0.05, 0.1])
    text = ens.paths_csv()
    assert text.splitlines()[0] == "t,x1,x2,path"


def test_increment_mode_validation(rotational):
    with pytest.raises(ValueError, match="increment"):
        al.simulate_ensemble(rotational.model, [0.1, 0], dt=1e-3, T=0.1,
                             n_paths=1, seed=0, increment_mode="cauchy")


# -------------------------------------------------------- stabilizability fit

def test_stabilizability_gauge_rotational(rotational):
    x0s = [[r, 0.0] for r in (0.1, 0.25, 0.4)]
    est = al.estimate_stabilizability_gauge(rotational.model, 0, x0s, dt=1e-3,
                                            T=3.0, n_paths=100, seed=6)
    assert est.consistent
    # envelope approximately the identity
    assert est.worst_sup == pytest.approx(est.radii, rel=0.05)
    g = est.gauge
    assert g(0.0) == 0.0
    assert (np.diff(g(np.linspace(0, 0.5, 20))) > 0).all()


def test_stabilizability_negative_for_expansion(unstable1d):
    est = al.estimate_stabilizability_gauge(unstable1d.model, 0, [[0.3], [0.5]],
                                            dt=1e-3, T=10.0, n_paths=20, seed=6)
    assert not est.consistent
    assert "left the domain" in est.reason


def test_stabilizability_zero_initial_radius(linear1d):
    ens = al.simulate_ensemble(linear1d.model, [0.0], dt=1e-3, T=1.0, n_paths=10,
                               seed=7)
    assert ens.sup_radius.max() == 0.0


# --------------------------------------------------------------- decay fits

def test_decay_envelope_rotational(rotational):
    ens = [al.simulate_ensemble(rotational.model, [r, 0.0], dt=1e-3, T=6.0,
                                n_paths=100, seed=20 + i)
           for i, r in enumerate((0.25, 0.5))]
    est = al.estimate_decay_envelope(ens)
    assert est.asymptotic
    assert est.kappa == pytest.approx(0.5, abs=0.1)
    beta = est.gauge
    # envelope dominates the sampled curves
    for e in ens:
        bound = beta(e.initial_radius, e.timeline_times)
        assert (e.timeline_max_radius <= bound * (1 + 1e-9)).all()


def test_decay_envelope_neutral_system():
    pm = _inline("f1 = 0")
    ens = [al.simulate_ensemble(pm.model, [0.3], dt=1e-2, T=5.0, n_paths=10, seed=1)]
    est = al.estimate_decay_envelope(ens)
    assert not est.asymptotic
    assert est.stable
    assert abs(est.kappa) <= 1e-6


def test_decay_envelope_linear_rate(linear1d):
    ens = [al.simulate_ensemble(linear1d.model, [0.5], dt=1e-3, T=6.0,
                                n_paths=20, seed=2)]
    est = al.estimate_decay_envelope(ens)
    assert est.kappa == pytest.approx(1.0, abs=0.1)


# ----------------------------------------------------------- occupation times

def test_occupation_times_match_closed_form(rotational):
    radii = 0.5 * 2.0 ** (-np.arange(6))
    ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=1e-3, T=12.0,
                               n_paths=200, seed=9, occupation_radii=radii)
    occ = al.measure_occupation_times([ens], radii)
    assert not occ.censored.any()
    exact = np.log(0.5 / radii) / 0.5
    # max over paths biases late; the log-noise scale bounds the bias
    assert (occ.times >= exact - 0.05).all()
    assert (occ.times <= exact * 1.15 + 0.25).all()
    assert (np.diff(occ.times) >= 0).all()


def test_occupation_zero_when_never_outside(linear1d):
    radii = np.array([0.5])
    ens = al.simulate_ensemble(linear1d.model, [0.4], dt=1e-3, T=2.0, n_paths=10,
                               seed=10, occupation_radii=radii)
    occ = al.measure_occupation_times([ens], radii)
    assert occ.times[0] == 0.0


def test_occupation_censoring_flagged():
    pm = _inline("f1 = 0")
    radii = np.array([0.2])
    ens = al.simulate_ensemble(pm.model, [0.3], dt=1e-2, T=1.0, n_paths=5, seed=11,
                               occupation_radii=radii)
    occ = al.measure_occupation_times([ens], radii)
    assert occ.censored[0]
    with pytest.raises(ValueError, match="longer T"):
        build_decay_gauge(occ)


def test_occupation_requires_tracking(rotational):
    ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=1e-2, T=0.1,
                               n_paths=2, seed=1)
    with pytest.raises(ValueError, match="occupation"):
        al.measure_occupation_times([ens], np.array([0.2]))


# ------------------------------------------------------------- decay gauges

def test_build_decay_gauge_single_level():
    dg = build_decay_gauge(np.array([0.0]), np.array([0.5]))
    assert dg.budget == 0.0
    # ramp from 0 to the inner weight, constant beyond
    assert dg.gauge(0.0) == 0.0
    assert dg.gauge(0.5) == dg.gauge(2.0) > 0


def test_build_decay_gauge_zero_occupation_times():
    t = np.zeros(4)
    radii = 0.5 * 2.0 ** (-np.arange(4))
    dg = build_decay_gauge(t, radii)
    assert dg.budget == 0.0
    assert (dg.weights > 0).all() and (np.diff(dg.weights) < 0).all()


@given(
    raw=st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=14)
)
@settings(max_examples=200, deadline=None)
def test_budget_rule_capped_by_two(raw):
    t = np.maximum.accumulate(np.asarray(raw))  # arbitrary nondecreasing times
    weights = np.array([default_weight_rule(i, ti) for i, ti in enumerate(t)])
    assert float(np.sum(weights * t)) <= 2.0
    assert (weights > 0).all()
    assert (np.diff(weights) < 0).all()


@given(raw=st.lists(st.floats(min_value=0, max_value=100), min_size=2, max_size=10))
@settings(max_examples=100, deadline=None)
def test_build_decay_gauge_invariants(raw):
    t = np.maximum.accumulate(np.asarray(raw))
    radii = 0.5 * 2.0 ** (-np.arange(len(t)))
    dg = build_decay_gauge(t, radii)
    g = dg.gauge
    assert g(0.0) == 0.0
    rr = np.linspace(0, 1, 64)
    vals = g(rr)
    assert (np.diff(vals) >= -1e-15).all()          # nondecreasing
    assert (vals[rr > 0] > 0).all()                 # positive definite
    slopes = np.abs(np.diff(g.knots_v) / np.diff(g.knots_r))
    assert g.lipschitz >= slopes.max() - 1e-12


# ----------------------------------------------------------- supermaxingale

def test_supermaxingale_identity_small_excess(rotational):
    ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=1e-3, T=4.0,
                               n_paths=200, seed=12, candidate=rotational.candidate,
                               gauge=rotational.gauge)
    res = al.check_supermaxingale(ens, rotational.candidate, rotational.gauge,
                                  tol=0.06)
    # V(X_t) + int l ds is pathwise constant up to Euler noise
    assert res.worst_excess <= 0.05
    assert res.passed
    assert 0.0 <= res.worst_time <= 4.0


def test_supermaxingale_deterministic_decrease(linear1d):
    ens = al.simulate_ensemble(linear1d.model, [0.8], dt=1e-3, T=2.0, n_paths=5,
                               seed=13, candidate=linear1d.candidate,
                               gauge=al.GaugeFunction.zero())
    res = al.check_supermaxingale(ens, linear1d.candidate, al.GaugeFunction.zero(),
                                  tol=1e-9)
    assert res.worst_excess <= 0.0 + 1e-15
    assert res.passed


def test_supermaxingale_fails_for_expansion(unstable1d):
    ens = al.simulate_ensemble(unstable1d.model, [0.2], dt=1e-3, T=2.0, n_paths=5,
                               seed=14, candidate=unstable1d.candidate,
                               gauge=al.GaugeFunction.zero())
    res = al.check_supermaxingale(ens, unstable1d.candidate, al.GaugeFunction.zero(),
                                  tol=0.05)
    assert not res.passed
    assert res.worst_excess > 0.1


def test_supermaxingale_requires_tracking(rotational):
    ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=1e-2, T=0.1,
                               n_paths=2, seed=1)
    with pytest.raises(ValueError, match="candidate"):
        al.check_supermaxingale(ens, rotational.candidate, rotational.gauge, 0.05)


# ------------------------------------------------------------- viability MC

def test_empirical_viability_deterministic_zero(linear1d):
    ens = al.simulate_ensemble(linear1d.model, [0.5], dt=1e-3, T=2.0, n_paths=50,
                               seed=15, candidate=linear1d.candidate)
    est = al.empirical_viability(ens, mu=0.5, tol=0.0)
    assert est.escape_fraction == 0.0


def test_empirical_viability_expansion_everything_escapes(unstable1d):
    ens = al.simulate_ensemble(unstable1d.model, [0.5], dt=1e-3, T=2.0, n_paths=50,
                               seed=16, candidate=unstable1d.candidate)
    est = al.empirical_viability(ens, mu=0.5, tol=0.0)
    assert est.escape_fraction == 1.0


def test_empirical_viability_rotational_boundary(rotational):
    dt = 1e-3
    ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=dt, T=2.0,
                               n_paths=200, seed=17, candidate=rotational.candidate)
    est = al.empirical_viability(ens, mu=0.5, tol=5 * np.sqrt(dt))
    assert est.escape_fraction <= 0.01
    assert est.excess_quantiles[1.0] <= 5 * np.sqrt(dt)


def test_empirical_viability_needs_valid_start(rotational):
    ens = al.simulate_ensemble(rotational.model, [0.5, 0.0], dt=1e-2, T=0.1,
                               n_paths=2, seed=1, candidate=rotational.candidate)
    with pytest.raises(ValueError, match="above the level"):
        al.empirical_viability(ens, mu=0.3)
