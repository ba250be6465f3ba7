import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskdrive.bounds import (
    CellSumPolicy,
    FinitePomdp,
    Knobs,
    bootstrap_ordering,
    check_curriculum_ordering,
    check_gob_bound,
    check_pam_bound,
    check_tv_bound,
    estimate_lipschitz,
    histogram_tv,
    make_report,
    monte_carlo_return,
    observation_tv,
    pam_lateral_bound,
    parse_pomdp,
    pomdp_text,
    random_pomdp,
    random_reactive_policy,
    summarize,
    tv_distance,
    tv_return_bound,
    tv_sweep,
    value_iteration,
    write_report,
)
from deskdrive.formats import ConfigError, read_csv
from deskdrive.pam import PLATFORMS
from deskdrive.perception import empty_bev
from deskdrive.policy import LearnablePolicy, N_PARAMS, Observation

WPS = np.column_stack([2.0 * np.arange(1, 16), np.zeros(15)])


def obs(bev):
    return Observation(bev, (0.0, 0.0, 0.0), WPS)


# --- total variation -------------------------------------------------------

def test_tv_examples():
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert tv_distance([0.7, 0.3], [0.4, 0.6]) == pytest.approx(0.3)


def test_tv_rejects_non_distributions():
    with pytest.raises(ValueError):
        tv_distance([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        tv_distance([1.2, -0.2], [0.5, 0.5])
    with pytest.raises(ValueError):
        tv_distance([1.0], [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 8))
def test_tv_is_a_metric_in_unit_interval(seed, n):
    rng = np.random.default_rng(seed)
    p, q, r = rng.dirichlet(np.ones(n), 3)
    d = tv_distance(p, q)
    assert 0 <= d <= 1 and d == pytest.approx(tv_distance(q, p))
    assert tv_distance(p, r) <= d + tv_distance(q, r) + 1e-12


# --- POMDPs ----------------------------------------------------------------

def two_state_pomdp(eps=0.0):
    T = np.zeros((2, 2, 2))
    T[:, 0, 0] = 1.0  # action 0 goes to state 0
    T[:, 1, 1] = 1.0
    O = np.eye(2)
    Ob = np.array([[1 - eps, eps], [eps, 1 - eps]])
    R = np.array([[1.0, 0.0], [1.0, 0.0]])
    return FinitePomdp(T, O, Ob, R, 0.9, np.array([1.0, 0.0]))


def test_value_iteration_closed_form():
    p = two_state_pomdp()
    always0 = np.array([[1.0, 0.0], [1.0, 0.0]])
    res = value_iteration(p, always0)
    assert res.J == pytest.approx(10.0, abs=1e-12)
    assert res.residual <= 1e-12


def test_tv_bound_on_flipped_observations():
    # copy the observation as the action: under kernel b the wrong action comes w.p. eps
    eps = 0.1
    p = two_state_pomdp(eps)
    copy = np.eye(2)
    assert observation_tv(p) == pytest.approx(eps)
    rep = check_tv_bound(p, copy)
    assert not rep.violated
    assert rep.bound == pytest.approx(2 * 1.0 * eps / 0.01)
    assert rep.measured > 0


def test_pomdp_validation():
    p = two_state_pomdp()
    with pytest.raises(ValueError):
        FinitePomdp(p.transition * 1.01, p.obs_a, p.obs_b, p.reward, 0.9, p.initial)
    with pytest.raises(ValueError):
        FinitePomdp(p.transition, p.obs_a, p.obs_b, p.reward, 1.0, p.initial)
    with pytest.raises(ValueError):
        FinitePomdp(p.transition, p.obs_a, p.obs_b, p.reward, 0.9, p.initial, r_max=0.5)
    with pytest.raises(ValueError):
        value_iteration(p, np.ones((2, 3)) / 3)


def test_pomdp_text_round_trip():
    p = random_pomdp(np.random.default_rng(5))
    q = parse_pomdp(pomdp_text(p))
    for name in ("transition", "obs_a", "obs_b", "reward", "initial"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    assert (p.gamma, p.r_max) == (q.gamma, q.r_max)
    with pytest.raises(ConfigError):
        parse_pomdp("states 2\n")


def test_tv_sweep_has_no_violations():
    rows = tv_sweep(50, seed=3)
    assert len(rows) == 50 and not any(r.violated for r in rows)


def test_monte_carlo_matches_exact_value():
    rng = np.random.default_rng(11)
    p = random_pomdp(rng)
    pol = random_reactive_policy(rng, p.n_obs, p.n_actions)
    exact = value_iteration(p, pol, "b").J
    mc = monte_carlo_return(p, pol, "b", episodes=20_000, seed=1)
    assert mc.agrees(exact, 4.0)
    assert mc.truncation <= 1e-10


# --- Lipschitz and GOB -----------------------------------------------------

def sampler_around(center):
    def sample(rng):
        bev = empty_bev()
        idx = rng.choice(bev.size, center, replace=False)
        bev.flat[idx] = 1
        return obs(bev)
    return sample


def test_lipschitz_estimate_of_linear_policy_is_exact():
    pol = CellSumPolicy(0.003)
    est = estimate_lipschitz(pol, sampler_around(500), 5)
    assert est.L_hat == pytest.approx(0.003, rel=1e-12)


def test_lipschitz_estimate_at_operating_point():
    c, center = 0.002, 400
    est = estimate_lipschitz(CellSumPolicy(c, center, squash=True), sampler_around(center), 10)
    # slope of tanh at the center is 1; a few cells away it is barely lower
    assert c * 0.99 <= est.L_hat <= c


def test_lipschitz_estimate_below_analytic_bound():
    pol = LearnablePolicy(np.random.default_rng(2).normal(0, 0.5, N_PARAMS))
    est = estimate_lipschitz(pol, sampler_around(3000), 10, multi_cells=500)
    assert 0 < est.L_hat <= pol.lipschitz_bound() + 1e-12


def test_gob_bound_on_random_flips():
    rng = np.random.default_rng(0)
    pol = CellSumPolicy(0.01)
    pairs = []
    for _ in range(20):
        a = sampler_around(1000)(rng)
        b = a.bev.copy()
        flips = rng.random(b.shape) < 0.001
        b[flips] ^= 1
        pairs.append((a, obs(b)))
    rep = check_gob_bound(pol, pairs, pol.lipschitz_bound())
    assert not rep.violated and rep.slack > 0
    identical = check_gob_bound(pol, [(p[0], p[0]) for p in pairs], 0.01)
    assert identical.measured == identical.bound == 0.0


# --- curvature tracking ----------------------------------------------------

CARLA = PLATFORMS["carla-default"]


def test_pam_bound_value():
    assert pam_lateral_bound(4.17, 2.0, 0.01) == pytest.approx(0.347778, abs=1e-6)
    assert pam_lateral_bound(4.17, 4.0, 0.01) == pytest.approx(4 * pam_lateral_bound(4.17, 2.0, 0.01))


def test_pam_worst_case_is_tight_and_within_bound():
    rows = check_pam_bound(CARLA, 4.17, 2.0, 0.01, 2, randomize=False)
    const = rows[0]
    assert not const.violated
    assert const.measured / const.bound > 0.99
    longer = check_pam_bound(CARLA, 4.17, 4.0, 0.01, 1, randomize=False)[0]
    assert longer.measured > const.measured


def test_pam_randomized_trials_never_violate():
    rows = check_pam_bound(CARLA, 4.17, 5.0, 0.05, 100, seed=9)
    assert not any(r.violated for r in rows)


def test_pam_zero_disturbance_is_exact():
    rows = check_pam_bound(CARLA, 4.17, 3.0, 0.0, 4, seed=1)
    assert all(r.measured < 1e-9 and r.bound == 0.0 for r in rows)


# --- curriculum and histograms ---------------------------------------------

def test_curriculum_ordering():
    rng = np.random.default_rng(0)
    deploy = [(rng.random((8, 8, 3)) < 0.3).astype(np.uint8) for _ in range(10)]
    near = [d.copy() for d in deploy]
    far = [1 - d for d in deploy]
    for n in near:
        n[0, 0, 0] ^= 1
    assert not check_curriculum_ordering(far, near, deploy).violated
    assert check_curriculum_ordering(near, far, deploy).violated
    assert bootstrap_ordering(far, near, deploy) == 1.0
    with pytest.raises(ValueError):
        check_curriculum_ordering([], [], [])


def test_histogram_tv():
    a = empty_bev()
    assert histogram_tv(a, a) == 0.0
    b = a.copy()
    b[0, 0, 0] = 1
    assert histogram_tv(a, b) == 1.0
    c = a.copy()
    c[0, 0, 1] = 1
    assert histogram_tv(b, c) == 1.0
    assert histogram_tv(b, b) == 0.0


# --- reports ---------------------------------------------------------------

def test_report_csv_and_summary(tmp_path):
    rows = [make_report("pam", "a", 1.0, 2.0), make_report("pam", "b", 3.0, 2.0)]
    assert rows[1].violated and rows[1].slack == -1.0
    path = tmp_path / "r.csv"
    write_report(path, rows)
    header, body = read_csv(path)
    assert header == ["check", "instance", "measured", "bound", "slack", "violated"]
    assert len(body) == 2
    assert "1 violations" in summarize(rows)


def test_knob_labels():
    assert not Knobs(eps_pid=0.01).observation_noise
    assert Knobs(shift=1).observation_noise
    assert Knobs(0.05, 0.01, 1).label() == "flip=0.05;eps_pid=0.01;shift=1"


def test_tv_return_bound_formula():
    assert tv_return_bound(2.0, 0.1, 0.9) == pytest.approx(2 * 2.0 * 0.1 / 0.01)
    assert math.isclose(tv_return_bound(1.0, 0.0, 0.5), 0.0)
