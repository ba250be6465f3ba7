import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskdrive.classes import OBSTACLE, ROAD, VEHICLE
from deskdrive.formats import ConfigError
from deskdrive.geometry import DEFAULT_GRID
from deskdrive.pam import PLATFORMS, limits_for
from deskdrive.paths import Polyline, arc_route
from deskdrive.perception import empty_bev
from deskdrive.policy import (
    N_PARAMS,
    ConstantPolicy,
    LearnablePolicy,
    Observation,
    PurePursuit,
    RewardWeights,
    Transition,
    discounted_return,
    evaluate_policy,
    parse_policy,
    policy_text,
    read_policy,
    reward_bound,
    reward_lipschitz,
    task_reward,
    waypoints,
    write_policy,
)

LIM = limits_for(PLATFORMS["carla-default"])
STRAIGHT = np.column_stack([2.0 * np.arange(1, 16), np.zeros(15)])


def obs_with(bev=None, wps=STRAIGHT, state=(0.3, 0.0, 0.0)):
    return Observation(empty_bev() if bev is None else bev, state, np.asarray(wps, float))


# --- waypoints -------------------------------------------------------------

def test_waypoints_identity_frame():
    route = Polyline([(0, 0), (100, 0)])
    assert np.allclose(waypoints(route, 0, 0, 0), STRAIGHT)


def test_waypoints_rotated_heading():
    route = Polyline([(0, 0), (100, 0)])
    wps = waypoints(route, 0, 0, math.pi / 2)
    expected = np.column_stack([np.zeros(15), -2.0 * np.arange(1, 16)])
    assert np.allclose(wps, expected, atol=1e-12)


def test_waypoints_clamp_at_route_end():
    route = Polyline([(0, 0), (10, 0)])
    wps = waypoints(route, 0, 0, 0)
    assert np.allclose(wps[:5], STRAIGHT[:5])
    assert np.all(wps[4:] == [10.0, 0.0])


def test_waypoints_start_from_nearest_point():
    route = Polyline([(0, 0), (100, 0)])
    wps = waypoints(route, 7.0, 0.5, 0.0)
    assert np.allclose(wps[0], (2.0, -0.5))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), s=st.floats(0, 20))
def test_waypoint_spacing_on_curves(seed, s):
    rng = np.random.default_rng(seed)
    route = arc_route(80, rng.uniform(-1 / 30, 1 / 30, 8), piece=5.0)
    x, y = route.point_at(s)
    wps = waypoints(route, float(x), float(y), 0.3)
    gaps = np.hypot(*np.diff(wps, axis=0).T)
    # chords are shorter than arcs; a 2 m arc on radius >= 30 m loses < 1 mm
    assert np.all(gaps <= 2.0 + 1e-9) and np.all(gaps >= 2.0 - 5e-2)


# --- pure pursuit ----------------------------------------------------------

def test_pure_pursuit_straight_is_centered():
    assert PurePursuit(6.0).curvature(STRAIGHT) == 0.0
    assert evaluate_policy(PurePursuit(6.0), obs_with()).a1 == 0.0


def test_pure_pursuit_curvature_formula():
    wps = STRAIGHT.copy()
    wps[4] = (10.0, 1.0)  # nearest to a 10 m lookahead (distance ~10.05)
    pp = PurePursuit(10.0, LIM)
    d2 = 101.0
    assert pp.curvature(wps) == pytest.approx(2.0 / d2)
    assert pp(obs_with(wps=wps)).a1 == pytest.approx((2.0 / d2) / LIM.kappa_max)


def test_pure_pursuit_slows_for_blocked_corridor():
    free = PurePursuit()(obs_with()).a2
    bev = empty_bev()
    i, j = DEFAULT_GRID.cell_of(8.5, 0.0)
    bev[i - 5:i + 5, j - 6:j + 6, OBSTACLE] = 1
    blocked = PurePursuit()(obs_with(bev)).a2
    assert blocked < free
    near = empty_bev()
    i, j = DEFAULT_GRID.cell_of(6.0, 0.0)
    near[i - 5:i + 5, j - 6:j + 6, VEHICLE] = 1
    assert PurePursuit()(obs_with(near)).a2 == -1.0


def test_pure_pursuit_ignores_isolated_noise_and_side_traffic():
    rng = np.random.default_rng(0)
    bev = empty_bev()
    bev[..., ROAD] = 1
    flips = rng.random((192, 192)) < 0.01
    bev[flips, VEHICLE] = 1
    free = PurePursuit()(obs_with()).a2
    assert PurePursuit()(obs_with(bev)).a2 == free
    side = empty_bev()
    i, j = DEFAULT_GRID.cell_of(6.0, 4.0)
    side[i - 10:i + 10, j - 10:j + 10, VEHICLE] = 1
    assert PurePursuit()(obs_with(side)).a2 == free


def test_jitter_is_seeded_and_held():
    pp = PurePursuit(jitter=0.2, jitter_hold=5, seed=3)
    a = [pp(obs_with()).a1 for _ in range(10)]
    pp.reset(3)
    b = [pp(obs_with()).a1 for _ in range(10)]
    assert a == b
    assert len(set(a[:5])) == 1 and a[5] != a[4]
    assert all(abs(v) <= 0.2 for v in a)


# --- learnable policy ------------------------------------------------------

def test_zero_policy_outputs_center():
    out = evaluate_policy(LearnablePolicy(), obs_with())
    assert out == (0.0, 0.0)


def random_policy(seed, scale=5.0):
    return LearnablePolicy(np.random.default_rng(seed).normal(0, scale, N_PARAMS))


def random_bev(rng, p=0.1):
    return (rng.random((192, 192, 14)) < p).astype(np.uint8)


def test_learnable_policy_deterministic_and_bounded():
    pol = random_policy(1, scale=100.0)
    rng = np.random.default_rng(2)
    for _ in range(5):
        o = obs_with(random_bev(rng), rng.normal(0, 10, (15, 2)), rng.normal(0, 3, 3))
        a = pol(o)
        assert a == pol(o)
        assert -1 <= a.a1 <= 1 and -1 <= a.a2 <= 1


def test_single_cell_change_within_lipschitz_bound():
    pol = random_policy(3)
    L = pol.lipschitz_bound()
    rng = np.random.default_rng(4)
    bev = random_bev(rng)
    base = np.array(pol(obs_with(bev)))
    for _ in range(50):
        b2 = bev.copy()
        i, j, c = rng.integers(0, 192), rng.integers(0, 192), rng.integers(0, 14)
        b2[i, j, c] ^= 1
        assert np.linalg.norm(np.array(pol(obs_with(b2))) - base) <= L + 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 400))
def test_multi_cell_change_within_lipschitz_bound(seed, k):
    pol = random_policy(seed)
    rng = np.random.default_rng(seed)
    bev = random_bev(rng)
    b2 = bev.copy()
    idx = rng.choice(bev.size, k, replace=False)
    b2.flat[idx] ^= 1
    diff = np.linalg.norm(np.array(pol(obs_with(b2))) - np.array(pol(obs_with(bev))))
    assert diff <= pol.lipschitz_bound() * k + 1e-12


def test_non_finite_observation_rejected():
    with pytest.raises(ValueError):
        evaluate_policy(LearnablePolicy(), obs_with(state=(math.nan, 0, 0)))
    with pytest.raises(ValueError):
        LearnablePolicy([math.inf] * N_PARAMS)
    with pytest.raises(ValueError):
        LearnablePolicy([0.0] * 3)


def test_policy_file_round_trip(tmp_path):
    pol = random_policy(7)
    path = tmp_path / "p.txt"
    write_policy(path, pol)
    text = path.read_text()
    assert text.splitlines()[0] == "# feature_map bev-sector-v1"
    assert text.splitlines()[1] == f"# params {N_PARAMS}"
    assert len(text.splitlines()) == N_PARAMS + 2
    assert read_policy(path) == pol


def test_policy_file_errors():
    good = policy_text(LearnablePolicy())
    with pytest.raises(ConfigError):
        parse_policy(good.replace("bev-sector-v1", "cnn-v9"))
    with pytest.raises(ConfigError):
        parse_policy(good + "0.5\n")
    with pytest.raises(ConfigError):
        parse_policy(good.replace("0.0", "zero", 1))


def test_constant_policy():
    assert ConstantPolicy(0.2, -0.4)(obs_with()) == (0.2, -0.4)


# --- reward ----------------------------------------------------------------

def test_reward_examples():
    assert task_reward(Transition(0.0, False, 0.0, 0.0)) == 0.0
    assert task_reward(Transition(1.0, False, 0.0, 0.0)) == 1.0
    assert task_reward(Transition(0.0, True, 0.0, 0.0)) == -10.0
    assert task_reward(Transition(0.0, False, 0.4, 0.0)) == -0.2
    assert task_reward(Transition(0.0, False, 0.0, 15 / 3.6 + 2.0)) == pytest.approx(-1.0)


@settings(max_examples=200, deadline=None)
@given(p=st.floats(-1e3, 1e3), c=st.booleans(), lat=st.floats(-1e3, 1e3), v=st.floats(0, 1e3))
def test_reward_is_bounded(p, c, lat, v):
    w = RewardWeights()
    assert abs(task_reward(Transition(p, c, lat, v), w)) <= reward_bound(w)


def test_reward_constants():
    assert reward_bound() == pytest.approx(1.0 + 10.0 + 1.5 + 0.5 * (20.0 - 15 / 3.6))
    assert reward_lipschitz() == pytest.approx(math.hypot(1.5, 0.5))


def test_discounted_return():
    assert discounted_return([0, 0, 0], 0.9) == 0
    assert discounted_return([1, 1, 1], 0.5) == 1.75
    T, c, g = 30, 2.0, 0.95
    assert discounted_return([c] * (T + 1), g) == pytest.approx(c * (1 - g ** (T + 1)) / (1 - g))
    with pytest.raises(ValueError):
        discounted_return([1], 1.0)
