"""Policy interface, route waypoints, scripted baselines, the sector-pooled learnable
policy, and the task reward."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from deskdrive.classes import (
    CHANNEL,
    HAZARD_CHANNELS,
    LANE_MARKING,
    ROAD,
    ROUTE,
    SIDEWALK,
    STOP_SIGN,
)
from deskdrive.formats import ConfigError
from deskdrive.geometry import DEFAULT_GRID
from deskdrive.pam import PLATFORMS, ActionLimits, PolicyOutput, limits_for
from deskdrive.paths import Polyline
from deskdrive.perception import BEV_SHAPE

N_WAYPOINTS = 15
WAYPOINT_SPACING = 2.0


class Observation(NamedTuple):
    bev: np.ndarray  # (192, 192, 14) uint8
    state: tuple[float, float, float]  # v/v_max, delta/delta_max, throttle
    waypoints: np.ndarray  # (15, 2) ego frame, meters


def make_observation(bev: np.ndarray, state, wps: np.ndarray) -> Observation:
    state = tuple(float(s) for s in state)
    if len(state) != 3 or not all(math.isfinite(s) for s in state):
        raise ValueError("ego state must be three finite numbers")
    wps = np.asarray(wps, dtype=float)
    if wps.shape != (N_WAYPOINTS, 2):
        raise ValueError(f"expected {N_WAYPOINTS} waypoints, got shape {wps.shape}")
    if bev.shape != BEV_SHAPE:
        raise ValueError(f"BEV tensor must have shape {BEV_SHAPE}")
    return Observation(bev, state, wps)


def check_observation(obs: Observation) -> None:
    if not all(math.isfinite(s) for s in obs.state):
        raise ValueError("non-finite ego state")
    if not np.all(np.isfinite(obs.waypoints)):
        raise ValueError("non-finite waypoints")


def waypoints(route: Polyline, x: float, y: float, psi: float, n: int = N_WAYPOINTS,
              spacing: float = WAYPOINT_SPACING) -> np.ndarray:
    """Next ``n`` route points at ``spacing`` meters of arc length, in the ego frame.

    Points past the route end repeat the endpoint.
    """
    s0, _ = route.locate(x, y)
    wx, wy = route.point_at(s0 + spacing * np.arange(1, n + 1))
    c, s = math.cos(psi), math.sin(psi)
    dx, dy = wx - x, wy - y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)


class Policy(Protocol):
    def __call__(self, obs: Observation) -> PolicyOutput: ...


def evaluate_policy(policy, obs: Observation) -> PolicyOutput:
    check_observation(obs)
    a1, a2 = policy(obs)
    return PolicyOutput(float(a1), float(a2))


def reset_policy(policy, seed: int) -> None:
    reset = getattr(policy, "reset", None)
    if reset is not None:
        reset(seed)


# --- scripted baselines ----------------------------------------------------

_CARLA_LIMITS = limits_for(PLATFORMS["carla-default"])


@lru_cache(maxsize=4)
def _corridor(front: float, depth: float, half_width: float):
    """Row range and column slice of the forward corridor on the default grid."""
    xs, ys = DEFAULT_GRID.centers()
    x, y = xs[:, 0], ys[0, :]
    rows = np.nonzero((x >= front) & (x <= front + depth))[0]
    cols = np.nonzero(np.abs(y) <= half_width)[0]
    return rows, slice(int(cols[0]), int(cols[-1]) + 1), x


_HAZARDS = np.array(HAZARD_CHANNELS)


class PurePursuit:
    """Geometric tracker toward the waypoint nearest the lookahead distance.

    Speed: cruise at ``cruise`` x v_max, ramp down to a stop as a hazard in the
    forward corridor closes from ``d_slow`` to ``d_stop`` meters ahead of the
    rear axle, and crawl while a stop sign is near. ``jitter`` adds uniform
    steering noise of that amplitude, redrawn every ``jitter_hold`` calls
    from a stream reset per episode.
    """

    def __init__(self, lookahead: float = 6.0, limits: ActionLimits = _CARLA_LIMITS,
                 cruise: float = 0.4, crawl: float = 0.15, d_stop: float = 7.5,
                 d_slow: float = 10.0, jitter: float = 0.0, jitter_hold: int = 1, seed: int = 0,
                 corridor_half_width: float = 1.5, min_cells: int = 20):
        if not lookahead > 0:
            raise ValueError("lookahead must be positive")
        if not 0 <= crawl <= cruise <= 1:
            raise ValueError("need 0 <= crawl <= cruise <= 1")
        if not d_slow > d_stop:
            raise ValueError("d_slow must exceed d_stop")
        self.lookahead = lookahead
        self.limits = limits
        self.cruise = cruise
        self.crawl = crawl
        self.d_stop = d_stop
        self.d_slow = d_slow
        self.jitter = jitter
        self.jitter_hold = max(1, int(jitter_hold))
        self.corridor_half_width = corridor_half_width
        self.min_cells = min_cells
        self.reset(seed)

    def reset(self, seed: int) -> None:
        self._rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A17]))
        self._calls = 0
        self._noise = 0.0

    def curvature(self, wps: np.ndarray) -> float:
        d = np.hypot(wps[:, 0], wps[:, 1])
        k = int(np.argmin(np.abs(d - self.lookahead)))
        dk = d[k]
        if dk < 1e-9:
            return 0.0
        return 2.0 * float(wps[k, 1]) / float(dk * dk)

    def hazard_distance(self, bev: np.ndarray) -> float:
        """Ego-frame x of the nearest blocked corridor band; inf if clear.

        A band is five grid rows; it counts as blocked once it holds
        ``min_cells`` hazard cells, which keeps isolated label noise from
        braking the car.
        """
        rows, cols, x = _corridor(0.0, 10.0, self.corridor_half_width)
        patch = bev[rows, cols][:, :, _HAZARDS].any(axis=2).sum(axis=1)
        band = np.convolve(patch, np.ones(5, dtype=np.int64), mode="same")
        hit = np.nonzero(band >= self.min_cells)[0]
        # rows run from far to near, so the last hit is the nearest
        return float(x[rows[hit[-1]]]) if hit.size else math.inf

    def stop_sign_near(self, bev: np.ndarray) -> bool:
        rows, cols, _ = _corridor(0.0, 10.0, 4.0)
        return int(bev[rows, cols, STOP_SIGN].sum()) >= self.min_cells // 2

    def speed_fraction(self, bev: np.ndarray) -> float:
        frac = self.cruise
        if self.stop_sign_near(bev):
            frac = self.crawl
        d = self.hazard_distance(bev)
        if d < self.d_slow:
            frac *= min(1.0, max(0.0, (d - self.d_stop) / (self.d_slow - self.d_stop)))
        return frac

    def __call__(self, obs: Observation) -> PolicyOutput:
        kappa = self.curvature(obs.waypoints)
        a1 = kappa / self.limits.kappa_max
        if self.jitter > 0:
            if self._calls % self.jitter_hold == 0:
                self._noise = self.jitter * (2.0 * self._rng.random() - 1.0)
            self._calls += 1
            a1 += self._noise
        a1 = min(1.0, max(-1.0, a1))
        a2 = 2.0 * self.speed_fraction(obs.bev) - 1.0
        return PolicyOutput(a1, a2)


def graded_policies(limits: ActionLimits = _CARLA_LIMITS) -> dict[str, PurePursuit]:
    """Three scripted drivers of decreasing quality."""
    return {
        "tuned": PurePursuit(6.0, limits),
        "detuned": PurePursuit(30.0, limits),
        "jitter": PurePursuit(6.0, limits, jitter=0.08, jitter_hold=20),
    }


class ConstantPolicy:
    def __init__(self, a1: float = 0.0, a2: float = 0.0):
        self.output = PolicyOutput(float(a1), float(a2))

    def __call__(self, obs: Observation) -> PolicyOutput:
        return self.output


# --- learnable policy ------------------------------------------------------

FEATURE_MAP_VERSION = "bev-sector-v1"
CHANNEL_GROUPS = (
    (ROAD, LANE_MARKING, ROUTE),
    HAZARD_CHANNELS,
    (SIDEWALK, CHANNEL["traffic_light_red"], CHANNEL["traffic_light_yellow"],
     CHANNEL["traffic_light_green"], STOP_SIGN),
)
N_SECTORS = 8
RING_EDGES = (5.0,)
WAYPOINT_INDICES = (0, 1, 3, 6, 10)  # waypoints at 2, 4, 8, 14, 22 m
WAYPOINT_SCALE = 10.0
N_REGIONS = N_SECTORS * (len(RING_EDGES) + 1)
N_BEV_FEATURES = len(CHANNEL_GROUPS) * N_REGIONS
N_FEATURES = N_BEV_FEATURES + len(WAYPOINT_INDICES) + 3 + 1
N_PARAMS = 2 * N_FEATURES


@lru_cache(maxsize=1)
def _pooling():
    """(cells x regions) averaging matrix, (channels x groups) selector, per-feature divisor."""
    xs, ys = DEFAULT_GRID.centers()
    ang = np.arctan2(ys, xs)
    sector = np.floor((ang + math.pi / N_SECTORS) / (2 * math.pi / N_SECTORS)).astype(int) % N_SECTORS
    ring = np.searchsorted(np.array(RING_EDGES), np.hypot(xs, ys))
    region = (ring * N_SECTORS + sector).reshape(-1)
    cells = np.bincount(region, minlength=N_REGIONS).astype(float)
    pool = np.zeros((region.size, N_REGIONS), dtype=np.float32)
    pool[np.arange(region.size), region] = 1.0
    select = np.zeros((BEV_SHAPE[2], len(CHANNEL_GROUPS)), dtype=np.float32)
    for g, chans in enumerate(CHANNEL_GROUPS):
        select[list(chans), g] = 1.0
    # feature (g, r) is the mean occupancy over its cells and channels
    divisor = np.array([cells[r] * len(chans) for chans in CHANNEL_GROUPS for r in range(N_REGIONS)])
    return pool, select, divisor


def bev_features(bev: np.ndarray) -> np.ndarray:
    pool, select, divisor = _pooling()
    per_group = bev.reshape(-1, BEV_SHAPE[2]).astype(np.float32) @ select  # cells x groups
    counts = (pool.T @ per_group).astype(float)  # regions x groups
    return counts.T.reshape(-1) / divisor


def features(obs: Observation) -> np.ndarray:
    wp = obs.waypoints[list(WAYPOINT_INDICES), 1] / WAYPOINT_SCALE
    return np.concatenate([bev_features(obs.bev), wp, np.asarray(obs.state, dtype=float), [1.0]])


class LearnablePolicy:
    """Linear map over pooled features, squashed by tanh into [-1, 1]^2."""

    def __init__(self, params=None):
        p = np.zeros(N_PARAMS) if params is None else np.array(params, dtype=float).reshape(-1)
        if p.size != N_PARAMS:
            raise ValueError(f"expected {N_PARAMS} parameters, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise ValueError("policy parameters must be finite")
        p.setflags(write=False)
        self.params = p
        self.weights = p.reshape(2, N_FEATURES)

    def __call__(self, obs: Observation) -> PolicyOutput:
        phi = features(obs)
        if not np.all(np.isfinite(phi)):
            raise ValueError("non-finite features")
        a1, a2 = np.tanh(self.weights @ phi)
        return PolicyOutput(float(a1), float(a2))

    def lipschitz_bound(self) -> float:
        """Bound on ||output change||_2 per unit L1 change of the BEV tensor."""
        _, _, divisor = _pooling()
        cols = np.linalg.norm(self.weights[:, :N_BEV_FEATURES], axis=0)
        return float(np.max(cols / divisor))

    def __eq__(self, other) -> bool:
        return isinstance(other, LearnablePolicy) and np.array_equal(self.params, other.params)

    __hash__ = None


def reference_policy(limits: ActionLimits = _CARLA_LIMITS, cruise: float = 0.4,
                     brake_outer: float = 35.0, brake_inner: float = 60.0) -> LearnablePolicy:
    """Hand-set weights: pursuit steering toward the 8 m waypoint, cruise speed,
    braking on hazard occupancy straight ahead."""
    w = np.zeros((2, N_FEATURES))
    wp8 = N_BEV_FEATURES + WAYPOINT_INDICES.index(3)
    d = WAYPOINT_SPACING * 4
    # a1 = kappa / kappa_max with kappa = 2 y / d^2 and the feature y / WAYPOINT_SCALE
    w[0, wp8] = 2.0 * WAYPOINT_SCALE / (d * d * limits.kappa_max)
    hazard = CHANNEL_GROUPS.index(HAZARD_CHANNELS) * N_REGIONS
    w[1, hazard] = -brake_inner
    w[1, hazard + N_SECTORS] = -brake_outer
    w[1, -1] = math.atanh(2.0 * cruise - 1.0)
    return LearnablePolicy(w.reshape(-1))


def policy_text(policy: LearnablePolicy) -> str:
    lines = [f"# feature_map {FEATURE_MAP_VERSION}", f"# params {policy.params.size}"]
    lines += [repr(float(v)) for v in policy.params]
    return "\n".join(lines) + "\n"


def write_policy(path, policy: LearnablePolicy) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(policy_text(policy))


def parse_policy(text: str, where: str = "policy") -> LearnablePolicy:
    header: dict[str, str] = {}
    values = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split(None, 1)
            if len(parts) == 2:
                header[parts[0]] = parts[1].strip()
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ConfigError(f"{where}:{n}: not a number: {line!r}") from None
    if header.get("feature_map") != FEATURE_MAP_VERSION:
        raise ConfigError(f"{where}: feature map {header.get('feature_map')!r}, expected {FEATURE_MAP_VERSION}")
    if "params" not in header or int(header["params"]) != len(values):
        raise ConfigError(f"{where}: header parameter count does not match the body ({len(values)} values)")
    try:
        return LearnablePolicy(values)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def read_policy(path) -> LearnablePolicy:
    with open(path) as fh:
        return parse_policy(fh.read(), str(path))


BUILTIN_POLICIES = ("pure_pursuit", "tuned", "detuned", "jitter", "reference", "zero")


def load_policy(spec: str, limits: ActionLimits = _CARLA_LIMITS):
    """A builtin name or a policy file path."""
    if spec in ("pure_pursuit", "tuned"):
        return PurePursuit(6.0, limits)
    if spec in ("detuned", "jitter"):
        return graded_policies(limits)[spec]
    if spec == "reference":
        return reference_policy(limits)
    if spec == "zero":
        return LearnablePolicy()
    return read_policy(spec)


# --- reward ----------------------------------------------------------------

@dataclass(frozen=True)
class RewardWeights:
    progress: float = 1.0
    collision: float = 10.0
    lateral: float = 0.5
    speed: float = 0.5

    def __post_init__(self):
        if min(self.progress, self.collision, self.lateral, self.speed) < 0:
            raise ValueError("reward weights must be nonnegative")


class Transition(NamedTuple):
    progress: float  # route arc length gained this step, meters
    collided: bool
    lateral: float  # unsigned cross-track distance, meters
    speed: float  # m/s


@dataclass(frozen=True)
class RewardCaps:
    """Ranges the reward clamps its inputs to, so |r| has a finite bound."""

    max_progress: float = 1.0  # hard speed cap 20 m/s over one 0.05 s step
    max_lateral: float = 3.0
    v_limit: float = 15 / 3.6
    v_cap: float = 20.0


def task_reward(tr: Transition, w: RewardWeights = RewardWeights(), caps: RewardCaps = RewardCaps()) -> float:
    progress = min(caps.max_progress, max(-caps.max_progress, tr.progress))
    lateral = min(caps.max_lateral, abs(tr.lateral))
    overage = min(caps.v_cap - caps.v_limit, max(0.0, tr.speed - caps.v_limit))
    return (w.progress * progress - w.collision * float(tr.collided)
            - w.lateral * lateral - w.speed * overage)


def reward_bound(w: RewardWeights = RewardWeights(), caps: RewardCaps = RewardCaps()) -> float:
    """R_max with |task_reward| <= R_max for every transition."""
    return (w.progress * caps.max_progress + w.collision + w.lateral * caps.max_lateral
            + w.speed * (caps.v_cap - caps.v_limit))


def reward_lipschitz(w: RewardWeights = RewardWeights()) -> float:
    """Lipschitz constant of the continuous reward terms in the L2 norm over (x, y, v).

    Moving the car by one meter changes progress and cross-track distance by at
    most one meter each; the speed term has slope w_s. The collision indicator
    is a discontinuity and is left out.
    """
    return math.hypot(w.progress + w.lateral, w.speed)


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total
