"""The six-stage control cycle, its safety layer, closed-loop episodes and their metrics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from matplotlib.path import Path as _PolygonPath

from deskdrive import dynamics
from deskdrive.formats import write_csv
from deskdrive.geometry import DEFAULT_GRID, DESK_CAMERA, CameraCalibration, ipm_project
from deskdrive.pam import (
    BRAKE,
    ActionLimits,
    PhysicsAction,
    PidState,
    PlatformParams,
    PolicyOutput,
    VehicleCommand,
    decode_action,
    limits_for,
    pam_map,
)
from deskdrive.paths import Polyline, arc_route
from deskdrive.perception import SegNoiseModel, corrupt, empty_bev, encode
from deskdrive.policy import Observation, RewardWeights, Transition, discounted_return, reset_policy, task_reward, waypoints
from deskdrive.worldsim import (
    KMH,
    STUCK_TIME,
    World,
    ego_mask_at,
    offset_points,
    rect_corners,
    rects_overlap,
    render_front_view,
    render_gt_bev,
    route_deviation,
    route_mask_at,
    detect_termination,
    step,
)

EVENT_KINDS = (
    "speed_capped",
    "steer_rate_clipped",
    "emergency_brake_nan",
    "emergency_brake_lane",
    "emergency_brake_obstacle",
    "emergency_brake_geofence",
    "estop",
    "takeover",
)
EMERGENCY_KINDS = frozenset(k for k in EVENT_KINDS if k.startswith("emergency") or k == "estop")
OUTCOMES = ("success", "safety_violation", "stagnation")
STAGES = ("perception", "route_state", "inference", "pam", "safety", "actuation")
DEADLINE_MS = 50.0
# ground beyond this range never lands in the 20 m BEV crop
GOB_RANGE = 16.0


@dataclass(frozen=True)
class SafetyLimits:
    v_limit: float = 15 * KMH
    d_limit: float = 0.8
    d_delta_max: float = 0.1
    r_safe: float = 3.0
    geofence: tuple[tuple[float, float], ...] | None = None  # None: route corridor dilated by 10 m
    geofence_margin: float = 10.0
    enabled: bool = True

    def __post_init__(self):
        if min(self.v_limit, self.d_limit, self.d_delta_max, self.r_safe, self.geofence_margin) <= 0:
            raise ValueError("safety limits must be positive")
        if self.geofence is not None and len(self.geofence) < 3:
            raise ValueError("geofence polygon needs at least three vertices")


class SafetyEvent(NamedTuple):
    cycle: int
    kind: str


@dataclass(frozen=True)
class PipelineMode:
    source: str = "gt_bev"
    noise: SegNoiseModel | None = None
    camera: CameraCalibration = DESK_CAMERA

    def __post_init__(self):
        if self.source not in ("gt_bev", "gob_bev"):
            raise ValueError(f"unknown observation source '{self.source}'")
        if (self.noise is not None) != (self.source == "gob_bev"):
            raise ValueError("a noise model is required for gob_bev and not allowed for gt_bev")


GT_MODE = PipelineMode()


def gob_mode(flip_rate: float = 0.02, boundary_jitter: int = 1, seed: int = 0,
             camera: CameraCalibration = DESK_CAMERA) -> PipelineMode:
    return PipelineMode("gob_bev", SegNoiseModel(flip_rate, boundary_jitter, seed), camera)


class CycleState(NamedTuple):
    cycle: int = 0
    pid: PidState = PidState()
    u_delta: float = 0.0  # last emitted steering command
    released: bool = False


class CycleInputs(NamedTuple):
    """External signals for one cycle."""

    estop: bool = False
    takeover: bool = False
    kappa_disturbance: float = 0.0


class CycleResult(NamedTuple):
    command: VehicleCommand
    events: tuple[SafetyEvent, ...]
    latency: tuple[float, ...]  # ms per stage, in STAGES order
    state: CycleState
    output: PolicyOutput
    v_target: float  # speed target the emitted command tracks, m/s
    observation: Observation | None

    @property
    def total_ms(self) -> float:
        return sum(self.latency)

    @property
    def emergency(self) -> bool:
        return any(e.kind in EMERGENCY_KINDS for e in self.events)


def observe(world: World, mode: PipelineMode, cycle: int = 0) -> np.ndarray:
    """Stage 1: the BEV tensor the policy sees."""
    if mode.source == "gt_bev":
        return render_gt_bev(world)
    seg = render_front_view(world, mode.camera, DEFAULT_GRID, GOB_RANGE)
    seg = corrupt(seg, mode.noise, stream=cycle)
    labels = ipm_project(seg, mode.camera, DEFAULT_GRID)
    xs, ys = DEFAULT_GRID.centers()
    route = route_mask_at(world, xs, ys, DEFAULT_GRID.extent / math.sqrt(2))
    return encode(labels, route, ego_mask_at(world, xs, ys))


def ego_state(world: World, v_max: float) -> tuple[float, float, float]:
    e = world.ego
    return e.v / v_max, e.delta / world.platform.delta_max, e.throttle


def route_geofence(route: Polyline, margin: float) -> tuple[tuple[float, float], ...]:
    line = route.extended(margin, margin)
    ring = np.vstack([offset_points(line, margin), offset_points(line, -margin)[::-1]])
    return tuple((float(x), float(y)) for x, y in ring)


def obstacle_ahead(world: World, r_safe: float) -> bool:
    """Any entity inside the ego footprint extended ``r_safe`` meters past the front bumper."""
    e, b = world.ego, world.body
    zone = rect_corners(e.x, e.y, e.psi, -b.rear, b.front + r_safe, b.width / 2)
    reach = b.front + r_safe + 1.0
    for ent in world.entities:
        if math.hypot(ent.x - e.x, ent.y - e.y) > reach + ent.length + ent.width:
            continue
        if rects_overlap(zone, ent.corners()):
            return True
    return False


def _finite_output(out) -> PolicyOutput | None:
    try:
        a1, a2 = out
        a1, a2 = float(a1), float(a2)
    except (TypeError, ValueError):
        return None
    if not (math.isfinite(a1) and math.isfinite(a2)):
        return None
    return PolicyOutput(min(1.0, max(-1.0, a1)), min(1.0, max(-1.0, a2)))


def control_cycle(world: World, policy, mode: PipelineMode, platform: PlatformParams,
                  limits: SafetyLimits, state: CycleState, action_limits: ActionLimits | None = None,
                  inputs: CycleInputs = CycleInputs(), geofence: _PolygonPath | None = None,
                  dt: float = dynamics.DT, keep_observation: bool = False) -> CycleResult:
    """One tick of perception, route/state, inference, action mapping, safety and emission."""
    lim = action_limits or limits_for(platform)
    clock = time.perf_counter
    marks = [clock()]
    cycle = state.cycle

    bev = observe(world, mode, cycle)
    marks.append(clock())

    if world.route is not None:
        wps = waypoints(world.route, world.ego.x, world.ego.y, world.ego.psi)
    else:
        wps = np.zeros((15, 2))
    obs = Observation(bev, ego_state(world, lim.v_max), wps)
    marks.append(clock())

    try:
        raw = policy(obs)
    except (ValueError, ArithmeticError, TypeError):
        raw = None
    out = _finite_output(raw)
    marks.append(clock())

    pid = state.pid
    cmd = BRAKE
    v_target = 0.0
    act = None
    if out is not None:
        act = decode_action(out, lim)
        act = PhysicsAction(act.kappa + inputs.kappa_disturbance, act.v_des)
        cmd, pid = pam_map(act, world.ego.v, dt, platform, state.pid)
        v_target = act.v_des
    marks.append(clock())

    kinds = []
    if out is None:
        kinds.append("emergency_brake_nan")
    elif limits.enabled:
        if act.v_des > limits.v_limit or (world.ego.v >= limits.v_limit and cmd.u_v > 0):
            kinds.append("speed_capped")
            v_target = min(act.v_des, limits.v_limit)
            cmd, pid = pam_map(PhysicsAction(act.kappa, v_target), world.ego.v, dt, platform, state.pid)
            if world.ego.v >= limits.v_limit and cmd.u_v > 0:
                cmd = VehicleCommand(cmd.u_delta, 0.0)
        step_change = cmd.u_delta - state.u_delta
        if abs(step_change) > limits.d_delta_max:
            kinds.append("steer_rate_clipped")
            u = state.u_delta + math.copysign(limits.d_delta_max, step_change)
            cmd = VehicleCommand(min(1.0, max(-1.0, u)), cmd.u_v)
    if limits.enabled:
        if world.route is not None and route_deviation(world) > limits.d_limit:
            kinds.append("emergency_brake_lane")
        if obstacle_ahead(world, limits.r_safe):
            kinds.append("emergency_brake_obstacle")
        if geofence is not None and not geofence.contains_point((world.ego.x, world.ego.y)):
            kinds.append("emergency_brake_geofence")
    if inputs.estop:
        kinds.append("estop")
    if any(k in EMERGENCY_KINDS for k in kinds):
        cmd = BRAKE
        v_target = 0.0
    released = state.released
    if inputs.takeover:
        # control goes back to the driver: hold the wheel, no autonomous throttle or brake
        kinds.append("takeover")
        released = True
        cmd = VehicleCommand(state.u_delta, 0.0)
    marks.append(clock())

    command = VehicleCommand(float(cmd.u_delta), float(cmd.u_v))
    new_state = CycleState(cycle + 1, pid, command.u_delta, released)
    marks.append(clock())

    latency = tuple((b - a) * 1e3 for a, b in zip(marks, marks[1:]))
    events = tuple(SafetyEvent(cycle, k) for k in kinds)
    return CycleResult(command, events, latency, new_state, out if out is not None else PolicyOutput(math.nan, math.nan),
                       v_target, obs if keep_observation else None)


# --- episodes --------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeConfig:
    mode: PipelineMode = GT_MODE
    limits: SafetyLimits = SafetyLimits()
    action_limits: ActionLimits | None = None
    dt: float = dynamics.DT
    max_time: float | None = None  # None: the world's own budget
    stuck_factor: float = 0.2
    goal_radius: float = 2.0
    estop_cycle: int | None = None
    takeover_cycle: int | None = None
    kappa_disturbance: float = 0.0  # per-cycle curvature error drawn uniformly in [-eps, eps]
    reward: RewardWeights = RewardWeights()
    gamma: float = 0.99

    def __post_init__(self):
        if not self.dt > 0 or not self.goal_radius > 0 or not self.stuck_factor > 0:
            raise ValueError("dt, goal_radius and stuck_factor must be positive")
        if self.kappa_disturbance < 0:
            raise ValueError("kappa_disturbance must be nonnegative")


class EpisodeMetrics(NamedTuple):
    AS: float  # mean speed, km/h
    RC: float  # route fraction completed
    TD: float  # distance driven, m
    CS: float  # impact speed, km/h (0 without collision)
    SR: float  # 1 on success
    AC: int  # collisions
    outcome: str


METRIC_NAMES = ("AS", "RC", "TD", "CS", "SR", "AC")
TRAJECTORY_HEADER = ("t", "x", "y", "psi", "v", "delta", "u_delta", "u_v", "event")


@dataclass
class EpisodeResult:
    trajectory: list[tuple]
    metrics: EpisodeMetrics
    events: list[SafetyEvent]
    rewards: list[float]
    latency: list[tuple[float, ...]]
    termination: str
    worlds: list[World] = field(default_factory=list)

    def discounted_return(self, gamma: float) -> float:
        return discounted_return(self.rewards, gamma) if self.rewards else 0.0

    @property
    def deadline_misses(self) -> int:
        return sum(1 for lat in self.latency if sum(lat) > DEADLINE_MS)


def _disturbance_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xD157]))


def run_episode(world: World, policy, config: EpisodeConfig = EpisodeConfig(), seed: int = 0,
                record_every: int = 0) -> EpisodeResult:
    """Closed-loop run until goal, termination, emergency, takeover or timeout.

    ``seed`` resets stateful policies and the curvature disturbance stream.
    ``record_every`` > 0 keeps every n-th world state.
    """
    reset_policy(policy, seed)
    route = world.route
    if route is None:
        raise ValueError("episodes need a route")
    dt = config.dt
    platform = world.platform
    lim = config.action_limits or limits_for(platform)
    limits = config.limits
    fence = None
    if limits.enabled:
        poly = limits.geofence if limits.geofence is not None else route_geofence(route, limits.geofence_margin)
        fence = _PolygonPath(np.array(poly))
    max_time = config.max_time if config.max_time is not None else world.max_time
    n_cycles = int(math.floor(max_time / dt + 1e-9))
    stuck_time = STUCK_TIME * config.stuck_factor
    dist_rng = _disturbance_rng(seed)
    goal = route.points[-1]

    state = CycleState()
    trajectory, events, rewards, latency, worlds = [], [], [], [], []
    history: list[tuple[float, float]] = []
    s_prev, _ = route.locate(world.ego.x, world.ego.y)
    s_best = s_prev
    td = 0.0
    speeds = [world.ego.v]
    collisions, impact = 0, 0.0
    emergency = False
    outcome, termination = "stagnation", "timeout"

    def at_goal(w: World) -> bool:
        return math.hypot(w.ego.x - goal[0], w.ego.y - goal[1]) <= config.goal_radius

    if at_goal(world):
        outcome, termination = "success", "goal"
        n_cycles = 0
    for cycle in range(n_cycles):
        if record_every and cycle % record_every == 0:
            worlds.append(world)
        dk = config.kappa_disturbance * (2.0 * dist_rng.random() - 1.0) if config.kappa_disturbance else 0.0
        inputs = CycleInputs(config.estop_cycle is not None and cycle >= config.estop_cycle,
                             config.takeover_cycle is not None and cycle == config.takeover_cycle, dk)
        res = control_cycle(world, policy, config.mode, platform, limits, state, lim, inputs, fence, dt)
        state = res.state
        events.extend(res.events)
        latency.append(res.latency)
        e = world.ego
        row_events = [ev.kind for ev in res.events]

        nxt = step(world, res.command, dt)
        history.append((world.clock, e.v))
        td += math.hypot(nxt.ego.x - e.x, nxt.ego.y - e.y)
        s_new, _ = route.locate(nxt.ego.x, nxt.ego.y)
        term = detect_termination(nxt, history, stuck_time)
        collided = term is not None and term.kind == "collision"
        rewards.append(task_reward(Transition(s_new - s_prev, collided, route_deviation(nxt), nxt.ego.v),
                                   config.reward))
        s_prev = s_new
        s_best = max(s_best, s_new)
        speeds.append(nxt.ego.v)

        done = False
        if res.emergency or state.released:
            emergency = emergency or res.emergency
            outcome = "safety_violation"
            termination = "emergency" if res.emergency else "takeover"
            done = True
        if term is not None:
            if term.kind == "collision":
                collisions += 1
                impact = term.speed / KMH
            outcome = "stagnation" if term.kind == "stuck" else "safety_violation"
            termination = term.kind if not term.detail else f"{term.kind}:{term.detail}"
            done = True
        elif not done and at_goal(nxt):
            outcome, termination = "success", "goal"
            done = True
        if done:
            row_events.append(termination.split(":")[0] if term is None else term.kind)
        trajectory.append((world.clock, e.x, e.y, e.psi, e.v, e.delta, res.command.u_delta,
                           res.command.u_v, ";".join(row_events)))
        world = nxt
        if done:
            break
    if record_every:
        worlds.append(world)

    rc = 1.0 if outcome == "success" else min(1.0, max(0.0, s_best / route.total))
    metrics = EpisodeMetrics(
        AS=float(np.mean(speeds)) / KMH,
        RC=rc,
        TD=td,
        CS=impact,
        SR=1.0 if outcome == "success" else 0.0,
        AC=collisions,
        outcome=outcome,
    )
    return EpisodeResult(trajectory, metrics, events, rewards, latency, termination, worlds)


# --- aggregation -----------------------------------------------------------

def latency_profile(n_cycles: int, mode: PipelineMode, spec, seed: int = 0, policy=None
                    ) -> list[tuple[float, ...]]:
    """Per-stage latencies of ``n_cycles`` cycles, chaining episodes on successive seeds as needed."""
    from deskdrive.policy import PurePursuit
    from deskdrive.worldsim import build_scenario

    latency: list[tuple[float, ...]] = []
    while len(latency) < n_cycles:
        need = n_cycles - len(latency)
        cfg = EpisodeConfig(mode=mode, max_time=need * dynamics.DT + 1e-9)
        res = run_episode(build_scenario(spec, seed), PurePursuit() if policy is None else policy, cfg, seed)
        latency += res.latency[:need]
        seed += 1
    return latency


class MetricSummary(NamedTuple):
    mean: float
    std: float
    pr: float | None  # percent of the reference mean


def aggregate(trials: Sequence[EpisodeMetrics], reference: Sequence[EpisodeMetrics] | None = None
              ) -> dict[str, MetricSummary]:
    if not trials:
        raise ValueError("no trials to aggregate")
    ref = None
    if reference is not None:
        if not reference:
            raise ValueError("empty reference")
        ref = {m: float(np.mean([getattr(t, m) for t in reference])) for m in METRIC_NAMES}
    out = {}
    for m in METRIC_NAMES:
        vals = np.array([getattr(t, m) for t in trials], dtype=float)
        mean = float(vals.mean())
        pr = None
        if ref is not None and ref[m] != 0:
            pr = 100.0 * mean / ref[m]
        out[m] = MetricSummary(mean, float(vals.std()), pr)
    return out


def performance_retention(transfer: float, reference: float) -> float | None:
    return None if reference == 0 else 100.0 * transfer / reference


# --- offline reaction test -------------------------------------------------

class RecordedFrame(NamedTuple):
    obs: Observation
    speed: float  # m/s at capture time
    label: str  # straight | left | right


class ReactionStats(NamedTuple):
    straight_band: float | None
    curve_sign: float | None
    speed_valid: float
    latency_mean_ms: float
    latency_p95_ms: float
    frames: int


def offline_reaction_test(frames: Sequence[RecordedFrame], policy, platform: PlatformParams,
                          action_limits: ActionLimits | None = None, dt: float = dynamics.DT,
                          band: float = 0.1) -> ReactionStats:
    """Stages 2-4 over a recorded, annotated sequence; nothing is actuated."""
    if not frames:
        raise ValueError("empty sequence")
    lim = action_limits or limits_for(platform)
    straight, curve, valid, lat = [], [], [], []
    pid = PidState()
    for k, fr in enumerate(frames):
        if fr.label not in ("straight", "left", "right"):
            raise ValueError(f"frame {k}: unannotated or unknown label {fr.label!r}")
        t0 = time.perf_counter()
        try:
            out = _finite_output(policy(fr.obs))
        except (ValueError, ArithmeticError, TypeError):
            out = None
        if out is None:
            u_delta, v_ok = 0.0, False
        else:
            act = decode_action(out, lim)
            cmd, pid = pam_map(act, fr.speed, dt, platform, pid)
            u_delta, v_ok = cmd.u_delta, 0.0 <= act.v_des <= lim.v_max
        lat.append((time.perf_counter() - t0) * 1e3)
        valid.append(v_ok)
        if fr.label == "straight":
            straight.append(abs(u_delta) < band)
        else:
            want = 1.0 if fr.label == "left" else -1.0
            curve.append(u_delta * want > 0)
    return ReactionStats(
        float(np.mean(straight)) if straight else None,
        float(np.mean(curve)) if curve else None,
        float(np.mean(valid)),
        float(np.mean(lat)),
        float(np.percentile(lat, 95)),
        len(frames),
    )


def synthetic_frames(label: str, n: int = 20, curvature: float = 1 / 40, speed: float = 3.0) -> list[RecordedFrame]:
    """Observations along an ideal straight or constant-curvature road, empty BEV."""
    k = {"straight": 0.0, "left": curvature, "right": -curvature}[label]
    route = arc_route(80.0, [k], piece=2.0)
    frames = []
    for i in range(n):
        s = 1.0 + i * 0.5
        x, y = route.point_at(s)
        psi = float(route.heading_at(s))
        wps = waypoints(route, float(x), float(y), psi)
        frames.append(RecordedFrame(Observation(empty_bev(), (speed / 10.0, 0.0, 0.0), wps), speed, label))
    return frames


# --- CSV writers -----------------------------------------------------------

METRICS_HEADER = ("trial", "seed", "AS", "RC", "TD", "CS", "SR", "AC", "outcome")
LATENCY_HEADER = ("cycle",) + tuple(f"{s}_ms" for s in STAGES) + ("total_ms",)


def write_trajectory(path, result: EpisodeResult) -> None:
    write_csv(path, TRAJECTORY_HEADER, result.trajectory)


def write_events(path, events: Sequence[SafetyEvent]) -> None:
    write_csv(path, ("cycle", "kind"), events)


def write_metrics(path, trials: Sequence[tuple[int, EpisodeMetrics]]) -> None:
    write_csv(path, METRICS_HEADER, [(k, seed) + tuple(m) for k, (seed, m) in enumerate(trials)])


def write_latency(path, latency: Sequence[Sequence[float]]) -> None:
    write_csv(path, LATENCY_HEADER, [(k,) + tuple(lat) + (sum(lat),) for k, lat in enumerate(latency)])
