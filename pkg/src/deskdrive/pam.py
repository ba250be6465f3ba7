"""Physics-aware action mapping: normalized policy actions to curvature and speed, then to
platform steering and longitudinal commands through a bicycle model and a clipped-integral PID.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from deskdrive import dynamics
from deskdrive.formats import ConfigError, format_keyvalue, read_keyvalue, require

KMH = 1 / 3.6
V_MAX_DEFAULT = 35 * KMH


class UnreachableCurvature(ValueError):
    """A curvature exceeds what the target platform can steer."""


class PolicyOutput(NamedTuple):
    a1: float
    a2: float


class PhysicsAction(NamedTuple):
    kappa: float
    v_des: float


class VehicleCommand(NamedTuple):
    u_delta: float
    u_v: float


class PidState(NamedTuple):
    e_int: float = 0.0
    e_prev: float = 0.0


BRAKE = VehicleCommand(0.0, -1.0)


@dataclass(frozen=True)
class ActionLimits:
    kappa_max: float
    v_max: float = V_MAX_DEFAULT

    def __post_init__(self):
        if not (self.kappa_max > 0 and self.v_max > 0):
            raise ValueError("action limits must be positive")


@dataclass(frozen=True)
class PlatformParams:
    L: float
    delta_max: float
    Kp: float
    Ki: float
    Kd: float
    e_max: float = 5.0
    d_delta_max: float = 0.1
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("wheelbase must be positive")
        if not 0 < self.delta_max < math.pi / 2:
            raise ValueError("delta_max must be in (0, pi/2)")
        if min(self.Kp, self.Ki, self.Kd) < 0:
            raise ValueError("PID gains must be nonnegative")
        if not (self.e_max > 0 and self.d_delta_max > 0):
            raise ValueError("e_max and d_delta_max must be positive")

    @property
    def kappa_reach(self) -> float:
        """Largest curvature the steering can produce."""
        return math.tan(self.delta_max) / self.L

    @property
    def gains(self) -> tuple[float, float, float]:
        return self.Kp, self.Ki, self.Kd

    def with_gains(self, Kp: float, Ki: float, Kd: float) -> "PlatformParams":
        return replace(self, Kp=Kp, Ki=Ki, Kd=Kd)


PLATFORMS = {
    "carla-default": PlatformParams(2.875, math.radians(70.0), 0.5, 0.05, 0.1, name="carla-default"),
    "e-transit": PlatformParams(3.67, math.radians(38.5), 0.8, 0.1, 0.15, name="e-transit"),
}


def platform(name: str) -> PlatformParams:
    try:
        return PLATFORMS[name]
    except KeyError:
        raise ConfigError(f"unknown platform preset '{name}' (known: {', '.join(PLATFORMS)})") from None


def limits_for(p: PlatformParams, v_max: float = V_MAX_DEFAULT) -> ActionLimits:
    """Action limits whose curvature range is exactly the platform's steering envelope."""
    return ActionLimits(p.kappa_reach, v_max)


def _finite(*xs: float) -> bool:
    return all(math.isfinite(x) for x in xs)


def decode_action(out: PolicyOutput, lim: ActionLimits) -> PhysicsAction:
    a1, a2 = out
    if not _finite(a1, a2):
        raise ValueError(f"non-finite policy output {out}")
    if abs(a1) > 1 or abs(a2) > 1:
        raise ValueError(f"policy output {out} outside [-1, 1]")
    return PhysicsAction(a1 * lim.kappa_max, (a2 + 1) / 2 * lim.v_max)


def curvature_to_steering(kappa: float, p: PlatformParams) -> float:
    if not math.isfinite(kappa):
        raise ValueError("non-finite curvature")
    u = math.atan(p.L * kappa) / p.delta_max
    return min(1.0, max(-1.0, u))


def steering_to_curvature(u_delta: float, p: PlatformParams) -> float:
    """Curvature a kinematic bicycle follows at normalized steering ``u_delta``."""
    return math.tan(u_delta * p.delta_max) / p.L


def pid_step(state: PidState, v_des: float, v: float, dt: float,
             p: PlatformParams) -> tuple[float, PidState]:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not _finite(v_des, v, dt, state.e_int, state.e_prev):
        raise ValueError("non-finite PID input")
    e = v_des - v
    e_int = min(p.e_max, max(-p.e_max, state.e_int + e * dt))
    raw = p.Kp * e + p.Ki * e_int + p.Kd * (e - state.e_prev) / dt
    return min(1.0, max(-1.0, raw)), PidState(e_int, e)


def pam_map(act: PhysicsAction, v_current: float, dt: float, p: PlatformParams,
            state: PidState) -> tuple[VehicleCommand, PidState]:
    if not _finite(act.kappa, act.v_des):
        raise ValueError(f"non-finite physics action {act}")
    u_delta = curvature_to_steering(act.kappa, p)
    u_v, state = pid_step(state, act.v_des, v_current, dt, p)
    return VehicleCommand(u_delta, u_v), state


def convert_platform(act: PhysicsAction, source: PlatformParams, target: PlatformParams) -> PhysicsAction:
    """Carry an action across platforms. The representation needs no change; only the
    target's reachable curvature is checked."""
    if not _finite(act.kappa, act.v_des):
        raise ValueError(f"non-finite physics action {act}")
    if abs(act.kappa) > target.kappa_reach:
        raise UnreachableCurvature(
            f"|kappa| = {abs(act.kappa):.4g} 1/m exceeds {target.name} reach {target.kappa_reach:.4g} 1/m"
        )
    return act


# --- platform files --------------------------------------------------------

PLATFORM_HEADER = (
    "platform parameters",
    "L: wheelbase (m); delta_max_deg: max front-wheel angle (degrees)",
    "Kp, Ki, Kd: speed PID gains; e_max: integral clip (m/s*s)",
    "d_delta_max: steering-rate limit per control cycle (normalized units)",
)


def read_platform(path_or_name: str) -> PlatformParams:
    if path_or_name in PLATFORMS:
        return PLATFORMS[path_or_name]
    sections = read_keyvalue(path_or_name)
    s = sections.get("", sections.get("platform", {}))
    try:
        return PlatformParams(
            L=require(s, "L"), delta_max=math.radians(require(s, "delta_max_deg")),
            Kp=require(s, "Kp"), Ki=require(s, "Ki"), Kd=require(s, "Kd"),
            e_max=float(s.get("e_max", 5.0)), d_delta_max=float(s.get("d_delta_max", 0.1)),
            name=s.get("name", str(path_or_name)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path_or_name}: {exc}") from None


def platform_text(p: PlatformParams, extra_header: tuple[str, ...] = ()) -> str:
    values = {
        "name": p.name, "L": p.L, "delta_max_deg": math.degrees(p.delta_max),
        "Kp": p.Kp, "Ki": p.Ki, "Kd": p.Kd, "e_max": p.e_max, "d_delta_max": p.d_delta_max,
    }
    return format_keyvalue(values, PLATFORM_HEADER + extra_header)


# --- step-response calibration --------------------------------------------

@dataclass(frozen=True)
class LongitudinalPlant:
    """Speed response of the simulator's longitudinal model under PID control.

    Called with an (N, 3) array of gain triples, returns the (N, steps + 1)
    speed traces for a step from rest to ``v_target``.
    """

    v_target: float
    a_max: float = dynamics.A_MAX
    lag: float = dynamics.ACTUATOR_LAG
    e_max: float = 5.0
    duration: float = 10.0
    dt: float = dynamics.DT
    v_cap: float = 1e9

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def __call__(self, gains: np.ndarray) -> np.ndarray:
        gains = np.atleast_2d(np.asarray(gains, dtype=float))
        kp, ki, kd = gains[:, 0], gains[:, 1], gains[:, 2]
        n = len(gains)
        v = np.zeros(n)
        a = np.zeros(n)
        e_int = np.zeros(n)
        e_prev = np.zeros(n)
        out = np.empty((n, self.steps + 1))
        out[:, 0] = v
        for k in range(self.steps):
            e = self.v_target - v
            e_int = np.clip(e_int + e * self.dt, -self.e_max, self.e_max)
            u = np.clip(kp * e + ki * e_int + kd * (e - e_prev) / self.dt, -1.0, 1.0)
            e_prev = e
            v, a = dynamics.longitudinal(v, a, u, self.dt, self.a_max, self.lag, self.v_cap)
            out[:, k + 1] = v
        return out


@dataclass(frozen=True)
class StepSpec:
    max_overshoot: float = 0.10
    settle_time: float = 2.0
    settle_band: float = 0.05
    max_crossings: int = 2


class StepMetrics(NamedTuple):
    iae: float
    overshoot: float
    settling_time: float
    crossings: int


def step_metrics(speeds: np.ndarray, v_target: float, dt: float, band: float) -> StepMetrics:
    speeds = np.asarray(speeds, dtype=float)
    e = v_target - speeds
    iae = float(np.sum(np.abs(e[1:])) * dt)
    overshoot = max(0.0, float(speeds.max() - v_target) / v_target)
    outside = np.nonzero(np.abs(e) > band * v_target)[0]
    if len(outside) == 0:
        settle = 0.0
    elif outside[-1] == len(e) - 1:
        settle = math.inf
    else:
        settle = float((outside[-1] + 1) * dt)
    inside = np.nonzero(np.abs(e) <= band * v_target)[0]
    crossings = 0
    if len(inside):
        tail = np.sign(e[inside[0]:])
        tail = tail[tail != 0]
        crossings = int(np.count_nonzero(tail[1:] != tail[:-1]))
    return StepMetrics(iae, overshoot, settle, crossings)


@dataclass(frozen=True)
class CalibrationResult:
    gains: tuple[float, float, float]
    feasible: bool
    metrics: StepMetrics
    violations: tuple[str, ...]
    response: np.ndarray = field(repr=False, compare=False)
    dt: float = dynamics.DT


def _violations(m: StepMetrics, spec: StepSpec) -> tuple[str, ...]:
    out = []
    if m.overshoot > spec.max_overshoot:
        out.append(f"overshoot {m.overshoot:.3f} > {spec.max_overshoot}")
    if m.settling_time > spec.settle_time:
        out.append(f"settling {m.settling_time:.2f} s > {spec.settle_time} s")
    if m.crossings > spec.max_crossings:
        out.append(f"{m.crossings} zero crossings > {spec.max_crossings}")
    return tuple(out)


def gain_grid(n_kp: int = 9, n_ki: int = 5, n_kd: int = 4) -> np.ndarray:
    kp = np.logspace(-1, 1, n_kp)
    ki = np.logspace(-2, 0, n_ki)
    kd = np.logspace(-3, -1, n_kd)
    return np.array(np.meshgrid(kp, ki, kd, indexing="ij")).reshape(3, -1).T


def calibrate_pid(plant: Callable[[np.ndarray], np.ndarray], v_target: float, dt: float,
                  spec: StepSpec = StepSpec(), grid: np.ndarray | None = None) -> CalibrationResult:
    """Grid-search PID gains on a step response.

    Picks the lowest integral absolute error among triples meeting ``spec``;
    when none does, picks the triple with the smallest normalized constraint
    excess (ties broken by IAE) and reports what it violates.
    """
    grid = gain_grid() if grid is None else np.asarray(grid, dtype=float)
    traces = plant(grid)
    metrics = [step_metrics(tr, v_target, dt, spec.settle_band) for tr in traces]

    def excess(m: StepMetrics) -> float:
        return (max(0.0, m.overshoot - spec.max_overshoot) / spec.max_overshoot
                + max(0.0, min(m.settling_time, 1e6) - spec.settle_time) / spec.settle_time
                + max(0, m.crossings - spec.max_crossings))

    keys = [(excess(m), m.iae, k) for k, m in enumerate(metrics)]
    _, _, best = min(keys)
    m = metrics[best]
    viol = _violations(m, spec)
    gains = tuple(float(g) for g in grid[best])
    return CalibrationResult(gains, not viol, m, viol, traces[best], dt)
