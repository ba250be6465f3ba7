"""Actuator and kinematic update rules shared by the world simulator and the PID calibrator.

All functions broadcast over numpy arrays so the calibrator can simulate many
gain triples at once with the exact arithmetic the simulator uses.
"""

from __future__ import annotations

import numpy as np

A_MAX = 3.0  # m/s^2 at |u_v| = 1
ACTUATOR_LAG = 0.2  # s, first-order time constant of the acceleration response
STEER_SLEW_TIME = 0.5  # s to sweep from center to full lock
DT = 0.05


def lag_gain(dt: float, lag: float) -> float:
    """Exact discretization weight of a first-order lag over one step."""
    if lag <= 0:
        return 1.0
    return float(-np.expm1(-dt / lag))


def longitudinal(v, accel, u_v, dt: float, a_max: float, lag: float, v_cap: float):
    """Advance speed one step. Returns (v_next, accel_next)."""
    demand = np.asarray(u_v, dtype=float) * a_max
    accel = accel + (demand - accel) * lag_gain(dt, lag)
    v_next = np.clip(v + accel * dt, 0.0, v_cap)
    # brakes hold a stopped vehicle without storing negative acceleration
    accel = np.where((v_next <= 0.0) & (accel < 0.0), 0.0, accel)
    return v_next, accel


def slew_steering(delta, u_delta, dt: float, delta_max: float, slew_time: float = STEER_SLEW_TIME):
    target = np.asarray(u_delta, dtype=float) * delta_max
    step = delta_max * dt / slew_time
    return delta + np.clip(target - delta, -step, step)


def bicycle_euler(x, y, psi, v, delta, dt: float, L: float):
    """One explicit Euler step of the kinematic bicycle model from the pre-step state."""
    return (
        x + v * np.cos(psi) * dt,
        y + v * np.sin(psi) * dt,
        psi + v * np.tan(delta) / L * dt,
    )
