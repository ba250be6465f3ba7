"""Numerical checks of the transfer bounds: policy Lipschitz estimation, the
observation-error bound, the curvature-tracking bound, the total-variation
return bound on enumerable POMDPs, curriculum ordering, and the composed
three-term decomposition on closed-loop episodes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from deskdrive.formats import ConfigError, fmt, write_csv
from deskdrive.pam import PlatformParams, curvature_to_steering, steering_to_curvature
from deskdrive.perception import l1_bev_distance
from deskdrive.policy import Observation, RewardWeights, reward_bound, reward_lipschitz

ROW_TOL = 1e-12


class BoundReport(NamedTuple):
    check: str
    instance: str
    measured: float
    bound: float
    slack: float
    violated: bool


REPORT_HEADER = BoundReport._fields


def make_report(check: str, instance: str, measured: float, bound: float, tol: float = 0.0) -> BoundReport:
    slack = bound - measured
    return BoundReport(check, instance, float(measured), float(bound), float(slack), bool(slack < -tol))


def write_report(path, rows: Iterable[BoundReport]) -> None:
    write_csv(path, REPORT_HEADER, rows)


def summarize(rows: Sequence[BoundReport]) -> str:
    """Per-check row count, violation count and median slack."""
    lines = []
    for check in dict.fromkeys(r.check for r in rows):
        sub = [r for r in rows if r.check == check]
        slack = float(np.median([r.slack for r in sub]))
        lines.append(f"{check}: {len(sub)} rows, {sum(r.violated for r in sub)} violations, "
                     f"median slack {slack:.6g}")
    total = sum(r.violated for r in rows)
    lines.append(f"total: {len(rows)} rows, {total} violations")
    return "\n".join(lines)


# --- distributions ---------------------------------------------------------

def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a nonempty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has negative or non-finite mass")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} sums to {p.sum()}, not 1")


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError("distributions differ in support size")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


# --- finite POMDPs ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FinitePomdp:
    transition: np.ndarray  # (S, A, S)
    obs_a: np.ndarray  # (S, O)
    obs_b: np.ndarray  # (S, O)
    reward: np.ndarray  # (S, A)
    gamma: float
    initial: np.ndarray  # (S,)
    r_max: float | None = None

    def __post_init__(self):
        T, Oa, Ob, R, d0 = (np.asarray(a, dtype=float) for a in
                            (self.transition, self.obs_a, self.obs_b, self.reward, self.initial))
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError("transition must have shape (S, A, S)")
        S, A = T.shape[:2]
        if Oa.shape != Ob.shape or Oa.ndim != 2 or Oa.shape[0] != S:
            raise ValueError("observation kernels must share shape (S, O)")
        if R.shape != (S, A) or d0.shape != (S,):
            raise ValueError("reward must be (S, A) and the initial distribution (S,)")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        for name, m in (("transition", T), ("obs_a", Oa), ("obs_b", Ob), ("initial", d0[None])):
            if np.any(m < 0) or np.any(np.abs(m.sum(axis=-1) - 1.0) > ROW_TOL):
                raise ValueError(f"{name} rows must be distributions (sum to 1 within {ROW_TOL})")
        r_max = float(np.abs(R).max()) if self.r_max is None else float(self.r_max)
        if np.abs(R).max() > r_max:
            raise ValueError("reward exceeds r_max")
        for name, m in (("transition", T), ("obs_a", Oa), ("obs_b", Ob), ("reward", R), ("initial", d0)):
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_obs(self) -> int:
        return self.obs_a.shape[1]

    def kernel(self, which: str) -> np.ndarray:
        if which not in ("a", "b"):
            raise ValueError("kernel must be 'a' or 'b'")
        return self.obs_a if which == "a" else self.obs_b


def random_pomdp(rng: np.random.Generator, max_states: int = 6, max_actions: int = 3,
                 max_obs: int = 4) -> FinitePomdp:
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    O = int(rng.integers(1, max_obs + 1))

    def rows(*shape):
        m = rng.dirichlet(np.full(shape[-1], 0.7), size=shape[:-1])
        return m / m.sum(axis=-1, keepdims=True)

    T = rows(S, A, S)
    Oa, Ob = rows(S, O), rows(S, O)
    # half the instances get a nearby second kernel, so small d_TV is exercised too
    if rng.random() < 0.5:
        mix = rng.uniform(0, 0.3)
        Ob = (1 - mix) * Oa + mix * Ob
    R = rng.uniform(-1, 1, (S, A))
    d0 = rows(S)
    return FinitePomdp(T, Oa, Ob, R, float(rng.uniform(0.5, 0.95)), d0)


def random_reactive_policy(rng: np.random.Generator, n_obs: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_obs)


def _check_policy(policy: np.ndarray, p: FinitePomdp) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (p.n_obs, p.n_actions):
        raise ValueError(f"policy must be an (O, A) = ({p.n_obs}, {p.n_actions}) matrix")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1) > ROW_TOL):
        raise ValueError("policy rows must be distributions")
    return policy


class ValueResult(NamedTuple):
    J: float
    V: np.ndarray
    residual: float


def state_policy(p: FinitePomdp, policy: np.ndarray, kernel: str) -> np.ndarray:
    """Per-state action distribution after marginalizing the observation."""
    return p.kernel(kernel) @ _check_policy(policy, p)


def value_iteration(p: FinitePomdp, policy: np.ndarray, kernel: str = "a") -> ValueResult:
    """Exact return of a memoryless observation-to-action policy.

    The Bellman fixed point V = r + gamma P V is solved directly, then polished
    by fixed-point sweeps until the residual reaches 1e-12 (or stops shrinking).
    """
    pi = state_policy(p, policy, kernel)
    r = (pi * p.reward).sum(axis=1)
    P = np.einsum("sa,sat->st", pi, p.transition)
    V = np.linalg.solve(np.eye(p.n_states) - p.gamma * P, r)
    residual = float(np.abs(r + p.gamma * P @ V - V).max())
    for _ in range(50):
        if residual <= 1e-12:
            break
        V2 = r + p.gamma * P @ V
        res2 = float(np.abs(r + p.gamma * P @ V2 - V2).max())
        if res2 >= residual:
            break
        V, residual = V2, res2
    return ValueResult(float(p.initial @ V), V, residual)


class MonteCarloEstimate(NamedTuple):
    mean: float
    stderr: float
    episodes: int
    horizon: int
    truncation: float  # largest possible bias from cutting the discounted tail

    def agrees(self, exact: float, n_se: float = 3.0) -> bool:
        return abs(self.mean - exact) <= n_se * self.stderr + self.truncation + 1e-12 * (1 + abs(exact))


def monte_carlo_return(p: FinitePomdp, policy: np.ndarray, kernel: str = "a", episodes: int = 100_000,
                       seed: int = 0, tail: float = 1e-10) -> MonteCarloEstimate:
    """Sampled discounted returns with the tail truncated below ``tail``."""
    policy = _check_policy(policy, p)
    rng = np.random.default_rng(seed)
    horizon = max(1, int(math.ceil(math.log(tail * (1 - p.gamma) / max(p.r_max, 1e-300)) / math.log(p.gamma))))
    O = p.kernel(kernel)
    cum = lambda m: np.cumsum(m, axis=-1)
    cT, cO, cP, c0 = cum(p.transition), cum(O), cum(policy), cum(p.initial)

    def draw(cdf_rows: np.ndarray) -> np.ndarray:
        u = rng.random(cdf_rows.shape[0])
        return np.minimum((cdf_rows < u[:, None]).sum(axis=1), cdf_rows.shape[1] - 1)

    s = draw(np.broadcast_to(c0, (episodes, p.n_states)))
    G = np.zeros(episodes)
    disc = 1.0
    for _ in range(horizon):
        o = draw(cO[s])
        a = draw(cP[o])
        G += disc * p.reward[s, a]
        s = draw(cT[s, a])
        disc *= p.gamma
    return MonteCarloEstimate(float(G.mean()), float(G.std(ddof=1) / math.sqrt(episodes)), episodes, horizon,
                              p.r_max * disc / (1 - p.gamma))


def observation_tv(p: FinitePomdp) -> float:
    """Largest per-state total-variation distance between the two observation kernels."""
    return max(tv_distance(a, b) for a, b in zip(p.obs_a, p.obs_b))


def tv_return_bound(r_max: float, d_tv: float, gamma: float) -> float:
    return 2.0 * r_max * d_tv / (1.0 - gamma) ** 2


def check_tv_bound(p: FinitePomdp, policy: np.ndarray, instance: str = "", tol: float = 1e-9) -> BoundReport:
    """Return drop from kernel a to kernel b against 2 R_max d_TV / (1 - gamma)^2."""
    d = observation_tv(p)
    ja = value_iteration(p, policy, "a").J
    jb = value_iteration(p, policy, "b").J
    return make_report("tv", instance, ja - jb, tv_return_bound(p.r_max, d, p.gamma), tol)


def tv_sweep(n: int, seed: int = 0) -> list[BoundReport]:
    rows = []
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        p = random_pomdp(rng)
        pol = random_reactive_policy(rng, p.n_obs, p.n_actions)
        rows.append(check_tv_bound(p, pol, f"seed={seed};k={k};S={p.n_states};A={p.n_actions};O={p.n_obs}"))
    return rows


def pomdp_text(p: FinitePomdp) -> str:
    def block(name: str, m: np.ndarray) -> list[str]:
        return [f"[{name}]"] + [" ".join(fmt(float(v)) for v in row) for row in np.atleast_2d(m)]

    lines = ["# finite pomdp", f"states {p.n_states}", f"actions {p.n_actions}",
             f"observations {p.n_obs}", f"gamma {fmt(p.gamma)}", f"r_max {fmt(p.r_max)}"]
    lines += block("initial", p.initial)
    for a in range(p.n_actions):
        lines += block(f"transition {a}", p.transition[:, a, :])
    lines += block("obs_a", p.obs_a) + block("obs_b", p.obs_b) + block("reward", p.reward)
    return "\n".join(lines) + "\n"


def parse_pomdp(text: str) -> FinitePomdp:
    header: dict[str, str] = {}
    blocks: dict[str, list[list[float]]] = {}
    current = None
    try:
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                current = line.strip("[]")
                blocks[current] = []
            elif current is None:
                key, value = line.split()
                header[key] = value
            else:
                blocks[current].append([float(v) for v in line.split()])
        S, A = int(header["states"]), int(header["actions"])
        T = np.stack([np.array(blocks[f"transition {a}"]) for a in range(A)], axis=1)
        return FinitePomdp(T, np.array(blocks["obs_a"]), np.array(blocks["obs_b"]),
                           np.array(blocks["reward"]).reshape(S, A), float(header["gamma"]),
                           np.array(blocks["initial"]).reshape(S), float(header["r_max"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed POMDP text: {exc}") from None


# --- Lipschitz estimation --------------------------------------------------

class LipschitzEstimate(NamedTuple):
    L_hat: float
    samples: int
    argmax: tuple[int, int]  # (sample index, perturbed entry count)


class CellSumPolicy:
    """a1 = c * (sum of BEV entries - center), optionally tanh-squashed; a2 = 0.

    Globally Lipschitz with constant |c| in the L1 input norm.
    """

    def __init__(self, c: float, center: float = 0.0, squash: bool = False):
        self.c = float(c)
        self.center = float(center)
        self.squash = squash

    def __call__(self, obs: Observation):
        z = self.c * (float(np.count_nonzero(obs.bev)) - self.center)
        return (math.tanh(z) if self.squash else z), 0.0

    def lipschitz_bound(self) -> float:
        return abs(self.c)


def _output(policy, obs: Observation) -> np.ndarray:
    return np.asarray(policy(obs), dtype=float)


def estimate_lipschitz(policy, sampler: Callable[[np.random.Generator], Observation], n_samples: int,
                       seed: int = 0, multi_cells: int = 64) -> LipschitzEstimate:
    """Largest ||output change||_2 / ||input change||_1 over single- and multi-entry flips."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    best, arg = 0.0, (0, 0)
    for i in range(n_samples):
        obs = sampler(rng)
        base = _output(policy, obs)
        for k in (1, multi_cells):
            bev = obs.bev.copy()
            idx = rng.choice(bev.size, size=min(k, bev.size), replace=False)
            bev.flat[idx] ^= 1
            ratio = float(np.linalg.norm(_output(policy, obs._replace(bev=bev)) - base)) / idx.size
            if ratio > best:
                best, arg = ratio, (i, int(idx.size))
    return LipschitzEstimate(best, n_samples, arg)


def check_gob_bound(policy, pairs: Iterable[tuple[Observation, Observation]], lipschitz: float,
                    instance: str = "", tol: float = 1e-9) -> BoundReport:
    """Mean output deviation over scene-matched (clean, corrupted) pairs vs L * mean L1."""
    dev, dist, n = 0.0, 0.0, 0
    for clean, noisy in pairs:
        dev += float(np.linalg.norm(_output(policy, clean) - _output(policy, noisy)))
        dist += l1_bev_distance(clean.bev, noisy.bev)
        n += 1
    if n == 0:
        raise ValueError("no observation pairs")
    return make_report("gob", instance, dev / n, lipschitz * dist / n, tol)


def scene_worlds(spec, seeds: Iterable[int], every: int = 10, horizon: float = 5.0, policy=None) -> list:
    """World states sampled along closed-loop ground-truth runs, one per ``every`` cycles."""
    from deskdrive.pipeline import EpisodeConfig, run_episode
    from deskdrive.policy import PurePursuit
    from deskdrive.worldsim import build_scenario

    out = []
    for s in seeds:
        driver = PurePursuit() if policy is None else policy
        run = run_episode(build_scenario(spec, s), driver, EpisodeConfig(max_time=horizon), seed=s,
                          record_every=every)
        out.extend(run.worlds)
    return out


def observation_pairs(worlds: Sequence, flip_rate: float, jitter: int, streams: int,
                      seed: int = 0) -> list[tuple[Observation, Observation]]:
    """(noise-free, corrupted) reconstructed observations of the same world state.

    Each world yields ``streams`` pairs that share the clean side and differ
    in the noise stream.
    """
    from deskdrive.geometry import DEFAULT_GRID, ipm_project
    from deskdrive.pam import limits_for
    from deskdrive.perception import SegNoiseModel, corrupt, encode
    from deskdrive.pipeline import GOB_RANGE, ego_state
    from deskdrive.geometry import DESK_CAMERA
    from deskdrive.policy import make_observation, waypoints
    from deskdrive.worldsim import ego_mask_at, render_front_view, route_mask_at

    noise = SegNoiseModel(flip_rate, jitter, seed)
    xs, ys = DEFAULT_GRID.centers()
    pairs = []
    for k, w in enumerate(worlds):
        seg = render_front_view(w, DESK_CAMERA, DEFAULT_GRID, GOB_RANGE)
        route = route_mask_at(w, xs, ys, DEFAULT_GRID.extent / math.sqrt(2))
        ego = ego_mask_at(w, xs, ys)
        state = ego_state(w, limits_for(w.platform).v_max)
        wps = waypoints(w.route, w.ego.x, w.ego.y, w.ego.psi)
        clean = make_observation(encode(ipm_project(seg, DESK_CAMERA, DEFAULT_GRID), route, ego), state, wps)
        for j in range(streams):
            noisy = encode(ipm_project(corrupt(seg, noise, stream=k * streams + j), DESK_CAMERA, DEFAULT_GRID),
                           route, ego)
            pairs.append((clean, clean._replace(bev=noisy)))
    return pairs


def gob_sweep(policy, worlds: Sequence, flip_rates: Sequence[float], streams: int, jitter: int = 0,
              seed: int = 0, lipschitz: float | None = None) -> list[BoundReport]:
    """One report per flip rate; the Lipschitz constant defaults to the policy's own bound."""
    L = policy.lipschitz_bound() if lipschitz is None else lipschitz
    return [check_gob_bound(policy, observation_pairs(worlds, rate, jitter, streams, seed), L,
                            f"flip={rate:g};jitter={jitter};pairs={len(worlds) * streams}")
            for rate in flip_rates]


# --- curvature tracking ----------------------------------------------------

def pam_lateral_bound(v_max: float, horizon: float, eps_pid: float) -> float:
    return v_max * v_max * horizon * horizon * eps_pid / 2.0


class PamTrial(NamedTuple):
    v: float
    horizon: float
    eps_pid: float
    kappa: float
    constant_sign: bool


def simulate_tracking_error(trial: PamTrial, platform: PlatformParams, rng: np.random.Generator,
                            dt: float = 0.005) -> float:
    """Largest gap between intended and executed positions over the horizon.

    The intended path has constant curvature; the executed one passes the same
    command through the steering map and back, then adds a disturbance of
    magnitude at most eps_pid (the full eps_pid every step, or uniform random
    in [-eps_pid, eps_pid]). Euler steps use the heading from before the step.
    """
    n = int(round(trial.horizon / dt))
    kappa_exec = steering_to_curvature(curvature_to_steering(trial.kappa, platform), platform)
    if trial.constant_sign:
        dk = np.full(n, trial.eps_pid)
    else:
        dk = rng.uniform(-trial.eps_pid, trial.eps_pid, n)
    step = trial.v * dt
    psi_i = step * trial.kappa * np.arange(n)
    psi_e = np.concatenate([[0.0], np.cumsum(step * (kappa_exec + dk))[:-1]])
    gap_x = np.cumsum(step * (np.cos(psi_e) - np.cos(psi_i)))
    gap_y = np.cumsum(step * (np.sin(psi_e) - np.sin(psi_i)))
    return float(np.sqrt(gap_x * gap_x + gap_y * gap_y).max()) if n else 0.0


def check_pam_bound(platform: PlatformParams, v_max: float, horizon: float, eps_pid: float, n_trials: int,
                    seed: int = 0, randomize: bool = True, dt: float = 0.005, tol: float = 1e-6,
                    kappa_max: float = 0.05) -> list[BoundReport]:
    """Tracking-error trials against v_max^2 T^2 eps_pid / 2 (T in seconds).

    With ``randomize`` each trial draws v <= v_max, T <= horizon and
    eps <= eps_pid; otherwise every trial runs at the limits. Trials alternate
    between constant-sign and random-sign disturbances.
    """
    if eps_pid < 0 or horizon < 0 or v_max <= 0:
        raise ValueError("need eps_pid >= 0, horizon >= 0, v_max > 0")
    rows = []
    for k in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        if randomize:
            trial = PamTrial(float(rng.uniform(0, v_max)), float(rng.uniform(0, horizon)),
                             float(rng.uniform(0, eps_pid)), float(rng.uniform(-kappa_max, kappa_max)), k % 2 == 0)
        else:
            trial = PamTrial(v_max, horizon, eps_pid, 0.0, k % 2 == 0)
        trial = trial._replace(horizon=round(trial.horizon / dt) * dt)
        measured = simulate_tracking_error(trial, platform, rng, dt)
        inst = (f"k={k};v={trial.v:.4f};T={trial.horizon:.3f};eps={trial.eps_pid:.5f};"
                f"{'const' if trial.constant_sign else 'rand'}")
        rows.append(make_report("pam", inst, measured, pam_lateral_bound(v_max, trial.horizon, trial.eps_pid), tol))
    return rows


# --- curriculum ordering ---------------------------------------------------

def mean_l1(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    if not a or len(a) != len(b):
        raise ValueError("need equally long, nonempty scene-matched samples")
    return float(np.mean([l1_bev_distance(x, y) for x, y in zip(a, b)]))


def check_curriculum_ordering(phase1: Sequence[np.ndarray], phase2: Sequence[np.ndarray],
                              deploy: Sequence[np.ndarray], instance: str = "mean-L1 proxy",
                              tol: float = 0.0) -> BoundReport:
    """Phase-2 observations must sit no further from deployment than phase-1 ones.

    Distances use the mean L1 over scene-matched triples in place of the
    total-variation distance, which is intractable on BEV tensors.
    """
    return make_report("curriculum", instance, mean_l1(phase2, deploy), mean_l1(phase1, deploy), tol)


def bootstrap_ordering(phase1, phase2, deploy, n_resamples: int = 200, seed: int = 0) -> float:
    """Fraction of scene resamples in which the ordering holds."""
    d1 = np.array([l1_bev_distance(x, y) for x, y in zip(phase1, deploy)], dtype=float)
    d2 = np.array([l1_bev_distance(x, y) for x, y in zip(phase2, deploy)], dtype=float)
    if d1.size == 0:
        raise ValueError("empty samples")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d1.size, (n_resamples, d1.size))
    return float(np.mean(d1[idx].mean(axis=1) >= d2[idx].mean(axis=1)))


# --- composed decomposition ------------------------------------------------

@dataclass(frozen=True)
class Knobs:
    flip_rate: float = 0.0  # segmentation label flips in the degraded run
    eps_pid: float = 0.0  # curvature tracking disturbance, 1/m
    shift: int = 0  # boundary jitter radius in pixels: a structured observation shift

    @property
    def observation_noise(self) -> bool:
        return self.flip_rate > 0 or self.shift > 0

    def label(self) -> str:
        return f"flip={self.flip_rate:g};eps_pid={self.eps_pid:g};shift={self.shift}"


class ComposedRow(NamedTuple):
    seed: int
    knobs: Knobs
    return_ideal: float
    return_degraded: float
    gap: float
    gob_term: float
    pam_term: float
    tpt_term: float
    eps_seg: float
    d_tv: float
    stage_gaps: tuple[float, float, float]  # seg only, + tracking, + shift

    @property
    def bound(self) -> float:
        return self.gob_term + self.pam_term + self.tpt_term

    @property
    def looseness(self) -> float:
        return math.inf if self.gap == 0 else self.bound / self.gap


def histogram_tv(a: np.ndarray, b: np.ndarray) -> float:
    """TV distance between the channel-occupancy histograms of two BEV tensors."""
    ha = a.reshape(-1, a.shape[-1]).sum(axis=0).astype(float)
    hb = b.reshape(-1, b.shape[-1]).sum(axis=0).astype(float)
    if ha.sum() == 0 and hb.sum() == 0:
        return 0.0
    if ha.sum() == 0 or hb.sum() == 0:
        return 1.0
    return tv_distance(ha / ha.sum(), hb / hb.sum())


@dataclass(frozen=True)
class ComposedSetup:
    """Everything but the knobs and the seed."""

    scenario: object  # worldsim.ScenarioSpec
    policy: object
    horizon: float = 5.0
    gamma: float = 0.99
    weights: RewardWeights = RewardWeights()
    sample_every: int = 5
    v_max: float | None = None  # default: the policy action-space speed limit


def _episode_config(setup: ComposedSetup, flip: float, shift: int, eps_pid: float, seed: int):
    from deskdrive.pipeline import EpisodeConfig, gob_mode

    return EpisodeConfig(mode=gob_mode(flip, shift, seed=seed), max_time=setup.horizon,
                         kappa_disturbance=eps_pid, reward=setup.weights, gamma=setup.gamma)


def run_composed(setup: ComposedSetup, knobs: Knobs, seed: int, cache: dict | None = None) -> ComposedRow:
    """Ideal run vs the degraded run for one seed, with all three bound terms.

    The ideal run sees noise-free reconstructed observations and tracks
    curvature perfectly. Intermediate runs add segmentation noise, then the
    tracking disturbance, then the shift, so each stage's return gap lines up
    with one term. ``cache`` shares runs between knob settings of one seed.
    """
    from deskdrive.pipeline import observe, run_episode
    from deskdrive.pam import limits_for
    from deskdrive.worldsim import build_scenario

    cache = {} if cache is None else cache
    world = build_scenario(setup.scenario, seed)

    def run(flip: float, shift: int, eps: float):
        key = (seed, flip, shift, eps)
        if key not in cache:
            cfg = _episode_config(setup, flip, shift, eps, seed)
            cache[key] = run_episode(world, setup.policy, cfg, seed=seed,
                                     record_every=setup.sample_every if key[1:] == (0.0, 0, 0.0) else 0)
        return cache[key]

    ideal = run(0.0, 0, 0.0)
    r1 = run(knobs.flip_rate, 0, 0.0)
    r2 = run(knobs.flip_rate, 0, knobs.eps_pid)
    r3 = run(knobs.flip_rate, knobs.shift, knobs.eps_pid)
    J = [r.discounted_return(setup.gamma) for r in (ideal, r1, r2, r3)]

    eps_seg, d_tv = 0.0, 0.0
    if knobs.observation_noise:
        clean_mode = _episode_config(setup, 0.0, 0, 0.0, seed).mode
        noisy_mode = _episode_config(setup, knobs.flip_rate, knobs.shift, 0.0, seed).mode
        l1, tv = [], []
        for k, w in enumerate(ideal.worlds):
            cyc = k * setup.sample_every
            a = observe(w, clean_mode, cyc)
            b = observe(w, noisy_mode, cyc)
            l1.append(l1_bev_distance(a, b))
            tv.append(histogram_tv(a, b))
        eps_seg, d_tv = float(np.mean(l1)), float(np.mean(tv))

    L_r = reward_lipschitz(setup.weights)
    R_max = reward_bound(setup.weights)
    one = 1.0 - setup.gamma
    v_max = setup.v_max if setup.v_max is not None else limits_for(world.platform).v_max
    L_pi = float(setup.policy.lipschitz_bound())
    gob_term = L_r * L_pi * eps_seg / one
    pam_term = L_r * pam_lateral_bound(v_max, setup.horizon, knobs.eps_pid) / one
    tpt_term = tv_return_bound(R_max, d_tv, setup.gamma)
    return ComposedRow(seed, knobs, J[0], J[3], abs(J[0] - J[3]), gob_term, pam_term, tpt_term,
                       eps_seg, d_tv, (abs(J[0] - J[1]), abs(J[1] - J[2]), abs(J[2] - J[3])))


def composed_reports(rows: Sequence[ComposedRow], tol: float = 1e-9) -> list[BoundReport]:
    out = []
    for r in rows:
        inst = f"seed={r.seed};{r.knobs.label()};eps_seg={r.eps_seg:.1f};d_tv={r.d_tv:.4g}"
        out.append(make_report("composed", inst, r.gap, r.bound, tol))
    return out


def check_composed_bound(setup: ComposedSetup, knobs: Knobs, seeds: Iterable[int],
                         cache: dict | None = None) -> list[ComposedRow]:
    cache = {} if cache is None else cache
    return [run_composed(setup, knobs, s, cache) for s in seeds]


def default_knob_sweep(flip: float = 0.05, eps_pid: float = 0.01, shift: int = 1) -> list[Knobs]:
    """Each knob alone, then all together."""
    return [Knobs(flip_rate=flip), Knobs(eps_pid=eps_pid), Knobs(shift=shift), Knobs(flip, eps_pid, shift)]
