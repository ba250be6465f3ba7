"""Two-phase curriculum training of the linear BEV policy with the cross-entropy method.

Phase 1 optimizes on ground-truth BEV in simulation. Phase 2 warm-starts from
the phase-1 mean and continues on reconstructed BEV with a noise model chosen
to resemble deployment.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from deskdrive.bounds import BoundReport, bootstrap_ordering, check_curriculum_ordering, mean_l1
from deskdrive.formats import write_csv
from deskdrive.pipeline import GT_MODE, EpisodeConfig, PipelineMode, gob_mode, observe, run_episode
from deskdrive.policy import N_PARAMS, LearnablePolicy, RewardWeights
from deskdrive.worldsim import ScenarioSpec, build_scenario


@dataclass(frozen=True)
class NoiseSpec:
    flip_rate: float = 0.0
    boundary_jitter: int = 0
    seed: int = 0

    def mode(self) -> PipelineMode:
        return gob_mode(self.flip_rate, self.boundary_jitter, self.seed)


@dataclass(frozen=True)
class CurriculumConfig:
    scenario: ScenarioSpec = field(default_factory=lambda: ScenarioSpec("car_following", route_length=40))
    phase1_generations: int = 8
    phase2_generations: int = 2
    population: int = 16
    elite_fraction: float = 0.25
    sigma0: float = 0.5
    sigma_decay: float = 0.85
    phase2_sigma_scale: float = 0.5
    sigma_floor: float = 0.02
    seed: int = 0
    scenario_seeds: tuple[int, ...] = (0, 1)  # every member runs all of them, every generation
    horizon: float = 3.0
    phase2_noise: NoiseSpec = NoiseSpec(0.02, 1, seed=101)
    deploy_noise: NoiseSpec = NoiseSpec(0.03, 1, seed=202)
    reward: RewardWeights = RewardWeights()
    gamma: float = 0.99
    epsilon_samples: int = 12
    jobs: int = 1

    def __post_init__(self):
        if self.phase1_generations < 1:
            raise ValueError("phase 1 needs at least one generation")
        if self.phase2_generations < 0:
            raise ValueError("phase 2 generations must be nonnegative")
        if self.population < 2 or not 0 < self.elite_fraction <= 1:
            raise ValueError("need population >= 2 and elite fraction in (0, 1]")
        if not self.scenario_seeds:
            raise ValueError("need at least one scenario seed")
        if not (self.sigma0 > 0 and 0 < self.sigma_decay <= 1 and self.horizon > 0):
            raise ValueError("sigma0, sigma_decay and horizon must be positive (decay <= 1)")


class GenerationRow(NamedTuple):
    phase: int
    generation: int
    mean_return: float
    best_return: float
    sigma: float
    obs_epsilon: float


TRAINING_HEADER = GenerationRow._fields


def write_training_report(path, rows) -> None:
    write_csv(path, TRAINING_HEADER, rows)


@dataclass
class TrainResult:
    policy: LearnablePolicy
    phase1_policy: LearnablePolicy
    rows: list[GenerationRow]
    epsilon_phase1: float
    epsilon_phase2: float
    ordering: BoundReport
    ordering_bootstrap: float


def _member_return(args) -> float:
    params, mode, cfg, seeds = args
    policy = LearnablePolicy(params)
    ep = EpisodeConfig(mode=mode, max_time=cfg.horizon, reward=cfg.reward, gamma=cfg.gamma)
    total = 0.0
    for s in seeds:
        world = build_scenario(cfg.scenario, s)
        total += run_episode(world, policy, ep, seed=s).discounted_return(cfg.gamma)
    return total / len(seeds)


def _evaluate(population: np.ndarray, mode: PipelineMode, cfg: CurriculumConfig, seeds, pool) -> np.ndarray:
    tasks = [(p, mode, cfg, seeds) for p in population]
    if pool is None:
        return np.array([_member_return(t) for t in tasks])
    return np.array(list(pool.map(_member_return, tasks)))


def _cem_phase(mean: np.ndarray, sigma: float, generations: int, phase: int, mode: PipelineMode,
               cfg: CurriculumConfig, rng_seq: np.random.SeedSequence, pool) -> tuple[np.ndarray, float, list]:
    rows = []
    n_elite = max(1, int(round(cfg.elite_fraction * cfg.population)))
    for gen, child in enumerate(rng_seq.spawn(generations)):
        # one stream per member, so results do not depend on the worker count
        noise = np.stack([np.random.default_rng(s).standard_normal(N_PARAMS)
                          for s in child.spawn(cfg.population)])
        population = mean + sigma * noise
        returns = _evaluate(population, mode, cfg, cfg.scenario_seeds, pool)
        rows.append(GenerationRow(phase, gen, float(returns.mean()), float(returns.max()), sigma, float("nan")))
        # stable sort keeps ties in member order
        elite = population[np.argsort(-returns, kind="stable")[:n_elite]]
        mean = elite.mean(axis=0)
        sigma = max(cfg.sigma_floor, sigma * cfg.sigma_decay)
    return mean, sigma, rows


def observation_samples(cfg: CurriculumConfig, policy) -> tuple[list, list, list]:
    """Scene-matched (phase 1, phase 2, deployment) observations along a rollout of ``policy``."""
    every = 5
    p1, p2, dep = [], [], []
    for s in cfg.scenario_seeds:
        world = build_scenario(cfg.scenario, s)
        run = run_episode(world, policy, EpisodeConfig(max_time=cfg.horizon, reward=cfg.reward), seed=s,
                          record_every=every)
        for k, w in enumerate(run.worlds):
            cyc = k * every
            p1.append(observe(w, GT_MODE, cyc))
            p2.append(observe(w, cfg.phase2_noise.mode(), cyc))
            dep.append(observe(w, cfg.deploy_noise.mode(), cyc))
            if len(p1) >= cfg.epsilon_samples:
                return p1, p2, dep
    return p1, p2, dep


def train_tpt(cfg: CurriculumConfig = CurriculumConfig()) -> TrainResult:
    """Phase 1 on ground truth, phase 2 on reconstructed noisy BEV, then the ordering check."""
    root = np.random.SeedSequence([cfg.seed, 0x7E47])
    s1, s2 = root.spawn(2)
    pool = ProcessPoolExecutor(cfg.jobs) if cfg.jobs > 1 else None
    try:
        mean, sigma, rows1 = _cem_phase(np.zeros(N_PARAMS), cfg.sigma0, cfg.phase1_generations, 1,
                                        GT_MODE, cfg, s1, pool)
        phase1_mean = mean
        sigma2 = max(cfg.sigma_floor, sigma * cfg.phase2_sigma_scale)
        mean, _, rows2 = _cem_phase(mean, sigma2, cfg.phase2_generations, 2, cfg.phase2_noise.mode(),
                                    cfg, s2, pool)
    finally:
        if pool is not None:
            pool.shutdown()
    policy = LearnablePolicy(mean)
    p1, p2, dep = observation_samples(cfg, policy)
    eps1, eps2 = mean_l1(p1, dep), mean_l1(p2, dep)
    rows = [r._replace(obs_epsilon=eps1) for r in rows1] + [r._replace(obs_epsilon=eps2) for r in rows2]
    return TrainResult(policy, LearnablePolicy(phase1_mean), rows, eps1, eps2,
                       check_curriculum_ordering(p1, p2, dep), bootstrap_ordering(p1, p2, dep))
