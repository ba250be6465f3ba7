"""Command-line front end: simulate, evaluate, verify-bounds, calibrate, gob-metrics, profile, plot.

Exit status: 0 on completion, 1 when verify-bounds finds a violation,
2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from deskdrive import bounds
from deskdrive.formats import ConfigError, fmt, read_csv, read_keyvalue, require, write_csv
from deskdrive.pam import (
    KMH,
    PLATFORMS,
    LongitudinalPlant,
    PlatformParams,
    StepSpec,
    calibrate_pid,
    limits_for,
    platform_text,
    read_platform,
)
from deskdrive.perception import SegNoiseModel
from deskdrive.pipeline import (
    GT_MODE,
    METRIC_NAMES,
    EpisodeConfig,
    EpisodeMetrics,
    PipelineMode,
    SafetyLimits,
    aggregate,
    observe,
    run_episode,
    write_events,
    write_latency,
    write_metrics,
    write_trajectory,
)
from deskdrive.plotting import PLOT_KINDS, default_svg_path, plot_csv
from deskdrive.policy import BUILTIN_POLICIES, load_policy
from deskdrive.worldsim import DYNAMICS_PRESETS, SCENARIOS, ScenarioSpec, build_scenario, read_scenario

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2
SELECTORS = ("gob", "pam", "tv", "curriculum", "composed", "all")


class UsageError(Exception):
    pass


# --- run configuration -----------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec
    platform: PlatformParams
    mode: PipelineMode
    policy: str
    seeds: tuple[int, ...]
    limits: SafetyLimits
    max_time: float | None
    plots: bool


def parse_seeds(text: str) -> tuple[int, ...]:
    """'0, 1, 2' or '0..4' (inclusive) or a mix."""
    seeds: list[int] = []
    try:
        for part in text.replace(",", " ").split():
            if ".." in part:
                a, b = part.split("..")
                seeds.extend(range(int(a), int(b) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"bad seed list: {text!r}") from None
    if not seeds:
        raise ConfigError("seed list is empty")
    return tuple(seeds)


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _flag(text: str) -> bool:
    return text.strip().lower() not in ("0", "false", "no", "off")


def parse_safety(section: dict[str, str], where: str) -> SafetyLimits:
    try:
        return SafetyLimits(
            v_limit=float(section.get("v_limit_kmh", 15.0)) * KMH,
            d_limit=float(section.get("d_limit", 0.8)),
            d_delta_max=float(section.get("d_delta_max", 0.1)),
            r_safe=float(section.get("r_safe", 3.0)),
            geofence_margin=float(section.get("geofence_margin", 10.0)),
            enabled=_flag(section.get("enabled", "1")),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    sections = read_keyvalue(path)
    base = path.parent
    run = sections.get("run")
    if run is None:
        raise ConfigError(f"{path}: missing [run] section")
    scen = run.get("scenario", "car_following")
    if scen in SCENARIOS:
        spec = ScenarioSpec(scen)
    else:
        scen_path = _resolve(base, scen)
        if not scen_path.is_file():
            raise ConfigError(f"{path}: scenario '{scen}' is neither a builtin nor a file")
        spec = read_scenario(scen_path)
    plat_name = run.get("platform", spec.platform)
    plat = read_platform(plat_name if plat_name in PLATFORMS else str(_resolve(base, plat_name)))

    mode_name = run.get("mode", "gt_bev")
    if mode_name == "gt_bev":
        if "noise" in sections:
            raise ConfigError(f"{path}: [noise] given but mode is gt_bev")
        mode = GT_MODE
    elif mode_name == "gob_bev":
        if "noise" not in sections:
            raise ConfigError(f"{path}: mode gob_bev needs a [noise] section (flip_rate, boundary_jitter, seed)")
        n = sections["noise"]
        try:
            noise = SegNoiseModel(require(n, "flip_rate", where="noise"),
                                  require(n, "boundary_jitter", int, where="noise"), int(n.get("seed", 0)))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        mode = PipelineMode("gob_bev", noise)
    else:
        raise ConfigError(f"{path}: unknown mode '{mode_name}' (gt_bev or gob_bev)")

    policy = run.get("policy", "tuned")
    if policy not in BUILTIN_POLICIES:
        pol_path = _resolve(base, policy)
        if not pol_path.is_file():
            raise ConfigError(f"{path}: policy '{policy}' is neither a builtin nor a file")
        policy = str(pol_path)
    if "seeds" in run:
        seeds = parse_seeds(run["seeds"])
    else:
        seeds = (0 if seed_override is None else seed_override,)

    safety = sections.get("safety", {})
    if "safety" in run:
        safety = read_keyvalue(_resolve(base, run["safety"])).get("safety", {})
    limits = parse_safety(safety, str(path))
    max_time = float(run["max_time"]) if "max_time" in run else None
    return RunConfig(spec, plat, mode, policy, seeds, limits, max_time, _flag(run.get("plots", "1")))


# --- simulate --------------------------------------------------------------

def _simulate_one(args) -> tuple[int, EpisodeMetrics]:
    cfg, seed, out = args
    spec = cfg.scenario
    world = replace(build_scenario(spec, seed), platform=cfg.platform)
    limits = limits_for(cfg.platform)
    policy = load_policy(cfg.policy, limits)
    ep = EpisodeConfig(mode=cfg.mode, limits=cfg.limits, action_limits=limits, max_time=cfg.max_time)
    res = run_episode(world, policy, ep, seed=seed)
    traj = out / f"trajectory_seed{seed}.csv"
    write_trajectory(traj, res)
    write_events(out / f"events_seed{seed}.csv", res.events)
    write_latency(out / f"latency_seed{seed}.csv", res.latency)
    if cfg.plots and res.trajectory:
        plot_csv(traj, "trajectory")
    return seed, res.metrics


def _pool_map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def cmd_simulate(args) -> int:
    if not args.config:
        raise UsageError("simulate needs --config")
    cfg = load_run_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _pool_map(_simulate_one, [(cfg, s, out) for s in cfg.seeds], args.jobs)
    write_metrics(out / "metrics.csv", results)
    for seed, m in results:
        print(f"seed {seed}: {m.outcome} RC={m.RC:.3f} AS={m.AS:.2f} km/h")
    return EXIT_OK


# --- evaluate --------------------------------------------------------------

def _read_metrics(path) -> list[EpisodeMetrics]:
    header, rows = read_csv(path)
    missing = [m for m in METRIC_NAMES if m not in header]
    if missing:
        raise ConfigError(f"{path}: missing metric columns {', '.join(missing)}")
    if not rows:
        raise ConfigError(f"{path}: no trials")
    try:
        return [EpisodeMetrics(*(float(r[m]) for m in METRIC_NAMES), r.get("outcome", "")) for r in rows]
    except ValueError:
        raise ConfigError(f"{path}: non-numeric metric value") from None


PR_HEADER = ("metric", "transfer_mean", "transfer_std", "reference_mean", "pr_percent")


def cmd_evaluate(args) -> int:
    transfer = _read_metrics(args.transfer)
    reference = _read_metrics(args.reference)
    summary = aggregate(transfer, reference)
    ref_means = {m: float(np.mean([getattr(t, m) for t in reference])) for m in METRIC_NAMES}
    rows = [(m, s.mean, s.std, ref_means[m], "" if s.pr is None else round(s.pr, 6)) for m, s in summary.items()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "pr.csv", PR_HEADER, rows)
    for m, tm, _, rm, pr in rows:
        print(f"{m:>3}: transfer {tm:.4g} reference {rm:.4g} PR {pr if pr == '' else f'{pr:.1f}%'}")
    return EXIT_OK


# --- verify-bounds ---------------------------------------------------------

def _suite_rows(name: str, args) -> list[bounds.BoundReport]:
    n = args.n
    plat = read_platform(args.platform)
    car = ScenarioSpec("car_following", route_length=40)
    if name == "tv":
        return bounds.tv_sweep(n or 200, args.seed)
    if name == "pam":
        return bounds.check_pam_bound(plat, args.v_max, args.horizon, args.eps_pid, n or 1000, args.seed)
    if name == "gob":
        worlds = bounds.scene_worlds(car, range(args.seed, args.seed + 2), every=10, horizon=5.0)
        streams = max(1, math.ceil((n or 200) / len(worlds)))
        policy = bounds.CellSumPolicy(1e-3)
        return bounds.gob_sweep(policy, worlds, args.flip_rates, streams, seed=args.seed)
    if name == "curriculum":
        from deskdrive.policy import reference_policy
        from deskdrive.training import CurriculumConfig, observation_samples

        cc = CurriculumConfig(scenario=car, scenario_seeds=tuple(range(args.seed, args.seed + 2)),
                              epsilon_samples=n or 12)
        return [bounds.check_curriculum_ordering(*observation_samples(cc, reference_policy()))]
    if name == "composed":
        from deskdrive.policy import reference_policy

        setup = bounds.ComposedSetup(car, reference_policy(), horizon=args.horizon)
        cache: dict = {}
        rows = []
        seeds = range(args.seed, args.seed + (n or 3))
        for knobs in bounds.default_knob_sweep(max(args.flip_rates), args.eps_pid):
            rows += bounds.composed_reports(bounds.check_composed_bound(setup, knobs, seeds, cache))
        return rows
    raise UsageError(f"unknown selector '{name}'")


def cmd_verify_bounds(args) -> int:
    if args.selector not in SELECTORS:
        raise UsageError(f"unknown selector '{args.selector}' (choose from {', '.join(SELECTORS)})")
    suites = SELECTORS[:-1] if args.selector == "all" else (args.selector,)
    rows: list[bounds.BoundReport] = []
    for s in suites:
        rows += _suite_rows(s, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bounds.write_report(out / "bounds.csv", rows)
    text = bounds.summarize(rows)
    (out / "bounds_summary.txt").write_text(text + "\n", encoding="utf-8")
    plot_csv(out / "bounds.csv", "bound_slack")
    print(text)
    return EXIT_VIOLATION if any(r.violated for r in rows) else EXIT_OK


# --- calibrate -------------------------------------------------------------

def cmd_calibrate(args) -> int:
    plat = read_platform(args.platform)
    if args.plant not in DYNAMICS_PRESETS:
        raise ConfigError(f"unknown plant preset '{args.plant}' (known: {', '.join(DYNAMICS_PRESETS)})")
    a_max, lag = DYNAMICS_PRESETS[args.plant]
    plant = LongitudinalPlant(args.v_target, a_max, lag, plat.e_max)
    spec = StepSpec(args.max_overshoot, args.settle_time)
    res = calibrate_pid(plant, args.v_target, plant.dt, spec)
    tuned = plat.with_gains(*res.gains)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = res.metrics
    header = (f"calibrated on plant '{args.plant}' for a step to {args.v_target:g} m/s",
              f"IAE {m.iae:.6g}; overshoot {m.overshoot:.4f}; settling {m.settling_time:.3f} s; "
              f"crossings {m.crossings}")
    text = platform_text(tuned, header)
    text += f"feasible = {int(res.feasible)}\n"
    if not res.feasible:
        text += f"warning = {'; '.join(res.violations)}\n"
    (out / "platform.ini").write_text(text, encoding="utf-8")
    t = np.arange(len(res.response)) * res.dt
    write_csv(out / "step_response.csv", ("t", "v"), zip(t.tolist(), res.response.tolist()))
    plot_csv(out / "step_response.csv", "speed_profile")
    gains = ", ".join(f"{k}={v:.4g}" for k, v in zip(("Kp", "Ki", "Kd"), res.gains))
    print(f"gains {gains}; feasible={res.feasible}")
    if not res.feasible:
        print("warning: step spec not met: " + "; ".join(res.violations), file=sys.stderr)
    return EXIT_OK


# --- gob-metrics -----------------------------------------------------------

def cmd_gob_metrics(args) -> int:
    """Ground-truth vs reconstructed BEV over the frames of one ground-truth drive."""
    from deskdrive.geometry import DEFAULT_GRID, DESK_CAMERA, in_view_cells
    from deskdrive.perception import write_frame_metrics
    from deskdrive.pipeline import gob_mode
    from deskdrive.classes import CHANNEL, SEG_CLASSES

    spec = ScenarioSpec(args.scenario, route_length=60)
    world = build_scenario(spec, args.seed)
    every = max(1, args.every)
    run = run_episode(world, load_policy("tuned"), EpisodeConfig(max_time=args.frames * every * 0.05),
                      seed=args.seed, record_every=every)
    worlds = run.worlds[:args.frames]
    mode = gob_mode(args.flip_rate, args.jitter, args.seed)
    view = in_view_cells(DESK_CAMERA, DEFAULT_GRID)
    xs, ys = DEFAULT_GRID.centers()
    view = view & (np.hypot(xs, ys) <= 16.0)
    seg = list(SEG_CLASSES)
    gt, gob = [], []
    for k, w in enumerate(worlds):
        a = observe(w, GT_MODE)
        # the camera cannot see outside its footprint, so compare inside it only
        a[..., seg] *= view[..., None]
        gt.append(a)
        gob.append(observe(w, mode, k))
    try:
        channels = [CHANNEL[c.strip()] for c in args.channels.split(",") if c.strip()]
    except KeyError as exc:
        raise ConfigError(f"unknown channel {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_frame_metrics(out / "gob_metrics.csv", gt, gob, channels)
    plot_csv(out / "gob_metrics.csv", "iou_timeline")
    print(f"{len(worlds)} frames, {len(channels)} channels -> {out / 'gob_metrics.csv'}")
    return EXIT_OK


# --- profile ---------------------------------------------------------------

def cmd_profile(args) -> int:
    from deskdrive.pipeline import DEADLINE_MS, gob_mode, latency_profile

    spec = ScenarioSpec(args.scenario, route_length=400)
    latency = latency_profile(args.cycles, gob_mode(args.flip_rate, args.jitter, args.seed), spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_latency(out / "latency.csv", latency)
    plot_csv(out / "latency.csv", "latency")
    totals = np.array([sum(l) for l in latency])
    misses = int(np.count_nonzero(totals > DEADLINE_MS))
    print(f"{len(totals)} cycles: median {np.median(totals):.2f} ms, p99 {np.percentile(totals, 99):.2f} ms, "
          f"max {totals.max():.2f} ms, deadline misses {misses} ({misses / len(totals):.4f})")
    return EXIT_OK


# --- plot ------------------------------------------------------------------

def cmd_plot(args) -> int:
    if args.kind not in PLOT_KINDS:
        raise UsageError(f"unknown plot kind '{args.kind}' (choose from {', '.join(PLOT_KINDS)})")
    target = None
    if args.out_given:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        target = out / default_svg_path(args.csv, args.kind).name
    print(plot_csv(args.csv, args.kind, target))
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value with [sections])")
    common.add_argument("--out", default=None, help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=0, help="base seed")
    common.add_argument("--jobs", "-j", type=int, default=1, help="worker processes")

    p = argparse.ArgumentParser(prog="deskdrive", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run one episode per configured seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", parents=[common], help="performance retention of transfer vs reference")
    s.add_argument("transfer")
    s.add_argument("reference")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("verify-bounds", parents=[common], help="run bound sweeps")
    s.add_argument("selector", help="|".join(SELECTORS))
    s.add_argument("--n", type=int, default=0, help="sweep size (suite default when 0)")
    s.add_argument("--platform", default="carla-default")
    s.add_argument("--v-max", type=float, default=15 * KMH, help="m/s")
    s.add_argument("--horizon", type=float, default=2.0, help="seconds")
    s.add_argument("--eps-pid", type=float, default=0.01, help="1/m")
    s.add_argument("--flip-rates", type=_float_list, default=[0.01, 0.05, 0.1])
    s.set_defaults(func=cmd_verify_bounds)

    s = sub.add_parser("calibrate", parents=[common], help="step-response PID gain search")
    s.add_argument("--platform", default="carla-default", help="preset name or platform file")
    s.add_argument("--plant", default="sim", help="|".join(DYNAMICS_PRESETS))
    s.add_argument("--v-target", type=float, default=3.0, help="m/s")
    s.add_argument("--settle-time", type=float, default=StepSpec.settle_time, help="seconds")
    s.add_argument("--max-overshoot", type=float, default=StepSpec.max_overshoot, help="fraction")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("gob-metrics", parents=[common], help="IoU of reconstructed vs ground-truth BEV")
    s.add_argument("--scenario", default="car_following", choices=SCENARIOS)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--every", type=int, default=5, help="cycles between frames")
    s.add_argument("--flip-rate", type=float, default=0.02)
    s.add_argument("--jitter", type=int, default=1)
    s.add_argument("--channels", default="road,lane_marking,vehicle,sidewalk")
    s.set_defaults(func=cmd_gob_metrics)

    s = sub.add_parser("profile", parents=[common], help="per-stage latency of a reconstructed-BEV run")
    s.add_argument("--scenario", default="car_following", choices=SCENARIOS)
    s.add_argument("--cycles", type=int, default=1000)
    s.add_argument("--flip-rate", type=float, default=0.02)
    s.add_argument("--jitter", type=int, default=1)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("plot", parents=[common], help="render a CSV artifact as SVG")
    s.add_argument("kind", help="|".join(PLOT_KINDS))
    s.add_argument("csv")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.out_given = args.out is not None
    if args.out is None:
        args.out = "out"
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deskdrive: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"deskdrive: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
