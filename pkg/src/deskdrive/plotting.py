"""SVG figures from the CSV artifacts. Output is byte-stable for a given input."""

from __future__ import annotations

from pathlib import Path
from typing import Callable

import matplotlib

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

from deskdrive.formats import ConfigError, read_csv  # noqa: E402

PLOT_KINDS = ("trajectory", "speed_profile", "steering_profile", "latency", "bound_slack", "iou_timeline")
DEADLINE_MS = 50.0
_RC = {"svg.hashsalt": "deskdrive", "svg.fonttype": "none", "path.simplify": False}


def _columns(rows: list[dict[str, str]], header: list[str], names, where: str) -> dict[str, list[float]]:
    missing = [n for n in names if n not in header]
    if missing:
        raise ConfigError(f"{where}: missing columns {', '.join(missing)}")
    out = {}
    for n in names:
        try:
            out[n] = [float(r[n]) if r[n] != "" else float("nan") for r in rows]
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: non-numeric value in column {n}") from None
    return out


def _trajectory(ax, header, rows, where):
    c = _columns(rows, header, ("x", "y"), where)
    ax.plot(c["x"], c["y"], color="tab:blue", lw=1.2, label="path")
    events = [(float(r["x"]), float(r["y"]), r.get("event", "")) for r in rows if r.get("event")]
    if events:
        ax.scatter([e[0] for e in events], [e[1] for e in events], marker="x", color="tab:red",
                   zorder=3, label="events")
    ax.plot(c["x"][:1], c["y"][:1], "o", color="tab:green", label="start")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(loc="best")


def _speed(ax, header, rows, where):
    c = _columns(rows, header, ("t", "v"), where)
    ax.plot(c["t"], [v * 3.6 for v in c["v"]], color="tab:blue")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("speed (km/h)")


def _steering(ax, header, rows, where):
    c = _columns(rows, header, ("t", "delta", "u_delta"), where)
    ax.plot(c["t"], c["delta"], label="wheel angle (rad)")
    ax.plot(c["t"], c["u_delta"], label="command (normalized)", ls="--")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("steering (rad | normalized)")
    ax.legend(loc="best")


def _latency(ax, header, rows, where):
    stages = [h for h in header if h.endswith("_ms") and h != "total_ms"]
    if not stages:
        raise ConfigError(f"{where}: no per-stage latency columns")
    c = _columns(rows, header, ["cycle"] + stages, where)
    bottom = [0.0] * len(rows)
    for s in stages:
        ax.bar(c["cycle"], c[s], bottom=bottom, width=1.0, label=s[:-3])
        bottom = [b + v for b, v in zip(bottom, c[s])]
    ax.axhline(DEADLINE_MS, color="tab:red", ls="--", label="50 ms budget")
    ax.set_xlabel("cycle")
    ax.set_ylabel("latency (ms)")
    ax.legend(loc="upper right", fontsize="small")


def _slack(ax, header, rows, where):
    c = _columns(rows, header, ("slack",), where)
    if "violated" not in header:
        raise ConfigError(f"{where}: missing column violated")
    bad = [r["violated"] in ("1", "True", "true") for r in rows]
    idx = range(len(rows))
    ax.bar(idx, c["slack"], color=["tab:red" if b else "tab:green" for b in bad], width=0.8)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xlabel("report row")
    ax.set_ylabel("slack (bound - measured, check units)")


def _iou(ax, header, rows, where):
    c = _columns(rows, header, ("frame", "channel", "iou"), where)
    series: dict[int, tuple[list, list]] = {}
    for f, ch, v in zip(c["frame"], c["channel"], c["iou"]):
        xs, ys = series.setdefault(int(ch), ([], []))
        xs.append(f)
        ys.append(v)
    for ch in sorted(series):
        ax.plot(*series[ch], marker=".", label=f"channel {ch}")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("frame")
    ax.set_ylabel("IoU (fraction)")
    ax.legend(loc="best", fontsize="x-small", ncol=2)


_KINDS: dict[str, Callable] = {
    "trajectory": _trajectory, "speed_profile": _speed, "steering_profile": _steering,
    "latency": _latency, "bound_slack": _slack, "iou_timeline": _iou,
}


def default_svg_path(csv_path, kind: str) -> Path:
    """Next to the CSV; the kind is appended unless the file name already carries it."""
    p = Path(csv_path)
    stem = p.stem if kind.split("_")[0] in p.stem else f"{p.stem}_{kind}"
    return p.with_name(stem + ".svg")


def plot_csv(csv_path, kind: str, svg_path=None) -> Path:
    """Render ``csv_path`` as an SVG of the given kind. Returns the SVG path."""
    if kind not in _KINDS:
        raise ConfigError(f"unknown plot kind '{kind}' (known: {', '.join(PLOT_KINDS)})")
    header, rows = read_csv(csv_path)
    if not rows:
        raise ConfigError(f"{csv_path}: no data rows")
    svg_path = Path(svg_path) if svg_path is not None else default_svg_path(csv_path, kind)
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(6.4, 4.8))
        ax = fig.add_subplot()
        _KINDS[kind](ax, header, rows, str(csv_path))
        ax.set_title(f"{kind.replace('_', ' ')}: {Path(csv_path).name}")
        ax.grid(True, lw=0.3)
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
    return svg_path
