"""Semantic class table and the label containers shared by every module.

Channel order is fixed; the BEV tensor's channel ``c`` is the occupancy mask
of class ``c``. ``UNKNOWN`` marks pixels or cells that carry no semantic
information (sky, out-of-view, off-map terrain) and never maps to a channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHANNELS = (
    "road",
    "lane_marking",
    "vehicle",
    "pedestrian",
    "cyclist",
    "motorcycle",
    "sidewalk",
    "traffic_light_red",
    "traffic_light_yellow",
    "traffic_light_green",
    "stop_sign",
    "obstacle",
    "route",
    "ego",
)
N_CHANNELS = len(CHANNELS)
CHANNEL = {name: i for i, name in enumerate(CHANNELS)}

ROAD = CHANNEL["road"]
LANE_MARKING = CHANNEL["lane_marking"]
VEHICLE = CHANNEL["vehicle"]
PEDESTRIAN = CHANNEL["pedestrian"]
CYCLIST = CHANNEL["cyclist"]
MOTORCYCLE = CHANNEL["motorcycle"]
SIDEWALK = CHANNEL["sidewalk"]
STOP_SIGN = CHANNEL["stop_sign"]
OBSTACLE = CHANNEL["obstacle"]
ROUTE = CHANNEL["route"]
EGO = CHANNEL["ego"]

UNKNOWN = 255

# Classes a front-view segmenter can emit. Route and ego are side inputs.
SEG_CLASSES = tuple(range(12))
# Classes painted on the ground plane, i.e. recoverable through IPM.
GROUND_VISIBLE = SEG_CLASSES
HAZARD_CHANNELS = (VEHICLE, PEDESTRIAN, CYCLIST, MOTORCYCLE, OBSTACLE)

_VALID = np.zeros(256, dtype=bool)
_VALID[list(range(N_CHANNELS))] = True
_VALID[UNKNOWN] = True


def check_labels(labels: np.ndarray) -> None:
    if labels.ndim != 2:
        raise ValueError(f"label array must be 2-D, got shape {labels.shape}")
    if labels.dtype != np.uint8:
        raise ValueError(f"label array must be uint8, got {labels.dtype}")
    if not _VALID[labels].all():
        raise ValueError("label array holds ids outside 0..13 and UNKNOWN")


@dataclass(frozen=True, eq=False)
class SemanticImage:
    """Per-pixel class ids of a front-view frame, shape (height, width)."""

    labels: np.ndarray

    def __post_init__(self):
        check_labels(self.labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @classmethod
    def blank(cls, width: int, height: int) -> "SemanticImage":
        return cls(np.full((height, width), UNKNOWN, dtype=np.uint8))


@dataclass(frozen=True, eq=False)
class BevSemanticMap:
    """Per-cell class ids of a metric BEV crop, shape (cells, cells).

    Row 0 is the far-forward edge; column 0 is the far-left edge.
    """

    labels: np.ndarray
    grid: "BevGridSpec"  # noqa: F821 - defined in geometry

    def __post_init__(self):
        check_labels(self.labels)
        if self.labels.shape != (self.grid.cells, self.grid.cells):
            raise ValueError(
                f"map shape {self.labels.shape} does not match grid of {self.grid.cells} cells"
            )
