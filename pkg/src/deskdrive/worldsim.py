"""Deterministic 2-D kinematic driving world.

Every semantic query is quantized to the ego-aligned BEV lattice: the class at
any ground point is the class at the center of the lattice cell holding it.
Both the privileged BEV renderer and the front-view renderer read this one
field, so a camera fine enough to resolve the lattice reproduces the BEV
labels exactly through inverse perspective mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from deskdrive import dynamics
from deskdrive.classes import (
    CHANNEL,
    LANE_MARKING,
    OBSTACLE,
    ROAD,
    SIDEWALK,
    UNKNOWN,
    BevSemanticMap,
    SemanticImage,
)
from deskdrive.formats import ConfigError, read_keyvalue, require
from deskdrive.geometry import DEFAULT_GRID, BevGridSpec, CameraCalibration, backproject
from deskdrive.pam import PLATFORMS, PlatformParams, VehicleCommand, platform
from deskdrive.paths import Polyline, arc_route
from deskdrive.perception import encode

KMH = 1 / 3.6
STUCK_SPEED = 1 * KMH
STUCK_TIME = 90.0
DEPARTURE_LIMIT = 3.0
ROUTE_HALF_WIDTH = 1.0
HARD_SPEED_CAP = 20.0

# acceleration authority (m/s^2) and actuator lag (s) per plant preset
DYNAMICS_PRESETS = {
    "ideal": (dynamics.A_MAX, 0.0),
    "sim": (dynamics.A_MAX, dynamics.ACTUATOR_LAG),
    "real": (2.5, 0.35),
}


# --- entities --------------------------------------------------------------

ENTITY_KINDS = ("vehicle", "pedestrian", "cyclist", "motorcycle", "obstacle", "stop_sign", "traffic_light")
LIGHT_STATES = ("red", "yellow", "green")


@dataclass(frozen=True, eq=False)
class SpeedProfile:
    """Motion along a path at piecewise-constant speed.

    ``pieces`` holds (duration, speed) pairs; the last speed holds forever.
    Motion stops at the path end.
    """

    path: Polyline
    s0: float
    pieces: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.pieces:
            raise ValueError("speed profile needs at least one piece")
        if any(d < 0 or v < 0 for d, v in self.pieces):
            raise ValueError("durations and speeds must be nonnegative")

    def distance(self, t: float) -> float:
        s, left = 0.0, t
        for d, v in self.pieces[:-1]:
            if left <= d:
                return s + v * left
            s += v * d
            left -= d
        return s + self.pieces[-1][1] * left

    def speed(self, t: float) -> float:
        left = t
        for d, v in self.pieces[:-1]:
            if left < d:
                return v
            left -= d
        return self.pieces[-1][1]

    def pose(self, t: float) -> tuple[float, float, float]:
        s = min(self.path.total, self.s0 + self.distance(t))
        x, y = self.path.point_at(s)
        return float(x), float(y), float(self.path.heading_at(s))


@dataclass(frozen=True, eq=False)
class Entity:
    kind: str
    x: float
    y: float
    psi: float
    length: float
    width: float
    behavior: SpeedProfile | None = None
    light: str | None = None

    def __post_init__(self):
        if self.kind not in ENTITY_KINDS:
            raise ValueError(f"unknown entity kind '{self.kind}'")
        if not (self.length > 0 and self.width > 0):
            raise ValueError("entity footprint must have positive size")
        if self.kind == "traffic_light" and self.light not in LIGHT_STATES:
            raise ValueError("traffic lights need a state in red/yellow/green")

    @property
    def label(self) -> int:
        if self.kind == "traffic_light":
            return CHANNEL[f"traffic_light_{self.light}"]
        return CHANNEL[self.kind]

    def at(self, t: float) -> "Entity":
        if self.behavior is None:
            return self
        x, y, psi = self.behavior.pose(t)
        return replace(self, x=x, y=y, psi=psi)

    def corners(self) -> np.ndarray:
        return rect_corners(self.x, self.y, self.psi, -self.length / 2, self.length / 2, self.width / 2)

    def contains(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.psi), math.sin(self.psi)
        dx, dy = px - self.x, py - self.y
        return (np.abs(c * dx + s * dy) <= self.length / 2) & (np.abs(-s * dx + c * dy) <= self.width / 2)


def rect_corners(x: float, y: float, psi: float, back: float, front: float, half_w: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    local = np.array([[front, half_w], [front, -half_w], [back, -half_w], [back, half_w]])
    return np.column_stack([x + c * local[:, 0] - s * local[:, 1], y + s * local[:, 0] + c * local[:, 1]])


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals given by corners."""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        for ex, ey in edges:
            n = np.array([-ey, ex])
            pa, pb = a @ n, b @ n
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


# --- road ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RoadMap:
    """Straight-sided road around a reference lane centerline.

    Offsets are signed distances from the reference line, left positive. The
    reference lane spans [-w/2, w/2]; extra lanes stack outward on each side,
    markings sit on every lane boundary, sidewalks flank both road edges.
    """

    reference: Polyline
    lane_width: float = 3.5
    left_lanes: int = 1
    right_lanes: int = 0
    sidewalk_width: float = 2.0
    marking_width: float = 0.15
    # arc-length span of the planned route along the reference line
    route_span: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.lane_width > 0:
            raise ValueError("lane width must be positive")

    @property
    def right_edge(self) -> float:
        return -(0.5 + self.right_lanes) * self.lane_width

    @property
    def left_edge(self) -> float:
        return (0.5 + self.left_lanes) * self.lane_width

    @property
    def marking_offsets(self) -> tuple[float, ...]:
        n = self.left_lanes + self.right_lanes + 1
        return tuple(self.right_edge + k * self.lane_width for k in range(n + 1))

    @property
    def lane_center_offsets(self) -> tuple[float, ...]:
        n = self.left_lanes + self.right_lanes + 1
        return tuple(self.right_edge + (k + 0.5) * self.lane_width for k in range(n))

    @property
    def reach(self) -> float:
        """Farthest offset carrying any label."""
        return max(self.left_edge, -self.right_edge) + self.sidewalk_width

    def offset_polyline(self, offset: float) -> Polyline:
        pts = self.reference.points
        s = self.reference.cum_s
        psi = self.reference.heading_at(np.minimum(s, self.reference.total - 1e-9))
        return Polyline(pts + offset * np.column_stack([-np.sin(psi), np.cos(psi)]))

    def classify(self, off: np.ndarray, beyond: np.ndarray) -> np.ndarray:
        out = np.full(off.shape, UNKNOWN, dtype=np.uint8)
        sw = self.sidewalk_width
        out[(off > self.left_edge) & (off <= self.left_edge + sw)] = SIDEWALK
        out[(off < self.right_edge) & (off >= self.right_edge - sw)] = SIDEWALK
        out[(off >= self.right_edge) & (off <= self.left_edge)] = ROAD
        half = self.marking_width / 2
        for m in self.marking_offsets:
            out[np.abs(off - m) <= half] = LANE_MARKING
        out[beyond | ~np.isfinite(off)] = UNKNOWN
        return out

    def labels(self, x: np.ndarray, y: np.ndarray, segments: np.ndarray | None = None) -> np.ndarray:
        _, off, beyond = self.reference.project(x, y, segments)
        return self.classify(off, beyond)


# --- world -----------------------------------------------------------------

@dataclass(frozen=True)
class EgoState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v: float = 0.0
    delta: float = 0.0
    throttle: float = 0.0
    accel: float = 0.0


@dataclass(frozen=True)
class EgoBody:
    """Footprint relative to the reference point (rear axle, also the camera position)."""

    length: float = 4.5
    width: float = 2.0
    rear: float = 1.0

    @property
    def front(self) -> float:
        return self.length - self.rear


@dataclass(frozen=True, eq=False)
class World:
    ego: EgoState
    entities: tuple[Entity, ...] = ()
    map: RoadMap | None = None
    route: Polyline | None = None
    clock: float = 0.0
    platform: PlatformParams = PLATFORMS["carla-default"]
    actuator_lag: float = dynamics.ACTUATOR_LAG
    a_max: float = dynamics.A_MAX
    speed_cap: float = HARD_SPEED_CAP
    body: EgoBody = EgoBody()
    scenario: str = ""
    max_time: float = 60.0

    def ego_corners(self, ego: EgoState | None = None) -> np.ndarray:
        e = self.ego if ego is None else ego
        return rect_corners(e.x, e.y, e.psi, -self.body.rear, self.body.front, self.body.width / 2)

    def to_world(self, xe, ye):
        c, s = math.cos(self.ego.psi), math.sin(self.ego.psi)
        xe = np.asarray(xe, dtype=float)
        ye = np.asarray(ye, dtype=float)
        return self.ego.x + c * xe - s * ye, self.ego.y + s * xe + c * ye

    def to_ego(self, xw, yw):
        c, s = math.cos(self.ego.psi), math.sin(self.ego.psi)
        dx = np.asarray(xw, dtype=float) - self.ego.x
        dy = np.asarray(yw, dtype=float) - self.ego.y
        return c * dx + s * dy, -s * dx + c * dy


def step(world: World, cmd: VehicleCommand, dt: float = dynamics.DT) -> World:
    """Advance the world by ``dt``: steering slew, lagged acceleration, Euler kinematics."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u_delta, u_v = cmd
    if not (math.isfinite(u_delta) and math.isfinite(u_v)):
        raise ValueError(f"non-finite command {cmd}")
    if abs(u_delta) > 1 or abs(u_v) > 1:
        raise ValueError(f"command {cmd} outside [-1, 1]")
    e = world.ego
    p = world.platform
    x, y, psi = dynamics.bicycle_euler(e.x, e.y, e.psi, e.v, e.delta, dt, p.L)
    delta = float(dynamics.slew_steering(e.delta, u_delta, dt, p.delta_max))
    v, accel = dynamics.longitudinal(e.v, e.accel, u_v, dt, world.a_max, world.actuator_lag, world.speed_cap)
    ego = EgoState(float(x), float(y), float(psi), float(v), delta, float(u_v), float(accel))
    clock = world.clock + dt
    entities = tuple(ent.at(clock) for ent in world.entities)
    return replace(world, ego=ego, entities=entities, clock=clock)


# --- semantic field and renderers -----------------------------------------

def _field(world: World, xe: np.ndarray, ye: np.ndarray, radius: float | None,
           want_route: bool) -> tuple[np.ndarray, np.ndarray | None]:
    xe = np.asarray(xe, dtype=float)
    ye = np.asarray(ye, dtype=float)
    xw, yw = world.to_world(xe, ye)
    if radius is None:
        radius = float(np.sqrt(np.max(xe * xe + ye * ye))) if xe.size else 0.0
    route = None
    road = world.map
    if road is not None:
        segs = road.reference.segments_near(world.ego.x, world.ego.y, radius + road.reach + 1.0)
        s, off, beyond = road.reference.project(xw, yw, segs)
        out = road.classify(off, beyond)
        if want_route and road.route_span is not None:
            s0, s1 = road.route_span
            route = ((np.abs(off) <= ROUTE_HALF_WIDTH) & (s >= s0) & (s <= s1)).astype(np.uint8)
    else:
        out = np.full(xe.shape, UNKNOWN, dtype=np.uint8)
    if want_route and route is None:
        route = route_mask_at(world, xe, ye, radius)
    for ent in world.entities:
        if math.hypot(ent.x - world.ego.x, ent.y - world.ego.y) > radius + ent.length + ent.width:
            continue
        out[ent.contains(xw, yw)] = ent.label
    return out, route


def semantic_labels(world: World, xe: np.ndarray, ye: np.ndarray, radius: float | None = None) -> np.ndarray:
    """Ground classes at ego-frame points (callers pass lattice cell centers).

    ``radius`` bounds the query points' distance from the ego and only
    serves to skip far road segments and entities.
    """
    return _field(world, xe, ye, radius, False)[0]


def route_mask_at(world: World, xe: np.ndarray, ye: np.ndarray, radius: float) -> np.ndarray:
    """Cells within the route corridor, straight from the route polyline."""
    if world.route is None:
        return np.zeros(np.shape(xe), dtype=np.uint8)
    xw, yw = world.to_world(xe, ye)
    segs = world.route.segments_near(world.ego.x, world.ego.y, radius + ROUTE_HALF_WIDTH + 1.0)
    _, off, beyond = world.route.project(xw, yw, segs)
    return ((np.abs(off) <= ROUTE_HALF_WIDTH) & ~beyond).astype(np.uint8)


def ego_mask_at(world: World, xe: np.ndarray, ye: np.ndarray) -> np.ndarray:
    b = world.body
    return ((xe >= -b.rear) & (xe <= b.front) & (np.abs(ye) <= b.width / 2)).astype(np.uint8)


def gt_label_map(world: World, grid: BevGridSpec = DEFAULT_GRID) -> BevSemanticMap:
    xs, ys = grid.centers()
    radius = grid.extent / math.sqrt(2)
    return BevSemanticMap(semantic_labels(world, xs, ys, radius), grid)


def render_gt_bev(world: World, grid: BevGridSpec = DEFAULT_GRID) -> np.ndarray:
    """Privileged 14-channel BEV tensor with full 360-degree coverage."""
    xs, ys = grid.centers()
    radius = grid.extent / math.sqrt(2)
    labels, route = _field(world, xs, ys, radius, True)
    return encode(BevSemanticMap(labels, grid), route, ego_mask_at(world, xs, ys))


class _ViewTable(NamedTuple):
    pixels: np.ndarray  # flat indices of pixels whose ray meets the ground
    inverse: np.ndarray  # per such pixel, index into the unique cell list
    cell_x: np.ndarray
    cell_y: np.ndarray
    radius: float


_LATTICE_BIAS = 1 << 30


@lru_cache(maxsize=8)
def _view_table(calib: CameraCalibration, grid: BevGridSpec, max_range: float | None) -> _ViewTable:
    rows, cols = np.mgrid[0:calib.height, 0:calib.width]
    x, y, hit = backproject(cols.ravel(), rows.ravel(), calib)
    if max_range is not None:
        with np.errstate(invalid="ignore"):
            hit &= np.hypot(x, y) <= max_range
    pixels = np.flatnonzero(hit)
    li, lj = grid.lattice(x[pixels], y[pixels])
    key = ((li + _LATTICE_BIAS) << 31) + (lj + _LATTICE_BIAS)
    uniq, inverse = np.unique(key, return_inverse=True)
    ui = (uniq >> 31) - _LATTICE_BIAS
    uj = (uniq & ((1 << 31) - 1)) - _LATTICE_BIAS
    cx, cy = grid.lattice_center(ui, uj)
    radius = float(np.sqrt(np.max(cx * cx + cy * cy))) if cx.size else 0.0
    for a in (pixels, inverse, cx, cy):
        a.setflags(write=False)
    return _ViewTable(pixels, inverse.ravel(), cx, cy, radius)


def render_front_view(world: World, calib: CameraCalibration, grid: BevGridSpec = DEFAULT_GRID,
                      max_range: float | None = None) -> SemanticImage:
    """Synthetic ground-truth segmentation of the forward camera.

    Pixels at or above the horizon, or whose ground point lies beyond
    ``max_range`` meters, are unknown. Entities are flat footprints that
    override the ground classes beneath them.
    """
    table = _view_table(calib, grid, max_range)
    labels = np.full(calib.width * calib.height, UNKNOWN, dtype=np.uint8)
    if table.pixels.size:
        cells = semantic_labels(world, table.cell_x, table.cell_y, table.radius)
        labels[table.pixels] = cells[table.inverse]
    return SemanticImage(labels.reshape(calib.height, calib.width))


# --- termination -----------------------------------------------------------

class Termination(NamedTuple):
    kind: str  # collision | stuck | lane_departure
    time: float
    speed: float
    detail: str = ""


def route_deviation(world: World) -> float:
    """Unsigned cross-track distance from the ego reference point to the route."""
    if world.route is None:
        return 0.0
    segs = world.route.segments_near(world.ego.x, world.ego.y, 50.0)
    if len(segs) == 0:
        segs = None
    _, off, _ = world.route.project(np.array([world.ego.x]), np.array([world.ego.y]), segs)
    return float(abs(off[0]))


def collision(world: World) -> str | None:
    corners = world.ego_corners()
    reach = world.body.length + 1.0
    for ent in world.entities:
        if math.hypot(ent.x - world.ego.x, ent.y - world.ego.y) > reach + ent.length + ent.width:
            continue
        if rects_overlap(corners, ent.corners()):
            return ent.kind
    if world.map is not None:
        segs = world.map.reference.segments_near(world.ego.x, world.ego.y, reach + world.map.reach)
        _, off, beyond = world.map.reference.project(corners[:, 0], corners[:, 1], segs)
        if np.any(beyond | (off < world.map.right_edge) | (off > world.map.left_edge)):
            return "off_road"
    return None


def detect_termination(world: World, history: Sequence[tuple[float, float]] = (),
                       stuck_time: float = STUCK_TIME,
                       departure_limit: float = DEPARTURE_LIMIT) -> Termination | None:
    """Collision, lane departure, or a standstill longer than ``stuck_time``.

    ``history`` holds earlier (time, speed) samples, oldest first.
    """
    hit = collision(world)
    if hit is not None:
        return Termination("collision", world.clock, world.ego.v, hit)
    dev = route_deviation(world)
    if dev > departure_limit:
        return Termination("lane_departure", world.clock, world.ego.v, f"{dev:.3f} m")
    if world.ego.v < STUCK_SPEED:
        start = world.clock
        for t, v in reversed(history):
            if v >= STUCK_SPEED:
                break
            start = t
        if world.clock - start > stuck_time:
            return Termination("stuck", world.clock, world.ego.v, f"{world.clock - start:.2f} s")
    return None


# --- scenarios -------------------------------------------------------------

SCENARIOS = ("car_following", "obstacle_avoidance", "stop_sign")
ROAD_EXTENSION = 40.0


@dataclass(frozen=True, eq=False)
class EntityPlacement:
    """Entity position relative to the route: arc length ``s`` and lateral ``offset``."""

    kind: str
    s: float
    offset: float = 0.0
    length: float = 1.0
    width: float = 1.0
    heading: float = 0.0  # relative to the road direction
    pieces: tuple[tuple[float, float], ...] = ()  # moves along the road when set
    light: str | None = None


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    scenario: str
    route: tuple[tuple[float, float], ...] | None = None
    entities: tuple[EntityPlacement, ...] | None = None
    max_time: float | None = None
    platform: str = "carla-default"
    dynamics: str = "sim"
    seed: int = 0
    route_length: float = 50.0
    pedestrian: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario '{self.scenario}' (known: {', '.join(SCENARIOS)})")
        if self.route is not None and len(self.route) < 2:
            raise ValueError("route needs at least two points")
        if self.dynamics not in DYNAMICS_PRESETS:
            raise ValueError(f"unknown dynamics preset '{self.dynamics}'")


def random_route(length: float, rng: np.random.Generator, piece: float = 10.0) -> Polyline:
    """Gentle random route: a straight first chord, then runs of constant curvature (radius >= 50 m)."""
    n = max(1, int(math.ceil(length / piece)))
    curv = [0.0]
    while len(curv) < n:
        k = rng.uniform(-1 / 50, 1 / 50) if rng.random() < 0.7 else 0.0
        curv.extend([k] * int(rng.integers(2, 4)))
    return arc_route(length, curv[:n], piece)


def _place(p: EntityPlacement, road: Polyline, route_start: float) -> Entity:
    s = route_start + p.s
    x, y = road.point_at(s)
    psi = float(road.heading_at(s))
    x = float(x) - p.offset * math.sin(psi)
    y = float(y) + p.offset * math.cos(psi)
    behavior = None
    if p.pieces:
        path = Polyline(offset_points(road, p.offset)) if p.offset else road
        behavior = SpeedProfile(path, s, p.pieces)
    return Entity(p.kind, x, y, psi + p.heading, p.length, p.width, behavior, p.light)


def offset_points(line: Polyline, offset: float) -> np.ndarray:
    psi = line.heading_at(np.minimum(line.cum_s, line.total - 1e-9))
    return line.points + offset * np.column_stack([-np.sin(psi), np.cos(psi)])


def default_placements(scenario: str, rng: np.random.Generator, route: Polyline,
                       pedestrian: bool = True) -> tuple[list[EntityPlacement], list[Entity]]:
    """Seeded entity layout for each scenario. Returns (road-relative placements, free entities)."""
    if scenario == "car_following":
        pieces = tuple((float(rng.uniform(3, 6)), float(rng.uniform(2.0, 4.5))) for _ in range(8))
        return [EntityPlacement("vehicle", float(rng.uniform(15, 20)), 0.0, 4.5, 2.0, pieces=pieces)], []
    if scenario == "obstacle_avoidance":
        s = float(rng.uniform(22, 30))
        off = float(rng.uniform(-1.4, -0.9))
        return [EntityPlacement("obstacle", s, off, 1.0, 1.2)], []
    s = float(rng.uniform(25, 35))
    placements = [EntityPlacement("stop_sign", s, -2.6, 0.6, 0.6)]
    free = []
    if pedestrian:
        s_ped = s + 3.0
        x, y = route.point_at(s_ped)
        psi = float(route.heading_at(s_ped))
        nx, ny = -math.sin(psi), math.cos(psi)
        start = (float(x) - 3.0 * nx, float(y) - 3.0 * ny)
        end = (float(x) + 7.0 * nx, float(y) + 7.0 * ny)
        pieces = ((float(rng.uniform(2, 6)), 0.0), (1e9, 1.2))
        path = Polyline([start, end])
        free.append(Entity("pedestrian", start[0], start[1], psi + math.pi / 2, 0.5, 0.5,
                           SpeedProfile(path, 0.0, pieces)))
    return placements, free


def scenario_rng(scenario: str, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SCENARIOS.index(scenario)]))


def build_scenario(spec: ScenarioSpec, seed: int | None = None) -> World:
    seed = spec.seed if seed is None else seed
    rng = scenario_rng(spec.scenario, seed)
    route = Polyline(spec.route) if spec.route is not None else random_route(spec.route_length, rng)
    reference = route.extended(ROAD_EXTENSION, ROAD_EXTENSION)
    road = RoadMap(reference, route_span=(ROAD_EXTENSION, ROAD_EXTENSION + route.total))
    if spec.entities is None:
        placements, free = default_placements(spec.scenario, rng, route, spec.pedestrian)
    else:
        placements, free = list(spec.entities), []
    entities = tuple(_place(p, reference, ROAD_EXTENSION) for p in placements) + tuple(free)
    x0, y0 = route.points[0]
    ego = EgoState(float(x0), float(y0), float(route.heading_at(0.0)))
    a_max, lag = DYNAMICS_PRESETS[spec.dynamics]
    max_time = spec.max_time if spec.max_time is not None else route.total / 2.0 + 20.0
    return World(ego, entities, road, route, 0.0, platform(spec.platform), lag, a_max,
                 scenario=spec.scenario, max_time=max_time)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _pieces(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for item in text.split(","):
        if item.strip():
            d, v = item.split(":")
            out.append((float(d), float(v)))
    return tuple(out)


def parse_scenario(sections: dict[str, dict[str, str]], where: str = "scenario") -> ScenarioSpec:
    if "scenario" not in sections:
        raise ConfigError(f"{where}: missing [scenario] section")
    s = sections["scenario"]
    route = None
    if "route" in s:
        pts = [tuple(_floats(p)) for p in s["route"].split(";") if p.strip()]
        if any(len(p) != 2 for p in pts):
            raise ConfigError(f"{where}: route points must be 'x y' pairs separated by ';'")
        route = tuple(pts)
    entities = None
    ent_sections = sorted((k for k in sections if k.startswith("entity")), key=lambda k: (len(k), k))
    if ent_sections:
        entities = []
        for name in ent_sections:
            e = sections[name]
            entities.append(EntityPlacement(
                kind=e.get("kind", "obstacle"), s=require(e, "s", where=name),
                offset=float(e.get("offset", 0.0)), length=float(e.get("length", 1.0)),
                width=float(e.get("width", 1.0)), heading=math.radians(float(e.get("heading_deg", 0.0))),
                pieces=_pieces(e.get("speeds", "")), light=e.get("light"),
            ))
        entities = tuple(entities)
    try:
        return ScenarioSpec(
            scenario=s.get("id", ""), route=route, entities=entities,
            max_time=float(s["max_time"]) if "max_time" in s else None,
            platform=s.get("platform", "carla-default"), dynamics=s.get("dynamics", "sim"),
            seed=int(s.get("seed", 0)), route_length=float(s.get("route_length", 50.0)),
            pedestrian=s.get("pedestrian", "1").strip().lower() not in ("0", "false", "no"),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def read_scenario(path) -> ScenarioSpec:
    return parse_scenario(read_keyvalue(path), str(path))
