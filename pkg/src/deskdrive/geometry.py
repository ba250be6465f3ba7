"""Pinhole camera model and inverse perspective mapping onto the ground plane.

Frames:
  * ego: x forward, y left, z up; origin on the ground below the camera.
  * camera: x right, y down, z along the optical axis; mounted at (0, 0, h),
    pitched down by ``alpha`` then rolled by ``beta`` about the optical axis.
  * image: pixel (col, row) has its center at integer coordinates (u, v).

BEV grids put the ego at the crop center; row 0 is the far-forward edge and
column 0 the far-left edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from deskdrive.classes import UNKNOWN, BevSemanticMap, SemanticImage
from deskdrive.formats import ConfigError, format_keyvalue, read_keyvalue, require

_EPS = 1e-12


@dataclass(frozen=True)
class CameraCalibration:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    h: float
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.h > 0:
            raise ValueError("mounting height must be positive")
        if not (abs(self.alpha) < math.pi / 2 and abs(self.beta) < math.pi / 2):
            raise ValueError("pitch and roll must be within (-pi/2, pi/2)")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def rotation(self) -> np.ndarray:
        """Camera axes expressed in the ego frame, as columns (x_c, y_c, z_c)."""
        return _rotation(self.alpha, self.beta)

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float, h: float,
                 alpha: float = 0.0, beta: float = 0.0) -> "CameraCalibration":
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height, h, alpha, beta)


@lru_cache(maxsize=64)
def _rotation(alpha: float, beta: float) -> np.ndarray:
    ca, sa = math.cos(alpha), math.sin(alpha)
    x0 = np.array([0.0, -1.0, 0.0])
    y0 = np.array([-sa, 0.0, -ca])
    z = np.array([ca, 0.0, -sa])
    cb, sb = math.cos(beta), math.sin(beta)
    x = cb * x0 + sb * y0
    y = -sb * x0 + cb * y0
    R = np.column_stack([x, y, z])
    R.setflags(write=False)
    return R


# 110 deg horizontal field of view and 1.7 m mounting height, pitch 0.
DESK_CAMERA = CameraCalibration.from_fov(320, 240, 110.0, 1.7)


class GroundPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class BevGridSpec:
    extent: float = 20.0
    cells: int = 192

    def __post_init__(self):
        if not self.extent > 0 or self.cells <= 0:
            raise ValueError("grid extent and cell count must be positive")

    @property
    def cell_size(self) -> float:
        return self.extent / self.cells

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego-frame (x, y) of every cell center, each of shape (cells, cells)."""
        return _grid_centers(self)

    def lattice(self, x, y):
        """Integer lattice (row, col) of ego-frame points; unbounded beyond the crop."""
        half, s = self.extent / 2, self.cell_size
        return np.floor((half - np.asarray(x)) / s).astype(np.int64), \
            np.floor((half - np.asarray(y)) / s).astype(np.int64)

    def lattice_center(self, row, col):
        half, s = self.extent / 2, self.cell_size
        return half - (np.asarray(row) + 0.5) * s, half - (np.asarray(col) + 0.5) * s

    def cell_of(self, x: float, y: float) -> tuple[int, int] | None:
        i, j = self.lattice(x, y)
        i, j = int(i), int(j)
        if 0 <= i < self.cells and 0 <= j < self.cells:
            return i, j
        return None


@lru_cache(maxsize=16)
def _grid_centers(grid: BevGridSpec) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(grid.cells)
    rows, cols = np.meshgrid(idx, idx, indexing="ij")
    x, y = grid.lattice_center(rows, cols)
    x.setflags(write=False)
    y.setflags(write=False)
    return x, y


DEFAULT_GRID = BevGridSpec()


def project_ground(x, y, calib: CameraCalibration):
    """Vectorized ground-plane projection. Returns (u, v, in_view)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    R = calib.rotation
    dz = -calib.h
    xc = R[0, 0] * x + R[1, 0] * y + R[2, 0] * dz
    yc = R[0, 1] * x + R[1, 1] * y + R[2, 1] * dz
    zc = R[0, 2] * x + R[1, 2] * y + R[2, 2] * dz
    front = zc > _EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, calib.cx + calib.fx * xc / np.where(front, zc, 1.0), np.nan)
        v = np.where(front, calib.cy + calib.fy * yc / np.where(front, zc, 1.0), np.nan)
    in_view = front & (u >= -0.5) & (u < calib.width - 0.5) & (v >= -0.5) & (v < calib.height - 0.5)
    return u, v, in_view


def backproject(u, v, calib: CameraCalibration):
    """Vectorized ray cast of pixel coordinates onto z = 0. Returns (x, y, hits_ground)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    R = calib.rotation
    a = (u - calib.cx) / calib.fx
    b = (v - calib.cy) / calib.fy
    dx = R[0, 0] * a + R[0, 1] * b + R[0, 2]
    dy = R[1, 0] * a + R[1, 1] * b + R[1, 2]
    dz = R[2, 0] * a + R[2, 1] * b + R[2, 2]
    hit = dz < -_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(hit, -calib.h / np.where(hit, dz, -1.0), np.nan)
    return t * dx, t * dy, hit


def ground_to_pixel(p: GroundPoint, calib: CameraCalibration) -> tuple[float, float] | None:
    """Pixel coordinate of a ground point, or None when it is out of view."""
    u, v, ok = project_ground(p[0], p[1], calib)
    if not ok:
        return None
    return float(u), float(v)


def pixel_to_ground(u: float, v: float, calib: CameraCalibration) -> GroundPoint | None:
    """Ground point seen through pixel coordinate (u, v), or None at/above the horizon."""
    x, y, ok = backproject(u, v, calib)
    if not ok:
        return None
    return GroundPoint(float(x), float(y))


@lru_cache(maxsize=16)
def _ipm_lookup(calib: CameraCalibration, grid: BevGridSpec) -> np.ndarray:
    # flat pixel index sampled by every cell, -1 when out of view
    x, y = grid.centers()
    u, v, ok = project_ground(x, y, calib)
    col = np.floor(np.where(ok, u, 0.0) + 0.5).astype(np.int64)
    row = np.floor(np.where(ok, v, 0.0) + 0.5).astype(np.int64)
    idx = np.where(ok, row * calib.width + col, -1)
    idx.setflags(write=False)
    return idx


def in_view_cells(calib: CameraCalibration, grid: BevGridSpec = DEFAULT_GRID) -> np.ndarray:
    """Boolean (cells, cells) mask of cells whose center projects into the image."""
    return _ipm_lookup(calib, grid) >= 0


def ipm_project(seg: SemanticImage, calib: CameraCalibration,
                grid: BevGridSpec = DEFAULT_GRID) -> BevSemanticMap:
    """Resample a front-view label image onto the BEV grid (nearest pixel per cell center)."""
    if seg.width != calib.width or seg.height != calib.height:
        raise ValueError(
            f"image is {seg.width}x{seg.height} but calibration expects {calib.width}x{calib.height}"
        )
    idx = _ipm_lookup(calib, grid)
    flat = seg.labels.reshape(-1)
    labels = np.where(idx >= 0, flat[np.maximum(idx, 0)], UNKNOWN).astype(np.uint8)
    return BevSemanticMap(labels, grid)


def resolves_lattice(calib: CameraCalibration, grid: BevGridSpec = DEFAULT_GRID) -> bool:
    """True when every in-view cell is sampled by a pixel whose own ray lands in that cell.

    Under this condition IPM of a frame rendered from a cell-quantized ground
    reproduces the ground labels cell-exactly.
    """
    idx = _ipm_lookup(calib, grid)
    ok = idx >= 0
    rows, cols = np.nonzero(ok)
    pix = idx[ok]
    x, y, hit = backproject(pix % calib.width, pix // calib.width, calib)
    ri, ci = grid.lattice(x, y)
    return bool(np.all(hit & (ri == rows) & (ci == cols)))


CALIBRATION_HEADER = (
    "camera calibration",
    "fx, fy: focal lengths (pixels); cx, cy: principal point (pixels)",
    "width, height: image size (pixels); h: mounting height (meters)",
    "alpha: pitch, positive tilts down (radians); beta: roll (radians)",
)


def read_calibration(path) -> CameraCalibration:
    section = read_keyvalue(path).get("", {})
    try:
        return CameraCalibration(
            fx=require(section, "fx"), fy=require(section, "fy"),
            cx=require(section, "cx"), cy=require(section, "cy"),
            width=require(section, "width", int), height=require(section, "height", int),
            h=require(section, "h"),
            alpha=float(section.get("alpha", 0.0)), beta=float(section.get("beta", 0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_calibration(path, calib: CameraCalibration) -> None:
    values = {k: getattr(calib, k) for k in ("fx", "fy", "cx", "cy", "width", "height", "h", "alpha", "beta")}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_keyvalue(values, CALIBRATION_HEADER))
