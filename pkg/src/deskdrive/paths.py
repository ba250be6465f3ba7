"""Planar polylines with arc-length parametrization and vectorized nearest-point queries."""

from __future__ import annotations

import math

import numpy as np


class Polyline:
    """An open polyline in the world frame. Immutable after construction."""

    __slots__ = ("points", "_a", "_d", "_len", "_unit", "_bis", "_smooth", "cum_s", "total")

    def __init__(self, points):
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("a polyline needs at least two (x, y) points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline points must be finite")
        d = np.diff(pts, axis=0)
        seg_len = np.hypot(d[:, 0], d[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("consecutive polyline points must be distinct")
        pts.setflags(write=False)
        self.points = pts
        self._a = pts[:-1]
        self._d = d
        self._len = seg_len
        self._unit = d / seg_len[:, None]
        self.cum_s = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.total = float(self.cum_s[-1])
        # boundary between segments i-1 and i: line through vertex i along the
        # bisector, i.e. normal to the mean of the two tangents
        mean = self._unit[:-1] + self._unit[1:]
        norm = np.hypot(mean[:, 0], mean[:, 1])
        self._smooth = bool(np.all(norm > 2 * math.cos(math.radians(45))))
        self._bis = mean / np.where(norm > 0, norm, 1.0)[:, None]

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        return isinstance(other, Polyline) and np.array_equal(self.points, other.points)

    __hash__ = None

    def segments_near(self, x: float, y: float, radius: float) -> np.ndarray:
        """Indices of segments passing within ``radius`` of (x, y)."""
        p = np.array([x, y]) - self._a
        t = np.clip(np.einsum("ij,ij->i", p, self._d) / self._len**2, 0.0, 1.0)
        gap = p - t[:, None] * self._d
        return np.nonzero(np.einsum("ij,ij->i", gap, gap) <= radius * radius)[0]

    def project(self, x, y, segments: np.ndarray | None = None):
        """Nearest-point query.

        Returns (s, offset, beyond) arrays: arc length of the nearest point,
        signed distance (left of travel positive), and whether the query point
        lies before the start or past the end of the polyline.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        idx = np.arange(len(self._len)) if segments is None else np.asarray(segments)
        shape = x.shape
        if len(idx) == 0:
            nan = np.full(shape, np.nan)
            return nan, nan, np.ones(shape, dtype=bool)
        xf = x.reshape(-1)
        yf = y.reshape(-1)
        if self._smooth:
            seg = self._bisector_segments(xf, yf, int(idx.min()), int(idx.max()))
        else:
            seg = self._nearest_segments(xf, yf, idx)
        px = xf - self._a[seg, 0]
        py = yf - self._a[seg, 1]
        dx, dy = self._d[seg, 0], self._d[seg, 1]
        t_raw = (px * dx + py * dy) / self._len[seg] ** 2
        t = np.clip(t_raw, 0.0, 1.0)
        gx = px - t * dx
        gy = py - t * dy
        cross = self._unit[seg, 0] * gy - self._unit[seg, 1] * gx
        dist = np.sqrt(gx * gx + gy * gy)
        offset = np.where(cross < 0, -dist, dist)
        s = self.cum_s[seg] + t * self._len[seg]
        last = len(self._len) - 1
        beyond = ((seg == 0) & (t_raw < 0)) | ((seg == last) & (t_raw > 1))
        return s.reshape(shape), offset.reshape(shape), beyond.reshape(shape)

    def _bisector_segments(self, x: np.ndarray, y: np.ndarray, lo: int, hi: int) -> np.ndarray:
        """Segment index by counting vertex bisectors passed, over segments lo..hi.

        Exact nearest-segment assignment for points closer to the line than
        where neighboring bisectors meet (about chord / turn angle), which
        covers the road band of any polyline turning under 45 degrees per vertex.
        """
        seg = np.full(x.shape, lo, dtype=np.intp)
        for i in range(lo + 1, hi + 1):
            vx, vy = self.points[i]
            nx, ny = self._bis[i - 1]
            seg += (x - vx) * nx + (y - vy) * ny >= 0
        return seg

    def _nearest_segments(self, x: np.ndarray, y: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Brute-force nearest segment among ``idx``."""
        best = np.full(x.shape, np.inf)
        k = np.zeros(x.shape, dtype=np.intp)
        for j, i in enumerate(idx):
            ax, ay = self._a[i]
            dx, dy = self._d[i]
            px = x - ax
            py = y - ay
            t = np.clip((px * dx + py * dy) * (1.0 / self._len[i] ** 2), 0.0, 1.0)
            px -= t * dx
            py -= t * dy
            d2 = px * px + py * py
            closer = d2 < best
            best = np.where(closer, d2, best)
            k[closer] = j
        return np.asarray(idx)[k]

    def locate(self, x: float, y: float) -> tuple[float, float]:
        """Scalar (s, offset) of the nearest point."""
        s, off, _ = self.project(np.array([x]), np.array([y]))
        return float(s[0]), float(off[0])

    def point_at(self, s):
        """World point at arc length ``s`` (clamped to the polyline)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.total)
        seg = np.clip(np.searchsorted(self.cum_s, s, side="right") - 1, 0, len(self._len) - 1)
        t = (s - self.cum_s[seg]) / self._len[seg]
        xy = self._a[seg] + t[..., None] * self._d[seg]
        return xy[..., 0], xy[..., 1]

    def heading_at(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.total)
        seg = np.clip(np.searchsorted(self.cum_s, s, side="right") - 1, 0, len(self._len) - 1)
        return np.arctan2(self._unit[seg, 1], self._unit[seg, 0])

    def extended(self, before: float, after: float) -> "Polyline":
        """Straight extensions of the first and last segments."""
        pts = [self.points[0] - self._unit[0] * before] if before > 0 else []
        pts.extend(self.points)
        if after > 0:
            pts.append(self.points[-1] + self._unit[-1] * after)
        return Polyline(np.array(pts))


def arc_route(length: float, curvatures, piece: float = 10.0, x0: float = 0.0, y0: float = 0.0,
              psi0: float = 0.0) -> Polyline:
    """Polyline of ``piece``-meter chords following piecewise-constant curvature.

    ``curvatures`` gives one curvature per chord; the last value repeats.
    """
    n = max(1, int(math.ceil(length / piece - 1e-9)))
    pts = [(x0, y0)]
    x, y, psi = x0, y0, psi0
    curv = list(curvatures) or [0.0]
    for i in range(n):
        step = min(piece, length - i * piece)
        k = curv[min(i, len(curv) - 1)]
        # chord of an arc: heading at the chord midpoint
        mid = psi + k * step / 2
        x += step * math.cos(mid)
        y += step * math.sin(mid)
        psi += k * step
        pts.append((x, y))
    return Polyline(pts)
