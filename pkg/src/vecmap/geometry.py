"""Polylines, SE(2) poses, Chamfer distance, resampling and rasterization.

Grid convention used throughout: ``grid[row, col]`` with rows along +y and
columns along +x.  Cell ``(r, c)`` has its center at
``(x_min + (c + 0.5) * res, y_min + (r + 0.5) * res)``.  For a window that is
symmetric about the origin with an even cell count, cell centers are
symmetric under a rotation by pi.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import shapely

from .errors import ConfigError, ContractError, DegenerateGeometryError


class Window(NamedTuple):
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    @property
    def half_extent(self) -> float:
        return 0.5 * max(self.x_max - self.x_min, self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def contains(self, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return ((pts[..., 0] >= self.x_min - tol) & (pts[..., 0] <= self.x_max + tol)
                & (pts[..., 1] >= self.y_min - tol) & (pts[..., 1] <= self.y_max + tol))


def grid_shape(window: Window, resolution: float) -> tuple[int, int]:
    h = (window.y_max - window.y_min) / resolution
    w = (window.x_max - window.x_min) / resolution
    if abs(h - round(h)) > 1e-9 or abs(w - round(w)) > 1e-9 or round(h) < 1 or round(w) < 1:
        raise ConfigError(f"window {tuple(window)} is not an integral number of {resolution} m cells")
    return int(round(h)), int(round(w))


def cell_centers(window: Window, resolution: float) -> np.ndarray:
    """Cell-center coordinates, shape [H, W, 2]."""
    h, w = grid_shape(window, resolution)
    xs = window.x_min + (np.arange(w) + 0.5) * resolution
    ys = window.y_min + (np.arange(h) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


@dataclass
class Polyline:
    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 2:
            raise ContractError(f"polyline needs at least 2 points, got {len(self.points)}")
        if not np.all(np.isfinite(self.points)):
            raise ContractError("polyline has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    def _ring(self) -> np.ndarray:
        return np.vstack([self.points, self.points[:1]]) if self.closed else self.points

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self._ring(), axis=0), axis=1).sum())

    def distance_to(self, pts: np.ndarray) -> np.ndarray:
        """Distance from each query point to the nearest point on the curve."""
        return _segment_distance(np.asarray(pts, dtype=float), self._ring())


@dataclass(frozen=True)
class Se2Pose:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def identity(cls) -> "Se2Pose":
        return cls(0.0, 0.0, 0.0)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation().T + np.array([self.x, self.y])

    def compose(self, other: "Se2Pose") -> "Se2Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Se2Pose(self.x + c * other.x - s * other.y,
                       self.y + s * other.x + c * other.y,
                       self.theta + other.theta)

    def inverse(self) -> "Se2Pose":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Se2Pose(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)

    def relative_to(self, other: "Se2Pose") -> "Se2Pose":
        """Pose of ``self`` expressed in the frame of ``other``."""
        return other.inverse().compose(self)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    t = math.fmod(float(theta), 2 * math.pi)
    if t <= -math.pi:
        t += 2 * math.pi
    elif t > math.pi:
        t -= 2 * math.pi
    return t


@dataclass
class RasterMask:
    grid: np.ndarray
    window: Window
    resolution: float

    def __post_init__(self):
        self.window = Window(*self.window)
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.shape != grid_shape(self.window, self.resolution):
            raise ContractError(f"grid shape {self.grid.shape} does not match window/resolution")


# ---------------------------------------------------------------- operations


def _cumulative(pts: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample(p: Polyline, n_points: int) -> Polyline:
    """Uniform arc-length resampling.

    Open curves keep both endpoints; closed curves are sampled at perimeter
    fractions 0, 1/n, ..., (n-1)/n starting from the first vertex.
    """
    if n_points < 2:
        raise ContractError(f"n_points must be >= 2, got {n_points}")
    ring = p._ring()
    cum = _cumulative(ring)
    total = cum[-1]
    if total <= 0.0:
        raise DegenerateGeometryError("cannot resample a zero-length polyline")
    if p.closed:
        targets = total * np.arange(n_points) / n_points
    else:
        targets = total * np.arange(n_points) / (n_points - 1)
    seg = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(ring) - 2)
    seg_len = cum[seg + 1] - cum[seg]
    frac = np.where(seg_len > 0, (targets - cum[seg]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    out = ring[seg] + frac[:, None] * (ring[seg + 1] - ring[seg])
    if not p.closed:
        out[0], out[-1] = ring[0], ring[-1]
    return Polyline(out, p.closed)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("chamfer distance needs two non-empty point sets")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def se2_apply(pose: Se2Pose, obj):
    """Rigid transform of a Polyline, a point array, a single point or a RasterMask.

    For a RasterMask the content is moved by ``pose`` over a fixed window:
    ``out(y) = in(pose^-1 y)`` with bilinear sampling and zero fill.
    """
    if isinstance(obj, Polyline):
        return Polyline(pose.apply(obj.points), obj.closed)
    if isinstance(obj, RasterMask):
        return RasterMask(warp_grid(obj.grid, obj.window, obj.resolution, pose.inverse()),
                          obj.window, obj.resolution)
    if isinstance(obj, tuple):
        return tuple(pose.apply(np.asarray(obj, dtype=float)).tolist())
    return pose.apply(obj)


def warp_grid(grid: np.ndarray, window: Window, resolution: float, source_pose: Se2Pose) -> np.ndarray:
    """Resample ``grid`` (or a stack [..., H, W]) by inverse mapping.

    Each destination cell center ``c`` reads the source at ``source_pose(c)``
    with bilinear interpolation; samples outside the source grid count as 0.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[-2:]
    centers = cell_centers(window, resolution).reshape(-1, 2)
    src = source_pose.apply(centers)
    fx = (src[:, 0] - window.x_min) / resolution - 0.5
    fy = (src[:, 1] - window.y_min) / resolution - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    tx = fx - x0
    ty = fy - y0
    flat = grid.reshape(-1, h * w)
    out = np.zeros((flat.shape[0], h * w))
    for dy, wy in ((0, 1.0 - ty), (1, ty)):
        for dx, wx in ((0, 1.0 - tx), (1, tx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = np.where(ok, wx * wy, 0.0)
            idx = np.where(ok, yi * w + xi, 0)
            out += flat[:, idx] * wgt
    return out.reshape(grid.shape)


def _segment_distance(pts: np.ndarray, verts: np.ndarray) -> np.ndarray:
    q = pts.reshape(-1, 2)
    best = np.full(len(q), np.inf)
    for a, b in zip(verts[:-1], verts[1:]):
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            d = np.linalg.norm(q - a, axis=1)
        else:
            t = np.clip(((q - a) @ ab) / denom, 0.0, 1.0)
            d = np.linalg.norm(q - (a + t[:, None] * ab), axis=1)
        best = np.minimum(best, d)
    return best.reshape(pts.shape[:-1])


def rasterize(p: Polyline, window: Window, resolution: float, thickness: float = 1.0) -> RasterMask:
    """Binary raster of a polyline.

    Open polylines: cells whose center lies within ``thickness / 2`` of the
    curve.  Closed polylines: cells whose center lies inside the polygon
    (boundary inclusive).
    """
    if thickness <= 0:
        raise ContractError(f"thickness must be positive, got {thickness}")
    window = Window(*window)
    centers = cell_centers(window, resolution)
    if p.closed:
        poly = shapely.Polygon(p.points)
        if not poly.is_valid:
            poly = poly.buffer(0)
        inside = shapely.intersects_xy(poly, centers[..., 0], centers[..., 1])
        grid = inside.astype(np.float64)
    else:
        d = p.distance_to(centers)
        grid = (d <= 0.5 * thickness + 1e-12).astype(np.float64)
    return RasterMask(grid, window, resolution)


def clip_to_window(p: Polyline, window: Window) -> Polyline | None:
    """Clip to the window; keeps the longest open piece or the largest polygon piece."""
    box = shapely.box(window.x_min, window.y_min, window.x_max, window.y_max)
    if p.closed:
        geom = shapely.Polygon(p.points).intersection(box)
        polys = [g for g in getattr(geom, "geoms", [geom]) if isinstance(g, shapely.Polygon) and not g.is_empty]
        if not polys:
            return None
        best = max(polys, key=lambda g: g.area)
        ring = shapely.geometry.polygon.orient(best, 1.0).exterior
        pts = np.asarray(ring.coords)[:-1]
        pts = _dedupe(pts)
        if len(pts) < 3:
            return None
        start = int(np.lexsort((pts[:, 1], pts[:, 0]))[0])
        return Polyline(np.roll(pts, -start, axis=0), closed=True)
    geom = shapely.LineString(p.points).intersection(box)
    lines = [g for g in getattr(geom, "geoms", [geom]) if isinstance(g, shapely.LineString) and not g.is_empty]
    if not lines:
        return None
    best = max(lines, key=lambda g: g.length)
    pts = _dedupe(np.asarray(best.coords))
    if len(pts) < 2:
        return None
    if (pts[-1, 0], pts[-1, 1]) < (pts[0, 0], pts[0, 1]):
        pts = pts[::-1]
    return Polyline(pts, closed=False)


def _dedupe(pts: np.ndarray) -> np.ndarray:
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9
    return pts[keep]
