"""Synthetic road scenarios standing in for a camera BEV encoder.

A scenario is a road (parallel lane lines along a constant-curvature path)
plus rectangular crossings, and an ego vehicle driving one lane at constant
speed and turn rate.  Each frame yields ego-frame ground truth and a noisy
feature grid whose class channels carry the ground-truth rasters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .geometry import (Polyline, RasterMask, Se2Pose, Window, clip_to_window, grid_shape,
                       rasterize, resample, se2_apply)

CLASSES = ("crossing", "divider", "boundary")
CROSSING, DIVIDER, BOUNDARY = 0, 1, 2
SCENARIO_FORMAT = "vecmap-scenario"
SCENARIO_VERSION = 1
MIN_CLIPPED_LENGTH = 2.0


@dataclass
class WorldConfig:
    n_frames: int = 10
    frame_dt: float = 0.5
    speed: float = 5.0
    turn_rate: float = 0.0
    n_lanes: int = 2
    lane_width_min: float = 3.0
    lane_width_max: float = 4.0
    n_crossings: int = 1
    crossing_depth: float = 4.0
    window: tuple = (-16.0, 16.0, -16.0, 16.0)
    resolution: float = 0.5
    n_points: int = 20
    thickness: float = 1.0
    channels: int = 32
    feature_noise: float = 0.1
    feature_dropout: float = 0.0
    empty: bool = False

    def validate(self) -> None:
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.n_lanes < 1:
            raise ConfigError("n_lanes must be >= 1")
        if self.n_crossings < 0:
            raise ConfigError("n_crossings must be >= 0")
        if not 0 < self.lane_width_min <= self.lane_width_max:
            raise ConfigError("lane widths must satisfy 0 < min <= max")
        if self.speed < 0 or self.frame_dt <= 0:
            raise ConfigError("speed must be >= 0 and frame_dt > 0")
        if self.crossing_depth <= 0:
            raise ConfigError("crossing_depth must be > 0")
        win = Window(*self.window)
        if win.x_max <= win.x_min or win.y_max <= win.y_min:
            raise ConfigError(f"degenerate window {self.window}")
        grid_shape(win, self.resolution)
        if self.n_points < 2:
            raise ConfigError("n_points must be >= 2")
        if self.channels < 3 or self.channels < 3 * max(1, self.channels // 8):
            raise ConfigError("channels too small for three class groups")
        if self.feature_noise < 0 or not 0 <= self.feature_dropout < 1:
            raise ConfigError("feature_noise must be >= 0 and feature_dropout in [0, 1)")


@dataclass
class MapInstance:
    instance_id: int
    cls: int
    polyline: Polyline


@dataclass
class Scenario:
    instances: list[MapInstance]
    ego_poses: list[Se2Pose]
    window: Window
    resolution: float
    n_points: int
    seed: int
    frame_dt: float = 0.5
    thickness: float = 1.0
    channels: int = 32
    feature_noise: float = 0.1
    feature_dropout: float = 0.0

    @property
    def n_frames(self) -> int:
        return len(self.ego_poses)


@dataclass
class BevGrid:
    features: np.ndarray  # [H, W, C]
    window: Window
    resolution: float

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape

    def tokens(self) -> np.ndarray:
        """Row-major flattening to [H*W, C]."""
        h, w, c = self.features.shape
        return self.features.reshape(h * w, c)


@dataclass
class GtInstance:
    instance_id: int
    cls: int
    polyline: Polyline


@dataclass
class FrameObservation:
    frame_index: int
    bev_features: BevGrid
    gt_instances: list[GtInstance]
    gt_masks: list[RasterMask]
    ego_motion_to_next: Se2Pose


# ---------------------------------------------------------------- generation


def _path(s: np.ndarray, curvature: float) -> tuple[np.ndarray, np.ndarray]:
    """Points and unit left-normals of a constant-curvature path starting at the origin."""
    if abs(curvature) < 1e-12:
        pts = np.stack([s, np.zeros_like(s)], axis=-1)
        normals = np.tile([0.0, 1.0], (len(s), 1))
        return pts, normals
    k = curvature
    pts = np.stack([np.sin(k * s) / k, (1.0 - np.cos(k * s)) / k], axis=-1)
    normals = np.stack([-np.sin(k * s), np.cos(k * s)], axis=-1)
    return pts, normals


def _ego_pose(t: float, speed: float, turn_rate: float) -> Se2Pose:
    th = turn_rate * t
    if abs(turn_rate) < 1e-12:
        return Se2Pose(speed * t, 0.0, 0.0)
    r = speed / turn_rate
    return Se2Pose(r * math.sin(th), r * (1.0 - math.cos(th)), th)


def generate_scenario(config: WorldConfig, seed: int) -> Scenario:
    """Deterministic road scenario for ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    win = Window(*config.window)
    lane_w = float(rng.uniform(config.lane_width_min, config.lane_width_max))
    ego_lane = int(rng.integers(config.n_lanes))
    poses = [_ego_pose(t * config.frame_dt, config.speed, config.turn_rate) for t in range(config.n_frames)]

    curvature = config.turn_rate / config.speed if config.speed > 0 else 0.0
    travel = config.speed * config.frame_dt * (config.n_frames - 1)
    reach = math.hypot(win.x_max - win.x_min, win.y_max - win.y_min)
    s = np.arange(-reach, travel + reach + 1e-9, 1.0)
    centre, normals = _path(s, curvature)

    offsets = [(k - ego_lane - 0.5) * lane_w for k in range(config.n_lanes + 1)]
    instances: list[MapInstance] = []
    if not config.empty:
        for k, d in enumerate(offsets):
            cls = BOUNDARY if k in (0, config.n_lanes) else DIVIDER
            instances.append(MapInstance(len(instances), cls, Polyline(centre + d * normals)))

        lo, hi = offsets[0], offsets[-1]
        span_lo, span_hi = -0.5 * (win.x_max - win.x_min) + 4.0, travel + 0.5 * (win.x_max - win.x_min) - 4.0
        placed: list[float] = []
        for _ in range(config.n_crossings):
            for _attempt in range(50):
                sc = float(rng.uniform(span_lo, span_hi))
                if all(abs(sc - p) > config.crossing_depth + 4.0 for p in placed):
                    placed.append(sc)
                    break
        for sc in sorted(placed):
            (c0,), (n0,) = _path(np.array([sc]), curvature)
            tangent = np.array([n0[1], -n0[0]])
            half = 0.5 * config.crossing_depth
            corners = np.array([c0 - half * tangent + lo * n0, c0 + half * tangent + lo * n0,
                                c0 + half * tangent + hi * n0, c0 - half * tangent + hi * n0])
            instances.append(MapInstance(len(instances), CROSSING, Polyline(corners, closed=True)))

    scenario = Scenario(instances, poses, win, config.resolution, config.n_points, int(seed),
                        config.frame_dt, config.thickness, config.channels,
                        config.feature_noise, config.feature_dropout)
    visible = set()
    for t in range(scenario.n_frames):
        visible.update(g.instance_id for g in _ego_instances(scenario, t))
    scenario.instances = [m for m in scenario.instances if m.instance_id in visible]
    return scenario


# ---------------------------------------------------------------- observation


def _ego_instances(s: Scenario, t: int) -> list[GtInstance]:
    to_ego = s.ego_poses[t].inverse()
    out = []
    for inst in s.instances:
        clipped = clip_to_window(se2_apply(to_ego, inst.polyline), s.window)
        if clipped is None or clipped.length() < MIN_CLIPPED_LENGTH:
            continue
        out.append(GtInstance(inst.instance_id, inst.cls, resample(clipped, s.n_points)))
    return out


def observe_frame(s: Scenario, t: int) -> FrameObservation:
    if not 0 <= t < s.n_frames:
        raise IndexError(f"frame {t} outside [0, {s.n_frames})")
    gts = _ego_instances(s, t)
    masks = [rasterize(g.polyline, s.window, s.resolution, s.thickness) for g in gts]
    bev = synth_bev_features(gts, masks, s.window, s.resolution, s.feature_noise, s.feature_dropout,
                             s.channels, seed=_frame_seed(s.seed, t))
    if t + 1 < s.n_frames:
        motion = s.ego_poses[t + 1].relative_to(s.ego_poses[t])
    else:
        motion = Se2Pose.identity()
    return FrameObservation(t, bev, gts, masks, motion)


def _frame_seed(seed: int, t: int) -> list[int]:
    return [int(seed) & 0xFFFFFFFF, 0x5EED, int(t)]


def class_groups(channels: int) -> list[range]:
    g = max(1, channels // 8)
    return [range(k * g, (k + 1) * g) for k in range(len(CLASSES))]


def synth_bev_features(gts: list[GtInstance], masks: list[RasterMask], window: Window, resolution: float,
                       noise: float, dropout: float, channels: int, seed, patch: int = 8) -> BevGrid:
    """Class channel groups carry the union of per-class GT rasters.

    Square patches of ``patch`` cells are dropped (class signal zeroed) with
    probability ``dropout``; Gaussian noise of std ``noise`` is then added to
    every channel.
    """
    if noise < 0 or not 0 <= dropout < 1:
        raise ConfigError("noise must be >= 0 and dropout in [0, 1)")
    h, w = grid_shape(Window(*window), resolution)
    rng = np.random.default_rng(seed)
    feats = np.zeros((h, w, channels))
    for k, group in enumerate(class_groups(channels)):
        union = np.zeros((h, w))
        for g, m in zip(gts, masks):
            if g.cls == k:
                union = np.maximum(union, m.grid)
        feats[:, :, group.start:group.stop] = union[:, :, None]
    ph, pw = -(-h // patch), -(-w // patch)
    drop = rng.random((ph, pw)) < dropout
    if drop.any():
        keep = ~np.kron(drop, np.ones((patch, patch), dtype=bool))[:h, :w]
        n_cls = class_groups(channels)[-1].stop
        feats[:, :, :n_cls] *= keep[:, :, None]
    if noise > 0:
        feats = feats + rng.normal(0.0, noise, size=feats.shape)
    return BevGrid(feats, Window(*window), resolution)


# ---------------------------------------------------------------- file format


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "format": SCENARIO_FORMAT,
        "version": SCENARIO_VERSION,
        "seed": s.seed,
        "window": list(s.window),
        "resolution": s.resolution,
        "n_points": s.n_points,
        "frame_dt": s.frame_dt,
        "thickness": s.thickness,
        "channels": s.channels,
        "feature_noise": s.feature_noise,
        "feature_dropout": s.feature_dropout,
        "ego_poses": [list(p.as_tuple()) for p in s.ego_poses],
        "instances": [{"id": m.instance_id, "class": CLASSES[m.cls], "closed": m.polyline.closed,
                       "points": m.polyline.points.tolist()} for m in s.instances],
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("format") != SCENARIO_FORMAT:
        raise FormatError(f"not a scenario document (format={d.get('format')!r})")
    if d.get("version") != SCENARIO_VERSION:
        raise FormatError(f"unsupported scenario version {d.get('version')!r}")
    instances = [MapInstance(int(m["id"]), CLASSES.index(m["class"]),
                             Polyline(np.array(m["points"], dtype=float), bool(m["closed"])))
                 for m in d["instances"]]
    return Scenario(instances, [Se2Pose(*p) for p in d["ego_poses"]], Window(*d["window"]),
                    float(d["resolution"]), int(d["n_points"]), int(d["seed"]), float(d["frame_dt"]),
                    float(d["thickness"]), int(d["channels"]), float(d["feature_noise"]),
                    float(d["feature_dropout"]))


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=1, sort_keys=True) + "\n"


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(s), encoding="utf-8")


def load_scenario(path: str | Path) -> Scenario:
    try:
        return scenario_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed scenario file ({exc})") from exc
