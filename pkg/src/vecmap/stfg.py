"""Short-term future guidance: next-frame polyline offsets from a track's recent past."""
from __future__ import annotations

from collections import deque

import numpy as np

from . import tensor as T
from .encoding import encode_points
from .errors import ContractError
from .geometry import Se2Pose, chamfer
from .tensor import ParameterStore, Tensor

HISTORY_FRAMES = 4


class TrajectoryHistory:
    """Per-track ring buffers of the last ``capacity`` ego-frame polylines."""

    def __init__(self, capacity: int = HISTORY_FRAMES):
        if capacity < 1:
            raise ContractError("history capacity must be >= 1")
        self.capacity = capacity
        self.buffers: dict[int, deque] = {}

    def __contains__(self, track_id: int) -> bool:
        return track_id in self.buffers

    def ids(self) -> set[int]:
        return set(self.buffers)

    def push(self, track_id: int, frame_index: int, points: np.ndarray) -> None:
        buf = self.buffers.setdefault(track_id, deque(maxlen=self.capacity))
        if buf and frame_index != buf[-1][0] + 1:
            raise ContractError(f"track {track_id}: frame {frame_index} does not follow {buf[-1][0]}")
        buf.append((frame_index, np.array(points, dtype=np.float64)))

    def reframe(self, ego_motion: Se2Pose) -> None:
        """Re-express stored polylines in the next ego frame (``ego_motion`` = next pose in current frame)."""
        if ego_motion == Se2Pose.identity():
            return
        to_next = ego_motion.inverse()
        for buf in self.buffers.values():
            for i, (t, pts) in enumerate(buf):
                buf[i] = (t, to_next.apply(pts))

    def prune(self, live_track_ids) -> int:
        live = set(live_track_ids)
        dead = [i for i in self.buffers if i not in live]
        for i in dead:
            del self.buffers[i]
        return len(dead)

    def frames(self, track_id: int) -> list[int]:
        return [t for t, _ in self.buffers[track_id]]

    def stack(self, track_id: int, n: int | None = None) -> np.ndarray:
        """The last ``n`` polylines, oldest first, left-padded with the oldest one -> [n, N_p, 2]."""
        n = self.capacity if n is None else n
        buf = self.buffers.get(track_id)
        if not buf:
            raise ContractError(f"track {track_id} has no history")
        return pad_history([p for _, p in buf], n)


def pad_history(polylines: list[np.ndarray], n: int) -> np.ndarray:
    if not polylines:
        raise ContractError("empty history")
    polylines = list(polylines)[-n:]
    polylines = [polylines[0]] * (n - len(polylines)) + polylines
    return np.stack(polylines)


def init_params(store: ParameterStore, n_history: int, n_points: int, channels: int, hidden: int = 128) -> None:
    dims = [n_history * n_points * 2, hidden, hidden, n_points * 2]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        store.create(f"stfg.mlp{i}.w", (a, b), init="zeros" if last else "uniform")
        store.create(f"stfg.mlp{i}.b", (b,), init="zeros")
    c = channels
    store.create("stfg.phi.w", (c, c))
    store.create("stfg.phi.b", (c,), init="zeros")
    w = np.zeros((2 * c, c))
    w[:c] = np.eye(c)
    store.create("stfg.fuse.w", (2 * c, c), init="zeros").data[:] = w
    store.create("stfg.fuse.b", (c,), init="zeros")


def _mlp_layers(params: ParameterStore) -> list[tuple[Tensor, Tensor]]:
    layers = []
    i = 0
    while f"stfg.mlp{i}.w" in params:
        layers.append((params[f"stfg.mlp{i}.w"], params[f"stfg.mlp{i}.b"]))
        i += 1
    return layers


def predict_future(history: np.ndarray, params: ParameterStore, half_extent: float) -> tuple[Tensor, Tensor]:
    """Offsets and predicted next polyline from an [n, N_p, 2] history (current frame last)."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 3 or len(history) == 0:
        raise ContractError(f"history must be a non-empty [n, N_p, 2] stack, got {history.shape}")
    n_points = history.shape[1]
    x = T.Tensor((history / half_extent).reshape(1, -1))
    out = T.mlp(x, _mlp_layers(params), "relu")
    offsets = T.mul(T.reshape(out, (n_points, 2)), half_extent)
    return offsets, T.add(offsets, history[-1])


def future_embedding(p_hat, params: ParameterStore, half_extent: float) -> Tensor:
    """Mean over points of phi(point): fixed sinusoidal code, then a learned linear map -> [1, C]."""
    p_hat = T.as_tensor(p_hat)
    c = params["stfg.phi.w"].shape[0]
    enc = encode_points(T.mul(p_hat, 1.0 / half_extent), c)
    pooled = T.mean(enc, axis=0, keepdims=True)
    return T.linear(pooled, params["stfg.phi.w"], params["stfg.phi.b"])


def fuse_future_guidance(q_track: Tensor, p_hat, params: ParameterStore, half_extent: float) -> Tensor:
    """Linear([q ; PE_future]) -> fused query with the shape of ``q_track``."""
    q_track = T.as_tensor(q_track)
    pe = future_embedding(p_hat, params, half_extent)
    cat = T.concat([T.reshape(q_track, (1, -1)), pe], axis=1)
    out = T.linear(cat, params["stfg.fuse.w"], params["stfg.fuse.b"])
    return T.reshape(out, q_track.shape)


def chamfer_tensor(a: Tensor, b: np.ndarray) -> Tensor:
    """Differentiable Chamfer distance from a point Tensor [n, 2] to fixed points [m, 2]."""
    a = T.as_tensor(a)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    diff = T.sub(T.reshape(a, (-1, 1, 2)), b[None, :, :])
    d = T.norm(diff, axis=-1)
    return T.mul(T.add(T.mean(T.tmin(d, axis=1)), T.mean(T.tmin(d, axis=0))), 0.5)


def pred_loss(p_hat, gt_next: np.ndarray) -> Tensor:
    return chamfer_tensor(p_hat, gt_next)


def zero_offset_loss(history: np.ndarray, gt_next: np.ndarray) -> float:
    """Baseline: predict the current polyline unchanged."""
    return chamfer(np.asarray(history)[-1], gt_next)
