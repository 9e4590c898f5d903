"""History-map guidance: refine a track query with BEV features under its memory mask."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParameterStore, Tensor
from .world import CLASSES, BevGrid
from .encoding import grid_position_embedding

K_MAX = 256


def init_params(store: ParameterStore, channels: int) -> None:
    c = channels
    store.create("hmg.class_embed", (len(CLASSES), c), fan_in=c)
    for name in ("wq", "wk", "wv"):
        store.create(f"hmg.{name}", (c, c))
    # zero output projection: refinement starts as the identity
    store.create("hmg.wo", (c, c), init="zeros")


def position_embedding(f_bev: BevGrid) -> np.ndarray:
    return grid_position_embedding(f_bev.window, f_bev.resolution, f_bev.features.shape[-1])


def valid_mask(m, theta: float) -> np.ndarray:
    grid = np.asarray(getattr(m, "grid", m), dtype=np.float64)
    return (grid > theta).astype(np.float64)


def sample_guided_features(valid: np.ndarray, f_bev: BevGrid, pe: np.ndarray,
                           memory: np.ndarray | None = None, k_max: int = K_MAX) -> np.ndarray:
    """Rows of ``f_bev + pe`` at valid cells, row-major, shape [K, C].

    Beyond ``k_max`` valid cells, the ``k_max`` cells with the highest memory
    value are kept (earlier cells win ties), still in row-major order.
    """
    feats = f_bev.features
    if valid.shape != feats.shape[:2] or pe.shape != feats.shape:
        raise ValueError(f"shape mismatch: valid {valid.shape}, features {feats.shape}, pe {pe.shape}")
    idx = np.flatnonzero(valid.reshape(-1) > 0)
    if len(idx) > k_max:
        score = np.ones(len(idx)) if memory is None else np.asarray(memory).reshape(-1)[idx]
        keep = np.argsort(-score, kind="stable")[:k_max]
        idx = np.sort(idx[keep])
    c = feats.shape[-1]
    return (feats.reshape(-1, c)[idx] + pe.reshape(-1, c)[idx])


def refine_query(q_track: Tensor, class_id: int, sampled: np.ndarray, params: ParameterStore) -> Tensor:
    """``q + CrossAttn(q + CE[class], sampled) W_o``; identity when nothing was sampled."""
    q_track = T.as_tensor(q_track)
    if len(sampled) == 0:
        return q_track
    q2 = T.reshape(q_track, (1, -1))
    ce = params["hmg.class_embed"][class_id:class_id + 1]
    s = T.Tensor(sampled)
    attn = T.masked_attention(T.matmul(T.add(q2, ce), params["hmg.wq"]),
                              T.matmul(s, params["hmg.wk"]), T.matmul(s, params["hmg.wv"]))
    out = T.add(q2, T.matmul(attn, params["hmg.wo"]))
    return T.reshape(out, q_track.shape)
