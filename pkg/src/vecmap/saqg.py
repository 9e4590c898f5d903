"""Semantic-aware query generation by masked-attention decoding over BEV cells."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoding import grid_position_embedding
from .tensor import ParameterStore, Tensor
from .world import BevGrid

DETECTION, TRACK = "detection", "track"


@dataclass
class QuerySet:
    embeddings: Tensor  # [N, C]
    kinds: list[str] = field(default_factory=list)
    track_ids: list[int | None] = field(default_factory=list)

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if not self.kinds:
            self.kinds = [DETECTION] * n
            self.track_ids = [None] * n
        ids = [t for k, t in zip(self.kinds, self.track_ids) if k == TRACK]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate track ids in QuerySet")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class MaskSet:
    masks: Tensor  # [N, H*W], probabilities
    height: int
    width: int

    def grids(self) -> np.ndarray:
        return self.masks.data.reshape(-1, self.height, self.width)


def bev_tokens(f_bev: BevGrid) -> np.ndarray:
    """BEV features plus the fixed position embedding, flattened to [H*W, C]."""
    pe = grid_position_embedding(f_bev.window, f_bev.resolution, f_bev.features.shape[-1])
    return (f_bev.features + pe).reshape(-1, f_bev.features.shape[-1])


def init_params(store: ParameterStore, n_queries: int, channels: int, n_layers: int) -> None:
    c = channels
    store.create("saqg.queries", (n_queries, c), fan_in=c)
    store.create("saqg.mask_proj", (c, c))
    for l in range(n_layers):
        for name in ("wq", "wk", "wv", "wo"):
            store.create(f"saqg.l{l}.{name}", (c, c))


def attention_bias(prev_masks: np.ndarray, tau_l: float) -> np.ndarray:
    """0 where the previous mask exceeds ``tau_l``, -inf elsewhere."""
    return np.where(np.asarray(prev_masks) > tau_l, 0.0, T.NEG_INF)


def predict_masks(queries: Tensor, tokens: np.ndarray, params: ParameterStore) -> Tensor:
    """sigmoid(<query, projected cell feature>) for every query and cell -> [N, H*W]."""
    # (q W^T) tokens^T == q (tokens W)^T without forming the [cells, C] projection
    qp = T.matmul(queries, T.transpose(params["saqg.mask_proj"]))
    return T.sigmoid(T.matmul(qp, T.Tensor(np.asarray(tokens).T)))


def decoder_layer(queries: Tensor, tokens: np.ndarray, prev_masks: np.ndarray, params: ParameterStore,
                  layer: int, tau_l: float) -> tuple[Tensor, Tensor]:
    p = f"saqg.l{layer}."
    attn = T.token_attention(queries, tokens, params[p + "wq"], params[p + "wk"], params[p + "wv"],
                             attention_bias(prev_masks, tau_l))
    out = T.add(queries, T.matmul(attn, params[p + "wo"]))
    return out, predict_masks(out, tokens, params)


def run_generator(initial_queries: Tensor, f_bev: BevGrid | np.ndarray, params: ParameterStore,
                  n_layers: int, tau_l: float) -> tuple[Tensor, Tensor]:
    """Seed masks from the initial queries, then refine through ``n_layers`` layers."""
    tokens = bev_tokens(f_bev) if isinstance(f_bev, BevGrid) else f_bev
    q = initial_queries
    masks = predict_masks(q, tokens, params)
    for l in range(n_layers):
        q, masks = decoder_layer(q, tokens, masks.data, params, l, tau_l)
    return q, masks


def seg_loss(pred: Tensor, gt: np.ndarray, lambda_dice: float = 2.0, lambda_bce: float = 1.0,
             eps: float = 1e-6, clamp: float = 1e-7) -> Tensor:
    """Dice + BCE over matched mask pairs; ``pred`` and ``gt`` are [M, cells]."""
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape[0], -1) if pred.shape[0] else gt
    if pred.shape[0] == 0:
        return T.Tensor(0.0)
    p = T.clip(pred, clamp, 1.0 - clamp)
    inter = T.tsum(T.mul(pred, gt), axis=1)
    denom = T.add(T.tsum(pred, axis=1), gt.sum(axis=1) + eps)
    dice = T.sub(1.0, T.div(T.mul(inter, 2.0), denom))
    bce = T.mul(T.mean(T.add(T.mul(T.log(p), gt), T.mul(T.log(T.sub(1.0, p)), 1.0 - gt)), axis=1), -1.0)
    return T.tsum(T.add(T.mul(dice, lambda_dice), T.mul(bce, lambda_bce)))
