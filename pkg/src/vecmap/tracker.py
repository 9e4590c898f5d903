"""Per-frame orchestration: decoding, lifecycle, memory, guidance and losses.

``step_frame`` runs a fixed order each frame:

1. warp memory by the previous ego motion, prune to live tracks
2. refine each track query against its memory mask (history-map guidance)
3. generate semantic-aware detection queries and masks
4. decode [detections; tracks] into polylines, class logits and scores
5. lifecycle: tracks survive with score >= tau_t, detections are born with
   score >= tau_d (in training, ground-truth identity decides instead)
6. memory update for survivors, initialization for births
7. push polylines into the trajectory histories (re-framed to the current ego frame)
8. predict each track's next polyline and fuse it into next frame's query
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import hmg, saqg, stfg
from . import tensor as T
from .config import PipelineConfig
from .errors import ContractError
from .geometry import Se2Pose
from .memory import HistoryMapMemory
from .stfg import TrajectoryHistory
from .tensor import ParameterStore, Tensor
from .world import CLASSES, FrameObservation, GtInstance

BCE_CLAMP = 1e-7


# ---------------------------------------------------------------- parameters


def init_params(cfg: PipelineConfig) -> ParameterStore:
    store = ParameterStore(cfg.seed)
    saqg.init_params(store, cfg.n_queries, cfg.channels, cfg.n_layers)
    init_decoder_params(store, cfg)
    hmg.init_params(store, cfg.channels)
    stfg.init_params(store, cfg.history, cfg.n_points, cfg.channels, cfg.stfg_hidden)
    return store


def init_decoder_params(store: ParameterStore, cfg: PipelineConfig) -> None:
    c, h = cfg.channels, cfg.ffn_hidden
    for b in range(cfg.decoder_blocks):
        p = f"dec.b{b}."
        for name in ("sa_wq", "sa_wk", "sa_wv", "sa_wo", "ca_wq", "ca_wk", "ca_wv", "ca_wo"):
            store.create(p + name, (c, c))
        store.create(p + "ffn1.w", (c, h))
        store.create(p + "ffn1.b", (h,), init="zeros")
        store.create(p + "ffn2.w", (h, c))
        store.create(p + "ffn2.b", (c,), init="zeros")
    store.create("dec.pts0.w", (c, c))
    store.create("dec.pts0.b", (c,), init="zeros")
    store.create("dec.pts1.w", (c, cfg.n_points * 2))
    store.create("dec.pts1.b", (cfg.n_points * 2,), init="zeros")
    store.create("dec.cls.w", (c, len(CLASSES)))
    store.create("dec.cls.b", (len(CLASSES),), init="zeros")
    store.create("dec.score.w", (c, 1))
    store.create("dec.score.b", (1,), init="zeros")


# ---------------------------------------------------------------- decoding


@dataclass
class DecodeOutput:
    points: Tensor      # [N, N_p, 2] metres, ego frame
    logits: Tensor      # [N, 3]
    scores: Tensor      # [N]
    embeddings: Tensor  # [N, C]


def _attend(q_in: Tensor, kv_in, params: ParameterStore, p: str) -> Tensor:
    if isinstance(kv_in, np.ndarray):
        attn = T.token_attention(q_in, kv_in, params[p + "wq"], params[p + "wk"], params[p + "wv"])
        return T.matmul(attn, params[p + "wo"])
    q = T.matmul(q_in, params[p + "wq"])
    k = T.matmul(kv_in, params[p + "wk"])
    v = T.matmul(kv_in, params[p + "wv"])
    return T.matmul(T.masked_attention(q, k, v), params[p + "wo"])


def decode_map(queries: Tensor, tokens: np.ndarray, params: ParameterStore, cfg: PipelineConfig) -> DecodeOutput:
    """Decoder blocks (query self-attention, cross-attention over all cells, FFN) and three heads."""
    q = queries
    for b in range(cfg.decoder_blocks):
        p = f"dec.b{b}."
        q = T.layer_norm(T.add(q, _attend(q, q, params, p + "sa_")))
        q = T.layer_norm(T.add(q, _attend(q, tokens, params, p + "ca_")))
        ffn = T.mlp(q, [(params[p + "ffn1.w"], params[p + "ffn1.b"]), (params[p + "ffn2.w"], params[p + "ffn2.b"])])
        q = T.layer_norm(T.add(q, ffn))
    n = q.shape[0]
    raw = T.mlp(q, [(params["dec.pts0.w"], params["dec.pts0.b"]), (params["dec.pts1.w"], params["dec.pts1.b"])])
    cx, cy = cfg.window.center
    pts = T.add(T.mul(T.reshape(raw, (n, cfg.n_points, 2)), cfg.half_extent), np.array([cx, cy]))
    logits = T.linear(q, params["dec.cls.w"], params["dec.cls.b"])
    scores = T.reshape(T.sigmoid(T.linear(q, params["dec.score.w"], params["dec.score.b"])), (n,))
    return DecodeOutput(pts, logits, scores, q)


# ---------------------------------------------------------------- matching


def admissible_orderings(gt: np.ndarray, closed: bool) -> np.ndarray:
    """Equivalent point orderings of a GT polyline: [K, N_p, 2]."""
    gt = np.asarray(gt, dtype=np.float64)
    if closed:
        return np.stack([np.roll(gt, -k, axis=0) for k in range(len(gt))])
    return np.stack([gt, gt[::-1]])


def point_cost(pred: np.ndarray, gt: np.ndarray, closed: bool) -> tuple[float, np.ndarray]:
    """Mean per-point L1 under the best admissible ordering, and that ordering."""
    orders = admissible_orderings(gt, closed)
    costs = np.abs(np.asarray(pred)[None] - orders).sum(-1).mean(-1)
    k = int(np.argmin(costs))
    return float(costs[k]), orders[k]


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def match_cost(pred_points: np.ndarray, pred_probs: np.ndarray, gts: list[GtInstance],
               w_cls: float, w_pts: float, scale: float = 1.0) -> np.ndarray:
    """cost[i, j] = w_cls (1 - p_i(class_j)) + w_pts * point_cost(i, j) / scale."""
    cost = np.zeros((len(pred_points), len(gts)))
    for j, g in enumerate(gts):
        orders = admissible_orderings(g.polyline.points, g.polyline.closed)
        pc = np.abs(pred_points[:, None] - orders[None]).sum(-1).mean(-1).min(axis=1)
        cost[:, j] = w_cls * (1.0 - pred_probs[:, g.cls]) + w_pts * pc / scale
    return cost


def assign(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of rows to columns (rectangular allowed)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ContractError("assignment cost must be finite")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def hungarian_match(pred_points: np.ndarray, pred_probs: np.ndarray, gts: list[GtInstance],
                    w_cls: float = 2.0, w_pts: float = 5.0, scale: float = 1.0) -> list[tuple[int, int]]:
    return assign(match_cost(np.asarray(pred_points), np.asarray(pred_probs), gts, w_cls, w_pts, scale))


# ---------------------------------------------------------------- losses


@dataclass
class FrameSupervision:
    decoded: DecodeOutput
    matches: list[tuple[int, GtInstance]]
    score_targets: np.ndarray
    saqg_masks: Tensor | None = None
    saqg_matches: list[tuple[int, np.ndarray]] = field(default_factory=list)
    out_masks: Tensor | None = None
    mask_matches: list[tuple[int, np.ndarray]] = field(default_factory=list)
    predictions: list[tuple[Tensor, np.ndarray]] = field(default_factory=list)


def _rows(x: Tensor, idx: list[int]) -> Tensor:
    return x[np.asarray(idx, dtype=np.int64)]


def total_loss(sup: FrameSupervision, cfg: PipelineConfig) -> tuple[Tensor, dict[str, float]]:
    """Track loss + segmentation loss + prediction loss for one frame.

    Track loss: w_cls * CE(class) + w_pts * mean L1 of window-normalized points
    under the best admissible ordering (matched queries), plus w_score * BCE
    of every query's score against matched (1) / unmatched (0).
    """
    dec = sup.decoded
    parts: dict[str, Tensor] = {}
    p = T.clip(dec.scores, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(sup.score_targets, dtype=np.float64)
    bce = T.add(T.mul(T.log(p), y), T.mul(T.log(T.sub(1.0, p)), 1.0 - y))
    parts["score"] = T.mul(T.tsum(bce), -cfg.w_score)
    if sup.matches:
        idx = [i for i, _ in sup.matches]
        logp = T.log_softmax(_rows(dec.logits, idx))
        onehot = np.zeros((len(idx), len(CLASSES)))
        onehot[np.arange(len(idx)), [g.cls for _, g in sup.matches]] = 1.0
        parts["cls"] = T.mul(T.tsum(T.mul(logp, onehot)), -cfg.w_cls)
        pred = _rows(dec.points, idx)
        target = np.stack([point_cost(dec.points.data[i], g.polyline.points, g.polyline.closed)[1]
                           for i, g in sup.matches])
        l1 = T.tabs(T.mul(T.sub(pred, target), 1.0 / cfg.half_extent))
        parts["pts"] = T.mul(T.tsum(T.mean(T.tsum(l1, axis=2), axis=1)), cfg.w_pts)
    for key, masks, pairs in (("seg_saqg", sup.saqg_masks, sup.saqg_matches),
                              ("seg_out", sup.out_masks, sup.mask_matches)):
        if masks is not None and pairs:
            gt = np.stack([m.reshape(-1) for _, m in pairs])
            parts[key] = saqg.seg_loss(_rows(masks, [i for i, _ in pairs]), gt, cfg.lambda_dice, cfg.lambda_bce)
    if sup.predictions:
        terms = [stfg.pred_loss(ph, g) for ph, g in sup.predictions]
        parts["pred"] = terms[0] if len(terms) == 1 else T.mean(T.concat([T.reshape(t, (1,)) for t in terms]))
    total = None
    for v in parts.values():
        total = v if total is None else T.add(total, v)
    return total, {k: float(v.data) for k, v in parts.items()}


# ---------------------------------------------------------------- state


@dataclass
class OutputInstance:
    track_id: int
    cls: int
    score: float
    points: np.ndarray
    mask: np.ndarray
    born: bool = False


@dataclass
class FrameOutput:
    frame_index: int
    instances: list[OutputInstance]
    born: int = 0
    killed: int = 0
    propagated: int = 0
    losses: dict[str, float] = field(default_factory=dict)


@dataclass
class TrackState:
    queries: dict[int, Tensor]
    classes: dict[int, int]
    memory: HistoryMapMemory
    histories: TrajectoryHistory
    next_track_id: int = 0
    frames_seen: int = 0
    pending_motion: Se2Pose | None = None
    gt_identity: dict[int, int] = field(default_factory=dict)
    predictions: dict[int, Tensor] = field(default_factory=dict)
    # ground-truth polylines of tracked instances; training only, feeds L_pred
    teacher: TrajectoryHistory | None = None

    @classmethod
    def new(cls, cfg: PipelineConfig) -> "TrackState":
        return cls({}, {}, HistoryMapMemory(cfg.window, cfg.resolution), TrajectoryHistory(cfg.history))

    def live_ids(self) -> set[int]:
        return set(self.queries)

    def check(self) -> None:
        q, m, h = set(self.queries), self.memory.ids(), self.histories.ids()
        if not q == m == h:
            raise ContractError(f"inconsistent track stores: queries={sorted(q)} memory={sorted(m)} "
                                f"histories={sorted(h)}")


def lifecycle(det_scores: np.ndarray, track_scores: np.ndarray, track_ids: list[int],
              tau_d: float, tau_t: float) -> tuple[list[int], list[int]]:
    """Surviving track ids (score >= tau_t) and detection indices to be born (score >= tau_d)."""
    survivors = [tid for tid, s in zip(track_ids, track_scores) if s >= tau_t]
    births = [i for i, s in enumerate(det_scores) if s >= tau_d]
    return survivors, births


def step_frame(state: TrackState, obs: FrameObservation, cfg: PipelineConfig, params: ParameterStore,
               train: bool = False) -> tuple[FrameOutput, TrackState, Tensor | None]:
    state.check()
    ctx = contextlib.nullcontext() if train else T.no_grad()
    with ctx:
        return _step(state, obs, cfg, params, train)


def _step(state: TrackState, obs: FrameObservation, cfg: PipelineConfig, params: ParameterStore,
          train: bool) -> tuple[FrameOutput, TrackState, Tensor | None]:
    bev = obs.bev_features
    h, w, c = bev.features.shape
    tokens = saqg.bev_tokens(bev)
    pe = hmg.position_embedding(bev)
    frame = obs.frame_index

    # (1) align memory with the current ego frame
    if state.pending_motion is not None:
        state.memory.warp_memory(state.pending_motion)
    state.memory.prune(state.live_ids())

    # (2) history-map guidance for propagated tracks
    track_ids = sorted(state.queries)
    track_qs = []
    for tid in track_ids:
        q = state.queries[tid]
        if cfg.use_hmg:
            entry = state.memory.entries[tid]
            valid = hmg.valid_mask(entry.mask, cfg.theta)
            sampled = hmg.sample_guided_features(valid, bev, pe, entry.mask, cfg.k_max)
            q = hmg.refine_query(q, state.classes[tid], sampled, params)
        track_qs.append(T.reshape(q, (1, c)))

    # (3) semantic-aware detection queries
    q_sa, m_l = saqg.run_generator(params["saqg.queries"], tokens, params, cfg.n_layers, cfg.tau_l)

    # (4) joint decoding
    n_det = cfg.n_queries
    dec = decode_map(T.concat([q_sa] + track_qs, axis=0), tokens, params, cfg)
    out_masks = saqg.predict_masks(dec.embeddings, tokens, params)
    scores = dec.scores.data
    classes = dec.logits.data.argmax(axis=1)

    # (5) lifecycle
    loss = None
    losses: dict[str, float] = {}
    born_gt: dict[int, int] = {}
    if train:
        gt_by_id = {g.instance_id: g for g in obs.gt_instances}
        survivors = [tid for tid in track_ids if state.gt_identity.get(tid) in gt_by_id]
        tracked = {state.gt_identity[tid] for tid in survivors}
        free = [g for g in obs.gt_instances if g.instance_id not in tracked]
        pairs = hungarian_match(dec.points.data[:n_det], softmax_np(dec.logits.data[:n_det]), free,
                                cfg.w_cls, cfg.w_pts, cfg.half_extent)
        births = [i for i, _ in pairs]
        born_gt = {i: free[j].instance_id for i, j in pairs}
        matches = [(i, free[j]) for i, j in pairs]
        matches += [(n_det + k, gt_by_id[state.gt_identity[tid]]) for k, tid in enumerate(track_ids)
                    if tid in survivors]
        targets = np.zeros(len(scores))
        targets[[i for i, _ in matches]] = 1.0
        mask_of = {g.instance_id: m for g, m in zip(obs.gt_instances, obs.gt_masks)}
        sup = FrameSupervision(
            dec, matches, targets,
            saqg_masks=m_l, saqg_matches=[(i, mask_of[free[j].instance_id].grid) for i, j in pairs],
            out_masks=out_masks, mask_matches=[(i, mask_of[g.instance_id].grid) for i, g in matches],
            predictions=[(state.predictions[tid], gt_by_id[state.gt_identity[tid]].polyline.points)
                         for tid in track_ids if tid in survivors and tid in state.predictions])
        loss, losses = total_loss(sup, cfg)
    else:
        survivors, births = lifecycle(scores[:n_det], scores[n_det:], track_ids, cfg.tau_d, cfg.tau_t)
    surviving = set(survivors)
    killed = [tid for tid in track_ids if tid not in surviving]

    # (6) memory
    mask_grids = out_masks.data.reshape(-1, h, w)
    row_of: dict[int, int] = {}
    for k, tid in enumerate(track_ids):
        if tid in surviving:
            row = n_det + k
            row_of[tid] = row
            state.memory.update_entry(tid, mask_grids[row], float(scores[row]), cfg.beta, frame, int(classes[row]))
    new_ids = []
    for i in births:
        tid = state.next_track_id
        state.next_track_id += 1
        new_ids.append(tid)
        row_of[tid] = i
        state.memory.init_entry(tid, mask_grids[i], float(scores[i]), int(classes[i]), frame)
        if i in born_gt:
            state.gt_identity[tid] = born_gt[i]
    live = [tid for tid in track_ids if tid in surviving] + new_ids
    state.memory.prune(live)
    for tid in killed:
        state.gt_identity.pop(tid, None)

    # (7) trajectory histories in the current ego frame
    if state.pending_motion is not None:
        state.histories.reframe(state.pending_motion)
    state.histories.prune(live)
    for tid in live:
        state.histories.push(tid, frame, dec.points.data[row_of[tid]])
    teach = train and cfg.teacher_histories
    if teach:
        if state.teacher is None:
            state.teacher = TrajectoryHistory(cfg.history)
        elif state.pending_motion is not None:
            state.teacher.reframe(state.pending_motion)
        gt_points = {g.instance_id: g.polyline.points for g in obs.gt_instances}
        taught = [tid for tid in live if state.gt_identity.get(tid) in gt_points]
        state.teacher.prune(taught)
        for tid in taught:
            state.teacher.push(tid, frame, gt_points[state.gt_identity[tid]])

    # (8) short-term future guidance -> next frame's track queries
    queries: dict[int, Tensor] = {}
    predictions: dict[int, Tensor] = {}
    for tid in live:
        q = T.Tensor(dec.embeddings.data[row_of[tid]].copy())
        if cfg.use_stfg:
            _, p_hat = stfg.predict_future(state.histories.stack(tid, cfg.history), params, cfg.half_extent)
            # the offset head is trained by L_pred alone; fusion sees a constant polyline
            q = stfg.fuse_future_guidance(q, p_hat.data, params, cfg.half_extent)
            if teach and tid in state.teacher:
                _, p_hat = stfg.predict_future(state.teacher.stack(tid, cfg.history), params, cfg.half_extent)
            predictions[tid] = p_hat
        queries[tid] = q
    state.queries = queries
    state.predictions = predictions
    state.classes = {tid: int(classes[row_of[tid]]) for tid in live}
    state.pending_motion = obs.ego_motion_to_next
    state.frames_seen += 1

    instances = [OutputInstance(tid, int(classes[row_of[tid]]), float(scores[row_of[tid]]),
                                dec.points.data[row_of[tid]].copy(), mask_grids[row_of[tid]].copy(),
                                born=tid in new_ids)
                 for tid in live]
    out = FrameOutput(frame, instances, born=len(new_ids), killed=len(killed),
                      propagated=len(live) - len(new_ids), losses=losses)
    state.check()
    return out, state, loss
