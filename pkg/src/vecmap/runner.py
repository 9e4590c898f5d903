"""Training, inference and held-out evaluation loops over observed sequences."""
from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from . import stfg, tracker
from . import tensor as T
from .config import PipelineConfig
from .errors import NumericError
from .metrics import EvalRecord, GtRecord, PredInstance
from .stfg import TrajectoryHistory
from .tensor import ParameterStore
from .tracker import FrameOutput, TrackState
from .world import FrameObservation, Scenario, observe_frame

log = logging.getLogger(__name__)

Sequence_ = list[FrameObservation]


def observe_all(scenario: Scenario) -> Sequence_:
    return [observe_frame(scenario, t) for t in range(scenario.n_frames)]


class NonFiniteLoss(NumericError):
    def __init__(self, msg: str, frame: FrameObservation, losses: dict[str, float]):
        super().__init__(msg)
        self.frame = frame
        self.losses = losses


def train(params: ParameterStore, cfg: PipelineConfig, sequences: Sequence[Sequence_], epochs: int,
          on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """SGD over frames; sequence order reshuffled each epoch from ``cfg.seed``.

    Frames inside a sequence stay in order since the tracker state carries
    across them.  Returns the mean per-frame loss of every epoch.
    """
    opt = T.SGD(params.parameters(), lr=cfg.lr, momentum=cfg.momentum, clip_norm=cfg.clip_norm)
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(sequences))
        total, count = 0.0, 0
        for si in order:
            state = TrackState.new(cfg)
            for obs in sequences[si]:
                params.zero_grad()
                out, state, loss = tracker.step_frame(state, obs, cfg, params, train=True)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLoss(f"non-finite loss {value} at epoch {epoch}, sequence {si}, "
                                        f"frame {obs.frame_index}", obs, out.losses)
                loss.backward()
                opt.step()
                total += value
                count += 1
        mean = total / max(count, 1)
        history.append(mean)
        log.info("epoch %d loss %.4f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return history


def run_sequence(params: ParameterStore, cfg: PipelineConfig, sequence: Sequence_) -> list[FrameOutput]:
    state = TrackState.new(cfg)
    outputs = []
    for obs in sequence:
        out, state, _ = tracker.step_frame(state, obs, cfg, params, train=False)
        outputs.append(out)
    return outputs


def prediction_rows(outputs: Sequence[FrameOutput]) -> list[PredInstance]:
    return [PredInstance(o.frame_index, inst.cls, inst.score, inst.track_id, inst.points)
            for o in outputs for inst in o.instances]


def gt_records(sequence: Sequence_) -> list[GtRecord]:
    return [GtRecord(obs.frame_index, g.cls, g.instance_id, g.polyline.points)
            for obs in sequence for g in obs.gt_instances]


def eval_records(params: ParameterStore, cfg: PipelineConfig, sequences: Sequence[Sequence_],
                 names: Sequence[str] | None = None) -> list[EvalRecord]:
    names = names or [f"seq{i:03d}" for i in range(len(sequences))]
    return [EvalRecord(name, prediction_rows(run_sequence(params, cfg, seq)), gt_records(seq))
            for name, seq in zip(names, sequences)]


def gt_history_pairs(cfg: PipelineConfig, sequences: Sequence[Sequence_],
                     class_id: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """(history stack, next-frame GT polyline) for every instance visible in consecutive frames.

    Histories are built from ground truth as in training: each visible instance
    is pushed every frame, re-framed into the current ego frame.
    """
    pairs = []
    for seq in sequences:
        hist = TrajectoryHistory(cfg.history)
        motion = None
        for t, obs in enumerate(seq):
            if motion is not None:
                hist.reframe(motion)
            present = {g.instance_id: g for g in obs.gt_instances if class_id is None or g.cls == class_id}
            hist.prune(i for i in hist.ids() if i in present and hist.frames(i)[-1] == t - 1)
            for iid, g in present.items():
                hist.push(iid, t, g.polyline.points)
            motion = obs.ego_motion_to_next
            if t + 1 >= len(seq):
                continue
            nxt = {g.instance_id: g for g in seq[t + 1].gt_instances}
            pairs.extend((hist.stack(iid, cfg.history), nxt[iid].polyline.points)
                         for iid in sorted(present) if iid in nxt)
    return pairs


def heldout_pred_loss(params: ParameterStore, cfg: PipelineConfig,
                      sequences: Sequence[Sequence_]) -> tuple[float, float, int]:
    """Mean next-frame Chamfer of the STFG head vs the zero-offset baseline over GT histories.

    Returns (trained, baseline, number of scored pairs).
    """
    pairs = gt_history_pairs(cfg, sequences)
    if not pairs:
        return 0.0, 0.0, 0
    with T.no_grad():
        trained = [float(stfg.pred_loss(stfg.predict_future(h, params, cfg.half_extent)[1], g).data)
                   for h, g in pairs]
    baseline = [stfg.zero_offset_loss(h, g) for h, g in pairs]
    return float(np.mean(trained)), float(np.mean(baseline)), len(pairs)
