"""Chamfer AP, rasterization AP and the consistency-aware (C-mAP) variant.

All three share one greedy matcher: predictions of a class are pooled over
every frame and sequence, sorted by descending score (ties: sequence, frame,
then insertion order), and each one takes the best still-unmatched GT of the
same class in the same frame.  It counts as a true positive when that best
GT passes the threshold; otherwise it is a false positive and the GT stays
free.  AP is the area under the precision envelope (all-point interpolation).

C-mAP (variant): after Chamfer matching, each predicted track gets the GT it
matched most often, and each GT gets the track that matched it most often
(ties: the earliest first match).  True positives that disagree with either
majority are demoted to false positives before AP is recomputed.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, FormatError
from .geometry import Polyline, Window, chamfer, rasterize
from .world import CLASSES, CROSSING

CHAMFER_THRESHOLDS = (0.5, 1.0, 1.5)
RASTER_THRESHOLDS = {
    CROSSING: tuple(round(0.50 + 0.05 * i, 2) for i in range(6)),
    1: tuple(round(0.25 + 0.05 * i, 2) for i in range(6)),
    2: tuple(round(0.25 + 0.05 * i, 2) for i in range(6)),
}
CMAP_LABEL = "C-mAP (variant)"
LOG_FORMAT = "vecmap-predlog"
LOG_VERSION = 1


@dataclass
class PredInstance:
    frame: int
    cls: int
    score: float
    track_id: int
    points: np.ndarray


@dataclass
class GtRecord:
    frame: int
    cls: int
    instance_id: int
    points: np.ndarray


@dataclass
class EvalRecord:
    sequence_id: str
    preds: list[PredInstance] = field(default_factory=list)
    gts: list[GtRecord] = field(default_factory=list)


@dataclass
class MatchResult:
    order: list[tuple[int, int]]          # (record index, pred index) in ranking order
    tp: list[bool]
    matched_gt: list[int | None]          # instance_id of the matched GT
    n_gt: int


@dataclass
class APResult:
    chamfer_ap: dict[int, dict[float, float]] = field(default_factory=dict)
    raster_ap: dict[int, dict[float, float]] = field(default_factory=dict)
    consistency_ap: dict[int, dict[float, float]] = field(default_factory=dict)
    counts: dict[int, tuple[int, int]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def mAP(self) -> float:
        return _mean_of_means(self.chamfer_ap)

    @property
    def raster_mAP(self) -> float:
        return _mean_of_means(self.raster_ap)

    @property
    def c_mAP(self) -> float:
        return _mean_of_means(self.consistency_ap)


def _mean_of_means(table: dict[int, dict[float, float]]) -> float:
    if not table:
        return 0.0
    return float(np.mean([np.mean(list(v.values())) for v in table.values()]))


# ---------------------------------------------------------------- core matching


def average_precision(tp: list[bool], n_gt: int) -> float:
    """All-point interpolated AP for a ranked list of TP/FP flags.

    Evaluated in exact rational arithmetic so the result does not depend on
    summation order; recall only grows at true positives, so AP is the mean
    over GTs of the precision envelope at each true-positive rank.
    """
    if n_gt == 0 or not tp:
        return 0.0
    ctp, precision = 0, []
    for k, hit in enumerate(tp, 1):
        ctp += bool(hit)
        precision.append(Fraction(ctp, k))
    total, best = Fraction(0), Fraction(0)
    for k in range(len(tp) - 1, -1, -1):
        best = max(best, precision[k])
        if tp[k]:
            total += best
    return float(total / n_gt)


def greedy_match(records: list[EvalRecord], cls: int, distance: Callable[[PredInstance, GtRecord], float],
                 accept: Callable[[float], bool], lower_is_better: bool = True) -> MatchResult:
    ranked = []
    for r, rec in enumerate(records):
        for i, p in enumerate(rec.preds):
            if p.cls == cls:
                ranked.append((-p.score, r, p.frame, i))
    ranked.sort()
    gts_by_frame: dict[tuple[int, int], list[GtRecord]] = {}
    n_gt = 0
    for r, rec in enumerate(records):
        for g in rec.gts:
            if g.cls == cls:
                gts_by_frame.setdefault((r, g.frame), []).append(g)
                n_gt += 1
    taken: set[tuple[int, int, int]] = set()
    order, tp, matched = [], [], []
    for _, r, frame, i in ranked:
        pred = records[r].preds[i]
        best, best_d = None, None
        for g in gts_by_frame.get((r, frame), []):
            if (r, frame, g.instance_id) in taken:
                continue
            d = distance(pred, g)
            if best is None or (d < best_d if lower_is_better else d > best_d):
                best, best_d = g, d
        hit = best is not None and accept(best_d)
        if hit:
            taken.add((r, frame, best.instance_id))
        order.append((r, i))
        tp.append(hit)
        matched.append(best.instance_id if hit else None)
    return MatchResult(order, tp, matched, n_gt)


def _chamfer_dist(p: PredInstance, g: GtRecord) -> float:
    return chamfer(p.points, g.points)


def chamfer_ap(records: list[EvalRecord], cls: int, threshold_m: float, flags: list[str] | None = None) -> float:
    if threshold_m <= 0:
        raise ContractError(f"threshold must be positive, got {threshold_m}")
    m = greedy_match(records, cls, _chamfer_dist, lambda d: d <= threshold_m)
    if m.n_gt == 0:
        _flag(flags, f"no ground truth for class {CLASSES[cls]}; AP set to 0")
    return average_precision(m.tp, m.n_gt)


def _flag(flags: list[str] | None, msg: str) -> None:
    if flags is not None:
        if msg not in flags:
            flags.append(msg)
    else:
        warnings.warn(msg, RuntimeWarning, stacklevel=3)


def iou(a: np.ndarray, b: np.ndarray) -> Fraction:
    """|A & B| / |A | B| of two binary grids as an exact fraction (0 for two empty grids)."""
    a, b = np.asarray(a) > 0.5, np.asarray(b) > 0.5
    union = int(np.logical_or(a, b).sum())
    return Fraction(int(np.logical_and(a, b).sum()), union) if union else Fraction(0)


class _RasterCache:
    def __init__(self, window: Window, resolution: float, thickness: float):
        self.window, self.resolution, self.thickness = Window(*window), resolution, thickness
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, obj, cls: int) -> np.ndarray:
        key = id(obj)
        if key not in self._cache:
            poly = Polyline(obj.points, closed=cls == CROSSING)
            self._cache[key] = rasterize(poly, self.window, self.resolution, self.thickness).grid
        return self._cache[key]


def raster_ap(records: list[EvalRecord], cls: int, window=(-16.0, 16.0, -16.0, 16.0), resolution: float = 0.5,
              thickness: float = 1.0, flags: list[str] | None = None,
              thresholds: Iterable[float] | None = None) -> dict[float, float]:
    """AP per IoU threshold of the class's schedule."""
    raster = _RasterCache(window, resolution, thickness)
    dist = lambda p, g: iou(raster(p, cls), raster(g, cls))
    out = {}
    for thr in (RASTER_THRESHOLDS[cls] if thresholds is None else thresholds):
        exact = Fraction(str(thr))
        m = greedy_match(records, cls, dist, lambda v, t=exact: v >= t, lower_is_better=False)
        if m.n_gt == 0:
            _flag(flags, f"no ground truth for class {CLASSES[cls]}; AP set to 0")
        out[thr] = average_precision(m.tp, m.n_gt)
    return out


def _majority(events: dict, key_index: int) -> dict:
    """For each owner, the partner with the most matches (ties: earliest first match)."""
    best = {}
    for owner, partners in events.items():
        counts: dict = {}
        first: dict = {}
        for frame, partner in partners:
            counts[partner] = counts.get(partner, 0) + 1
            first[partner] = min(first.get(partner, frame), frame)
        best[owner] = min(counts, key=lambda k: (-counts[k], first[k], k))
    return best


def consistency_labels(records: list[EvalRecord], cls: int, threshold_m: float) -> tuple[MatchResult, list[bool]]:
    m = greedy_match(records, cls, _chamfer_dist, lambda d: d <= threshold_m)
    by_track: dict = {}
    by_gt: dict = {}
    for (r, i), hit, gid in zip(m.order, m.tp, m.matched_gt):
        if hit:
            p = records[r].preds[i]
            by_track.setdefault((r, p.track_id), []).append((p.frame, gid))
            by_gt.setdefault((r, gid), []).append((p.frame, p.track_id))
    track_major = _majority(by_track, 0)
    gt_major = _majority(by_gt, 0)
    labels = []
    for (r, i), hit, gid in zip(m.order, m.tp, m.matched_gt):
        if hit:
            p = records[r].preds[i]
            hit = track_major[(r, p.track_id)] == gid and gt_major[(r, gid)] == p.track_id
        labels.append(hit)
    return m, labels


def consistency_map(records: list[EvalRecord], cls: int, threshold_m: float, flags: list[str] | None = None) -> float:
    if threshold_m <= 0:
        raise ContractError(f"threshold must be positive, got {threshold_m}")
    m, labels = consistency_labels(records, cls, threshold_m)
    if m.n_gt == 0:
        _flag(flags, f"no ground truth for class {CLASSES[cls]}; AP set to 0")
    return average_precision(labels, m.n_gt)


def evaluate(records: list[EvalRecord], window=(-16.0, 16.0, -16.0, 16.0), resolution: float = 0.5,
             thickness: float = 1.0, raster: bool = True) -> APResult:
    res = APResult()
    for cls in range(len(CLASSES)):
        res.chamfer_ap[cls] = {t: chamfer_ap(records, cls, t, res.warnings) for t in CHAMFER_THRESHOLDS}
        res.consistency_ap[cls] = {t: consistency_map(records, cls, t, res.warnings) for t in CHAMFER_THRESHOLDS}
        if raster:
            res.raster_ap[cls] = raster_ap(records, cls, window, resolution, thickness, res.warnings)
        n_pred = sum(p.cls == cls for rec in records for p in rec.preds)
        n_gt = sum(g.cls == cls for rec in records for g in rec.gts)
        res.counts[cls] = (n_pred, n_gt)
    return res


def results_csv(res: APResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "metric", "threshold", "value"])
    for cls in range(len(CLASSES)):
        for t, v in res.chamfer_ap.get(cls, {}).items():
            w.writerow([CLASSES[cls], "AP", t, repr(v)])
        for t, v in res.raster_ap.get(cls, {}).items():
            w.writerow([CLASSES[cls], "AP_raster", t, repr(v)])
        for t, v in res.consistency_ap.get(cls, {}).items():
            w.writerow([CLASSES[cls], "C-AP (variant)", t, repr(v)])
    w.writerow(["all", "mAP", "", repr(res.mAP)])
    if res.raster_ap:
        w.writerow(["all", "mAP_raster", "", repr(res.raster_mAP)])
    w.writerow(["all", CMAP_LABEL, "", repr(res.c_mAP)])
    return buf.getvalue()


# ---------------------------------------------------------------- log files


def dumps_log(sequence_id: str, rows: list[PredInstance]) -> str:
    """Line-delimited JSON: a header line, then one line per instance per frame."""
    lines = [json.dumps({"format": LOG_FORMAT, "version": LOG_VERSION, "sequence_id": sequence_id},
                        sort_keys=True)]
    for p in rows:
        lines.append(json.dumps({"frame_index": int(p.frame), "track_id": int(p.track_id),
                                 "class": CLASSES[p.cls], "score": float(p.score),
                                 "points": np.asarray(p.points, dtype=float).tolist()}, sort_keys=True))
    return "\n".join(lines) + "\n"


def write_log(path: str | Path, sequence_id: str, rows: list[PredInstance]) -> None:
    Path(path).write_text(dumps_log(sequence_id, rows), encoding="utf-8")


def read_log(path: str | Path) -> tuple[str, list[PredInstance]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        head = json.loads(lines[0])
        if head.get("format") != LOG_FORMAT or head.get("version") != LOG_VERSION:
            raise FormatError(f"{path}: not a {LOG_FORMAT} v{LOG_VERSION} log")
        rows = []
        for line in lines[1:]:
            if not line.strip():
                continue
            d = json.loads(line)
            rows.append(PredInstance(int(d["frame_index"]), CLASSES.index(d["class"]), float(d["score"]),
                                     int(d["track_id"]), np.array(d["points"], dtype=float)))
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed log ({exc})") from exc
    return head["sequence_id"], rows


def gt_rows(gts: list[GtRecord]) -> list[PredInstance]:
    """GT records in log form (score 1, instance id in the track-id column)."""
    return [PredInstance(g.frame, g.cls, 1.0, g.instance_id, g.points) for g in gts]


def rows_to_gt(rows: list[PredInstance]) -> list[GtRecord]:
    return [GtRecord(p.frame, p.cls, p.track_id, p.points) for p in rows]
