"""Perception, tracking and prediction metrics over logged sequences.

Boxes enter as arrays with rows ``(x, y, z, h, w, l, yaw)`` expressed in the
ego frame of their timestep, so the ego sits at the origin when the
evaluation scope (radius, occlusion) is applied.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .prediction import PredictedTrajectory
from .scene import OcclusionScore, bev_iou_matrix

__all__ = [
    "EmptyOverlap",
    "BoxSet",
    "FrameEval",
    "MetricsReport",
    "HOTA_ALPHAS",
    "match_frame",
    "optimal_matching",
    "perception_counts",
    "clear_mot",
    "hota",
    "displacement_errors",
    "average_precision",
    "mean_average_precision",
    "track_rates",
]

HOTA_ALPHAS = np.arange(1, 20) * 0.05


class EmptyOverlap(ValueError):
    pass


@dataclass
class BoxSet:
    """Boxes of one frame plus per-box metadata."""

    ids: np.ndarray
    boxes: np.ndarray
    occlusion: np.ndarray | None = None
    scores: np.ndarray | None = None
    types: Sequence[str] | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 7)
        if len(self.ids) != len(self.boxes):
            raise ValueError("ids and boxes differ in length")
        if self.occlusion is not None:
            self.occlusion = np.asarray(self.occlusion, dtype=int).reshape(-1)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=float).reshape(-1)

    def __len__(self):
        return len(self.ids)

    def subset(self, mask) -> "BoxSet":
        idx = np.nonzero(mask)[0]
        return BoxSet(
            self.ids[idx],
            self.boxes[idx],
            None if self.occlusion is None else self.occlusion[idx],
            None if self.scores is None else self.scores[idx],
            None if self.types is None else [self.types[i] for i in idx],
        )

    @classmethod
    def empty(cls) -> "BoxSet":
        return cls(np.zeros(0, int), np.zeros((0, 7)))


@dataclass
class FrameEval:
    """Matching outcome for one frame.

    ``truth_ids``/``pred_ids`` are the boxes that take part in scoring
    (in-scope truths, non-ignored predictions) and ``iou`` their full
    similarity matrix, which the HOTA computation reuses.
    """

    matches: list[tuple[int, int]]
    match_iou: list[float]
    match_dist: list[float]
    false_positives: list[int]
    false_negatives: list[int]
    truth_ids: np.ndarray
    pred_ids: np.ndarray
    iou: np.ndarray

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)


def optimal_matching(sim: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """One-to-one pairs maximising total similarity among pairs >= threshold."""
    if sim.size == 0:
        return []
    valid = sim >= threshold
    if not valid.any():
        return []
    rows, cols = linear_sum_assignment(np.where(valid, -sim, 0.0))
    return sorted((int(r), int(c)) for r, c in zip(rows, cols) if valid[r, c])


def match_frame(truths: BoxSet, predictions: BoxSet, iou_threshold: float = 0.3, radius: float = 100.0,
                max_occlusion: OcclusionScore = OcclusionScore.PARTIAL) -> FrameEval:
    """Score one frame's predictions against ground truth.

    Truths count only within ``radius`` of the origin and at most
    ``max_occlusion``; predictions beyond the radius are dropped, and
    predictions that only overlap out-of-scope truths are ignored rather
    than counted as false positives.
    """
    t_rng = np.linalg.norm(truths.boxes[:, :3], axis=1)
    in_scope = t_rng <= radius
    if truths.occlusion is not None:
        in_scope &= truths.occlusion <= max_occlusion.value
    p_keep = np.linalg.norm(predictions.boxes[:, :3], axis=1) <= radius
    gt = truths.subset(in_scope)
    pr = predictions.subset(p_keep)
    dont_care = truths.subset(~in_scope & (t_rng <= radius))

    iou = bev_iou_matrix(gt.boxes, pr.boxes)
    pairs = optimal_matching(iou, iou_threshold)
    matched_p = {c for _, c in pairs}
    leftover = np.array([j for j in range(len(pr)) if j not in matched_p], dtype=int)
    ignored = set()
    if len(leftover) and len(dont_care):
        dc_iou = bev_iou_matrix(dont_care.boxes, pr.boxes[leftover])
        ignored = {int(leftover[c]) for _, c in optimal_matching(dc_iou, iou_threshold)}
    scored = np.array([j for j in range(len(pr)) if j not in ignored], dtype=int)

    matched_t = {r for r, _ in pairs}
    return FrameEval(
        matches=[(int(gt.ids[r]), int(pr.ids[c])) for r, c in pairs],
        match_iou=[float(iou[r, c]) for r, c in pairs],
        match_dist=[float(np.linalg.norm(gt.boxes[r, :3] - pr.boxes[c, :3])) for r, c in pairs],
        false_positives=[int(pr.ids[j]) for j in scored if j not in matched_p],
        false_negatives=[int(gt.ids[i]) for i in range(len(gt)) if i not in matched_t],
        truth_ids=gt.ids.copy(),
        pred_ids=pr.ids[scored],
        iou=iou.reshape(len(gt), len(pr))[:, scored],
    )


def perception_counts(frames: Iterable[FrameEval]) -> dict[str, float]:
    """Precision, recall and the matching error rates from summed counts.

    FPR is FP / (TP + FP) and FNR is FN / (TP + FN); true negatives do not
    exist for box detection.
    """
    tp = fp = fn = 0
    for f in frames:
        tp += f.tp
        fp += f.fp
        fn += f.fn
    nan = float("nan")
    precision = tp / (tp + fp) if tp + fp else nan
    recall = tp / (tp + fn) if tp + fn else nan
    return {
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "precision": precision,
        "recall": recall,
        "fpr": fp / (tp + fp) if tp + fp else nan,
        "fnr": fn / (tp + fn) if tp + fn else nan,
    }


def clear_mot(frames: Sequence[FrameEval]) -> tuple[float, float]:
    """(MOTA, MOTP). MOTP is the mean centre distance of matches in metres."""
    gt = fn = fp = idsw = 0
    last: dict[int, int] = {}
    dist_sum, n_match = 0.0, 0
    for f in frames:
        gt += len(f.truth_ids)
        fn += f.fn
        fp += f.fp
        for (t, p), d in zip(f.matches, f.match_dist):
            if t in last and last[t] != p:
                idsw += 1
            last[t] = p
            dist_sum += d
            n_match += 1
    mota = 1.0 - (fn + fp + idsw) / gt if gt else float("nan")
    motp = dist_sum / n_match if n_match else float("nan")
    return mota, motp


def hota(frames: Sequence[FrameEval], alphas: Sequence[float] = HOTA_ALPHAS) -> float:
    """HOTA averaged over localisation thresholds, BEV IoU similarity.

    Per frame a single assignment maximises similarity weighted by each
    id pair's global alignment; a matched pair is a true positive at
    threshold alpha when its similarity reaches alpha.
    """
    alphas = np.asarray(alphas, dtype=float)
    gt_ids = sorted({int(i) for f in frames for i in f.truth_ids})
    pr_ids = sorted({int(i) for f in frames for i in f.pred_ids})
    if not gt_ids:
        return float("nan")
    if not pr_ids:
        return 0.0
    gi = {g: k for k, g in enumerate(gt_ids)}
    pi = {p: k for k, p in enumerate(pr_ids)}
    n_g, n_p = len(gt_ids), len(pr_ids)

    gt_count = np.zeros(n_g)
    pr_count = np.zeros(n_p)
    potential = np.zeros((n_g, n_p))
    total_gt = total_pr = 0
    for f in frames:
        g = np.array([gi[int(i)] for i in f.truth_ids], dtype=int)
        p = np.array([pi[int(i)] for i in f.pred_ids], dtype=int)
        total_gt += len(g)
        total_pr += len(p)
        gt_count[g] += 1
        pr_count[p] += 1
        if len(g) and len(p):
            sim = f.iou
            denom = sim.sum(axis=1, keepdims=True) + sim.sum(axis=0, keepdims=True) - sim
            with np.errstate(divide="ignore", invalid="ignore"):
                sim_iou = np.where(denom > 0, sim / denom, 0.0)
            potential[np.ix_(g, p)] += sim_iou
    global_align = potential / (gt_count[:, None] + pr_count[None, :] - potential)

    tp = np.zeros(len(alphas))
    match_counts = np.zeros((len(alphas), n_g, n_p))
    eps = np.finfo(float).eps
    for f in frames:
        if len(f.truth_ids) == 0 or len(f.pred_ids) == 0:
            continue
        g = np.array([gi[int(i)] for i in f.truth_ids], dtype=int)
        p = np.array([pi[int(i)] for i in f.pred_ids], dtype=int)
        sim = f.iou
        score = global_align[np.ix_(g, p)] * sim
        rows, cols = linear_sum_assignment(-score)
        s = sim[rows, cols]
        for a, alpha in enumerate(alphas):
            ok = s >= alpha - eps
            tp[a] += ok.sum()
            match_counts[a, g[rows[ok]], p[cols[ok]]] += 1

    scores = np.zeros(len(alphas))
    for a in range(len(alphas)):
        if tp[a] == 0:
            continue
        det_a = tp[a] / (total_gt + total_pr - tp[a])
        mc = match_counts[a]
        ass = mc / np.maximum(1.0, gt_count[:, None] + pr_count[None, :] - mc)
        ass_a = (mc * ass).sum() / tp[a]
        scores[a] = math.sqrt(det_a * ass_a)
    return float(scores.mean())


def displacement_errors(predicted: PredictedTrajectory, actual: Mapping[float, Sequence[float]] | Sequence,
                        tol: float = 1e-6) -> tuple[float, float]:
    """(ADE, FDE) over the waypoints that have a realised position.

    ``actual`` is a mapping or sequence of ``(timestamp, position)`` pairs.
    """
    items = actual.items() if isinstance(actual, Mapping) else actual
    times, pos = [], []
    for t, p in items:
        times.append(float(t))
        pos.append(np.asarray(p, dtype=float))
    if not times:
        raise EmptyOverlap("no realised positions")
    times = np.asarray(times)
    errs = []
    for t, p in zip(predicted.timestamps, predicted.positions):
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) <= tol:
            errs.append(float(np.linalg.norm(p - pos[k])))
    if not errs:
        raise EmptyOverlap("prediction and realised future share no timestamps")
    return float(np.mean(errs)), errs[-1]


def average_precision(detections: Sequence[BoxSet], truths: Sequence[BoxSet], iou_threshold: float = 0.3,
                      object_class: str | None = None) -> float:
    """All-points interpolated AP over a sequence of frames.

    Within a frame detections claim truths greedily in descending
    confidence. Returns NaN when the class has no ground truth.
    """
    records = []
    n_truth = 0
    for det, gt in zip(detections, truths):
        if object_class is not None:
            if det.types is not None:
                det = det.subset(np.array([t == object_class for t in det.types], dtype=bool))
            if gt.types is not None:
                gt = gt.subset(np.array([t == object_class for t in gt.types], dtype=bool))
        n_truth += len(gt)
        if len(det) == 0:
            continue
        scores = det.scores if det.scores is not None else np.ones(len(det))
        order = np.argsort(-scores, kind="stable")
        iou = bev_iou_matrix(det.boxes, gt.boxes)
        taken = np.zeros(len(gt), dtype=bool)
        for i in order:
            hit = False
            if len(gt):
                cand = np.where(taken, -1.0, iou[i])
                j = int(np.argmax(cand))
                if cand[j] >= iou_threshold:
                    taken[j] = True
                    hit = True
            records.append((float(scores[i]), hit))
    if n_truth == 0:
        return float("nan")
    if not records:
        return 0.0
    records.sort(key=lambda r: -r[0])
    hits = np.array([h for _, h in records], dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_truth
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(detections: Sequence[BoxSet], truths: Sequence[BoxSet], iou_threshold: float = 0.3) -> float:
    """Unweighted mean AP over classes present in the ground truth."""
    classes = sorted({t for gt in truths if gt.types is not None for t in gt.types})
    aps = [average_precision(detections, truths, iou_threshold, c) for c in classes]
    aps = [a for a in aps if not math.isnan(a)]
    return float(np.mean(aps)) if aps else float("nan")


def track_rates(frames: Sequence[FrameEval]) -> tuple[float, float]:
    """(FTR, MTR).

    FTR counts, per frame, predicted tracks that never match any truth in the
    sequence, averaged over frames. MTR is the share of truth ids never
    matched by any track.
    """
    if not frames:
        return float("nan"), float("nan")
    matched_p = {p for f in frames for _, p in f.matches}
    matched_t = {t for f in frames for t, _ in f.matches}
    false_tracks = sum(sum(1 for p in f.pred_ids if int(p) not in matched_p) for f in frames)
    truths = {int(t) for f in frames for t in f.truth_ids}
    ftr = false_tracks / len(frames)
    mtr = sum(1 for t in truths if t not in matched_t) / len(truths) if truths else float("nan")
    return ftr, mtr


@dataclass
class MetricsReport:
    """Per-trial metrics; NaN marks a metric that is undefined for the run."""

    precision: float = float("nan")
    recall: float = float("nan")
    fpr: float = float("nan")
    fnr: float = float("nan")
    map: float = float("nan")
    hota: float = float("nan")
    mota: float = float("nan")
    motp: float = float("nan")
    ftr: float = float("nan")
    mtr: float = float("nan")
    ade: float = float("nan")
    fde: float = float("nan")
    sensors_in_range: float = float("nan")
    dets_per_frame: float = float("nan")

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**{k: (float("nan") if d.get(k) is None else float(d[k])) for k in cls.names()})
