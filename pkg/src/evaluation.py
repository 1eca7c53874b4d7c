#!/usr/bin/env python3
"""
RCTrans Desk - Detection and Tracking Metrics

Detection: per class and center-distance threshold, predictions are matched
greedily in descending score order to the nearest unmatched ground truth of
the same class (BEV distance). AP is the mean interpolated precision at the
recall points 0.01, 0.02, ..., 1.00. mATE and mAVE average the center and
velocity errors of matches at the 2 m threshold; a class without any match
contributes 1.0 to each. Classes without ground truth are left out.

Tracking: per frame, ground truth keeps its previous partner when that
prediction is still within the threshold; the rest are matched by the
Hungarian algorithm. A ground-truth object whose partner id changes counts
as one identity switch.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .models import CLASS_NAMES, Detection, GroundTruthSet, TrackRecord

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
ERROR_THRESHOLD = 2.0
RECALL_POINTS = np.arange(1, 101) / 100.0


def class_name(label: int) -> str:
    return CLASS_NAMES[label] if 0 <= label < len(CLASS_NAMES) else f"class_{label}"


@dataclass
class DetectionMetrics:
    ap: Dict[str, Dict[float, float]]
    mAP: float
    mATE: float
    mAVE: float
    per_class_ate: Dict[str, float] = field(default_factory=dict)
    per_class_ave: Dict[str, float] = field(default_factory=dict)

    @property
    def per_class_ap(self) -> Dict[str, float]:
        return {name: float(np.mean(list(by_t.values()))) for name, by_t in self.ap.items()}

    def to_dict(self) -> Dict:
        return {
            "mAP": self.mAP,
            "mATE": self.mATE,
            "mAVE": self.mAVE,
            "per_class_ap": self.per_class_ap,
            "ap": {name: {str(t): v for t, v in by_t.items()} for name, by_t in self.ap.items()},
            "per_class_ate": self.per_class_ate,
            "per_class_ave": self.per_class_ave,
        }


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Mean interpolated precision at recall 0.01..1.00 for a score-ordered TP flag list."""
    if num_gt == 0 or tp.size == 0:
        return 0.0
    tp = tp.astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    interpolated = np.zeros_like(RECALL_POINTS)
    for i, r in enumerate(RECALL_POINTS):
        reached = np.nonzero(recall >= r - 1e-12)[0]
        if reached.size:
            interpolated[i] = envelope[reached[0]]
    return float(interpolated.mean())


def match_class(
    preds: Sequence[Sequence[Detection]],
    gts: Sequence[GroundTruthSet],
    label: int,
    threshold: float,
):
    """Greedy score-ordered matching of one class across scenes.

    Returns (tp flags in score order, matched (pred, gt box) pairs, gt count).
    """
    candidates = []
    for s, dets in enumerate(preds):
        for k, det in enumerate(dets):
            if det.label == label:
                candidates.append((-det.score, s, k, det))
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))

    gt_boxes = {s: gt.boxes[gt.labels == label] for s, gt in enumerate(gts)}
    used = {s: np.zeros(len(b), dtype=bool) for s, b in gt_boxes.items()}
    num_gt = int(sum(len(b) for b in gt_boxes.values()))

    tp = np.zeros(len(candidates), dtype=bool)
    pairs = []
    for i, (_, s, _, det) in enumerate(candidates):
        boxes = gt_boxes.get(s)
        if boxes is None or len(boxes) == 0:
            continue
        dist = np.hypot(boxes[:, 0] - det.x, boxes[:, 1] - det.y)
        dist[used[s]] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= threshold:
            used[s][j] = True
            tp[i] = True
            pairs.append((det, boxes[j]))
    return tp, pairs, num_gt


def pr_curves(
    preds: Sequence[Sequence[Detection]],
    gts: Sequence[GroundTruthSet],
    num_classes: int = len(CLASS_NAMES),
    threshold: float = ERROR_THRESHOLD,
) -> Dict[str, Dict[str, np.ndarray]]:
    """Raw precision-recall points per class at one distance threshold, for plotting."""
    curves = {}
    for label in range(num_classes):
        tp, _, num_gt = match_class(preds, gts, label, threshold)
        if num_gt == 0:
            continue
        cum_tp = np.cumsum(tp.astype(np.float64))
        ranks = np.arange(1, tp.size + 1)
        curves[class_name(label)] = {"recall": cum_tp / num_gt, "precision": cum_tp / ranks}
    return curves


def evaluate_detections(
    preds: Sequence[Sequence[Detection]],
    gts: Sequence[GroundTruthSet],
    num_classes: int = len(CLASS_NAMES),
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> DetectionMetrics:
    """Metrics over several scenes; ``preds[i]`` are the detections of scene ``gts[i]``."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} scenes")

    ap: Dict[str, Dict[float, float]] = {}
    ate: Dict[str, float] = {}
    ave: Dict[str, float] = {}
    for label in range(num_classes):
        if not any(np.any(gt.labels == label) for gt in gts):
            continue
        name = class_name(label)
        ap[name] = {}
        for t in thresholds:
            tp, _, num_gt = match_class(preds, gts, label, t)
            ap[name][float(t)] = average_precision(tp, num_gt)
        _, pairs, _ = match_class(preds, gts, label, ERROR_THRESHOLD)
        if pairs:
            ate[name] = float(np.mean([np.hypot(d.x - b[0], d.y - b[1]) for d, b in pairs]))
            ave[name] = float(np.mean([np.hypot(d.vx - b[7], d.vy - b[8]) for d, b in pairs]))
        else:
            ate[name] = ave[name] = 1.0

    if not ap:
        logger.warning("No ground-truth objects in the evaluation set; metrics are empty")
        return DetectionMetrics({}, 0.0, 1.0, 1.0)
    mAP = float(np.mean([v for by_t in ap.values() for v in by_t.values()]))
    return DetectionMetrics(ap, mAP, float(np.mean(list(ate.values()))), float(np.mean(list(ave.values()))), ate, ave)


def eval_detection(
    preds: Sequence[Detection],
    gt: GroundTruthSet,
    num_classes: int = len(CLASS_NAMES),
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> DetectionMetrics:
    """Metrics for a single scene."""
    return evaluate_detections([list(preds)], [gt], num_classes, thresholds)


@dataclass
class TrackingMetrics:
    accuracy: float
    motp: float
    fp: int
    fn: int
    ids: int
    num_gt: int
    num_frames: int

    def to_dict(self) -> Dict:
        return {
            "accuracy": self.accuracy,
            "motp": self.motp,
            "fp": self.fp,
            "fn": self.fn,
            "ids": self.ids,
            "num_gt": self.num_gt,
            "num_frames": self.num_frames,
        }


def _by_frame(records: Sequence[TrackRecord]) -> Dict[int, List[TrackRecord]]:
    frames: Dict[int, List[TrackRecord]] = defaultdict(list)
    for r in records:
        frames[r.frame].append(r)
    return frames


def tracking_metrics(
    gt_tracks: Sequence[TrackRecord],
    pred_tracks: Sequence[TrackRecord],
    threshold: float = 2.0,
) -> TrackingMetrics:
    """MOTA-style accuracy = 1 - (FP + FN + IDS) / num_gt, plus MOTP (mean matched distance, m)."""
    gt_frames = _by_frame(gt_tracks)
    pred_frames = _by_frame(pred_tracks)
    frames = sorted(set(gt_frames) | set(pred_frames))

    partner: Dict[int, int] = {}
    fp = fn = ids = num_gt = 0
    distances: List[float] = []
    for frame in frames:
        gts = sorted(gt_frames.get(frame, []), key=lambda r: r.id)
        preds = sorted(pred_frames.get(frame, []), key=lambda r: r.id)
        num_gt += len(gts)

        dist = np.full((len(gts), len(preds)), np.inf)
        for i, g in enumerate(gts):
            for j, p in enumerate(preds):
                if g.label == p.label:
                    d = float(np.hypot(g.x - p.x, g.y - p.y))
                    if d <= threshold:
                        dist[i, j] = d

        matched: Dict[int, int] = {}
        pred_index = {p.id: j for j, p in enumerate(preds)}
        for i, g in enumerate(gts):
            j = pred_index.get(partner.get(g.id, -1))
            if j is not None and np.isfinite(dist[i, j]) and j not in matched.values():
                matched[i] = j

        free_g = [i for i in range(len(gts)) if i not in matched]
        free_p = [j for j in range(len(preds)) if j not in matched.values()]
        if free_g and free_p:
            sub = dist[np.ix_(free_g, free_p)]
            big = 1e6
            rows, cols = linear_sum_assignment(np.where(np.isfinite(sub), sub, big))
            for r, c in zip(rows, cols):
                if np.isfinite(sub[r, c]):
                    matched[free_g[r]] = free_p[c]

        for i, j in matched.items():
            g, p = gts[i], preds[j]
            if g.id in partner and partner[g.id] != p.id:
                ids += 1
            partner[g.id] = p.id
            distances.append(dist[i, j])
        fn += len(gts) - len(matched)
        fp += len(preds) - len(matched)

    if num_gt > 0:
        accuracy = 1.0 - (fp + fn + ids) / num_gt
    else:
        accuracy = 1.0 if fp == 0 else 0.0
    motp = float(np.mean(distances)) if distances else 0.0
    return TrackingMetrics(float(accuracy), motp, fp, fn, ids, num_gt, len(frames))


def ground_truth_tracks(scenes) -> List[TrackRecord]:
    """TrackRecords of the ground-truth objects of a scene sequence."""
    records = []
    for scene in scenes:
        for obj_id, box, label in zip(scene.object_ids, scene.objects.boxes, scene.objects.labels):
            records.append(TrackRecord(frame=scene.frame_index, id=int(obj_id), label=int(label),
                                       x=float(box[0]), y=float(box[1])))
    return records
