#!/usr/bin/env python3
"""
RCTrans Desk - Velocity-Based Greedy Tracker

Each frame, every live track is moved forward by its velocity, then
detection-track pairs of the same class are accepted greedily in ascending
center distance. Matched tracks take the detection's position and regressed
velocity; unmatched detections start new tracks; unmatched tracks age and are
dropped once they exceed ``max_age``.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .configuration import TrackerConfig
from .models import Detection, Track, TrackRecord
from .tensor import ContractError

logger = logging.getLogger(__name__)


def greedy_match(distance: np.ndarray) -> List[Tuple[int, int]]:
    """
    One-to-one matching by ascending distance over a [detections, tracks]
    matrix; infinite entries are never matched. Equal distances resolve by
    detection index, then track index.
    """
    num_dets, num_tracks = distance.shape
    if num_dets == 0 or num_tracks == 0:
        return []
    order = np.argsort(distance.reshape(-1), kind="stable")
    det_used = np.zeros(num_dets, dtype=bool)
    track_used = np.zeros(num_tracks, dtype=bool)
    matches = []
    for flat in order:
        d, t = divmod(int(flat), num_tracks)
        if not np.isfinite(distance[d, t]):
            break
        if det_used[d] or track_used[t]:
            continue
        det_used[d] = track_used[t] = True
        matches.append((d, t))
    return matches


@dataclass
class TrackStepResult:
    tracks: List[Track]
    labeled: List[Tuple[int, Detection]]
    next_id: int


def track_step(
    tracks: Sequence[Track],
    dets: Sequence[Detection],
    dt: float,
    cfg: TrackerConfig,
    next_id: Optional[int] = None,
) -> TrackStepResult:
    """
    Advance ``tracks`` by one frame of ``dets`` taken ``dt`` seconds later.

    New ids start at ``next_id`` (default: one past the largest live id).
    """
    if not dt > 0:
        raise ContractError(f"dt must be positive, got {dt}")
    tracks = sorted(tracks, key=lambda t: t.id)
    if next_id is None:
        next_id = max((t.id for t in tracks), default=-1) + 1
    dets = [d for d in dets if d.score >= cfg.min_score]

    predicted = [replace(t, x=t.x + t.vx * dt, y=t.y + t.vy * dt) for t in tracks]
    distance = np.full((len(dets), len(predicted)), np.inf)
    for i, det in enumerate(dets):
        for j, trk in enumerate(predicted):
            if det.label != trk.label:
                continue
            dist = float(np.hypot(det.x - trk.x, det.y - trk.y))
            if dist <= cfg.match_radius:
                distance[i, j] = dist

    matches = greedy_match(distance)
    det_to_track = {d: t for d, t in matches}
    matched_tracks = {t for _, t in matches}

    survivors: List[Track] = []
    labeled: List[Tuple[int, Detection]] = []
    for i, det in enumerate(dets):
        if i in det_to_track:
            trk = predicted[det_to_track[i]]
            updated = replace(
                trk, x=det.x, y=det.y, vx=det.vx, vy=det.vy,
                score=det.score, age_since_update=0, hits=trk.hits + 1,
            )
        else:
            updated = Track(id=next_id, x=det.x, y=det.y, vx=det.vx, vy=det.vy,
                            label=det.label, score=det.score)
            next_id += 1
        survivors.append(updated)
        labeled.append((updated.id, det))

    for j, trk in enumerate(predicted):
        if j in matched_tracks:
            continue
        aged = replace(trk, age_since_update=trk.age_since_update + 1)
        if aged.age_since_update <= cfg.max_age:
            survivors.append(aged)

    survivors.sort(key=lambda t: t.id)
    return TrackStepResult(survivors, labeled, next_id)


class GreedyTracker:
    """Stateful wrapper that owns the live tracks and the id counter."""

    def __init__(self, config: TrackerConfig):
        self.config = config
        self.tracks: List[Track] = []
        self.next_id = 0
        self.frame = 0
        self.logger = logging.getLogger(__name__)

    def step(self, dets: Sequence[Detection], dt: float) -> List[TrackRecord]:
        result = track_step(self.tracks, dets, dt, self.config, self.next_id)
        self.tracks, self.next_id = result.tracks, result.next_id
        records = [
            TrackRecord(frame=self.frame, id=tid, label=det.label, x=det.x, y=det.y, score=det.score)
            for tid, det in result.labeled
        ]
        self.frame += 1
        return records


def run_tracker(frames: Sequence[Sequence[Detection]], dt: float, config: TrackerConfig) -> List[TrackRecord]:
    """Track a whole sequence; returns one record per frame per updated track."""
    tracker = GreedyTracker(config)
    records: List[TrackRecord] = []
    for dets in frames:
        records.extend(tracker.step(dets, dt))
    logger.info(f"Tracked {len(frames)} frames, {tracker.next_id} track ids issued")
    return records
