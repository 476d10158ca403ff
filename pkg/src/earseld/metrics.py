"""SELD evaluation: segment-based F / ER, frame-wise DOA error and frame recall.

All four scores are accumulated over clips from raw counts, so evaluating a
split clip by clip and reducing gives the same numbers as one big call.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import LengthMismatch
from .labels import FrameEvents

log = logging.getLogger(__name__)

SED_THRESHOLD = 0.5
SEGMENT_FRAMES = 10  # 1 s at 100 ms label frames
DOA_EPS = 1e-12


@dataclass
class MetricReport:
    DE: float
    FR: float
    F: float
    ER: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self, name: str = "") -> str:
        return format_table([(name, self)])


def format_table(rows) -> str:
    """Fixed-width table with the column layout DE, FR, F, ER."""
    width = max([len("System")] + [len(n) for n, _ in rows])
    lines = [f"{'System':<{width}}  {'DE↓':>6}  {'FR↑':>6}  {'F↑':>6}  {'ER↓':>6}"]
    for name, r in rows:
        lines.append(f"{name:<{width}}  {r.DE:6.1f}  {r.FR:6.1f}  {r.F:6.1f}  {100 * r.ER:6.1f}")
    return "\n".join(lines)


def binarize(sed: np.ndarray, doa: np.ndarray, threshold: float = SED_THRESHOLD) -> FrameEvents:
    """Network output (T, C) / (T, 3C) -> frame events.

    A class is active when its probability is >= threshold.  An active class
    whose DOA sub-vector has zero norm keeps its activity but gets no
    direction.
    """
    sed = np.asarray(sed)
    n_frames, n_classes = sed.shape
    doa = np.asarray(doa, dtype=np.float64).reshape(n_frames, n_classes, 3)
    out = FrameEvents.empty(n_frames)
    undefined = 0
    for t, c in zip(*np.nonzero(sed >= threshold)):
        v = doa[t, c]
        norm = np.linalg.norm(v)
        if norm < DOA_EPS:
            undefined += 1
            out.add(t, c, None)
        else:
            out.add(t, c, v / norm)
    if undefined:
        log.warning("%d active predictions without a direction; excluded from DOA error", undefined)
    return out


def angular_distance(u, v) -> np.ndarray:
    """Degrees between vectors (broadcasting over leading axes).

    atan2 of cross and dot stays accurate near 0 and 180 degrees, where
    arccos of the dot product loses about half the significant digits.
    """
    u, v = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    return np.rad2deg(np.arctan2(cross, np.sum(u * v, axis=-1)))


def _check_lengths(pred: FrameEvents, ref: FrameEvents):
    if len(pred) != len(ref):
        raise LengthMismatch(f"prediction has {len(pred)} frames, reference {len(ref)}")


def segment_activity(events: FrameEvents, n_classes: int, segment_frames: int = SEGMENT_FRAMES) -> np.ndarray:
    act = events.activity(n_classes)
    n_seg = int(math.ceil(len(events) / segment_frames))
    out = np.zeros((n_seg, n_classes), dtype=bool)
    for s in range(n_seg):
        out[s] = act[s * segment_frames : (s + 1) * segment_frames].any(axis=0)
    return out


def frame_doa_cost(pred_doas, ref_doas) -> np.ndarray:
    return angular_distance(np.asarray(pred_doas)[:, None, :], np.asarray(ref_doas)[None, :, :])


class SELDScores:
    """Running counts for the four metrics."""

    def __init__(self, n_classes: int, segment_frames: int = SEGMENT_FRAMES):
        self.n_classes = n_classes
        self.segment_frames = segment_frames
        self.tp = self.fp = self.fn = 0
        self.subs = self.dels = self.ins = self.n_ref = 0
        self.doa_total = 0.0
        self.doa_pairs = 0
        self.frames_matched = 0
        self.frames_total = 0

    def update(self, pred: FrameEvents, ref: FrameEvents) -> "SELDScores":
        _check_lengths(pred, ref)
        p = segment_activity(pred, self.n_classes, self.segment_frames)
        r = segment_activity(ref, self.n_classes, self.segment_frames)
        tp = (p & r).sum(axis=1)
        fp = (p & ~r).sum(axis=1)
        fn = (~p & r).sum(axis=1)
        self.tp += int(tp.sum())
        self.fp += int(fp.sum())
        self.fn += int(fn.sum())
        self.subs += int(np.minimum(fn, fp).sum())
        self.dels += int(np.maximum(0, fn - fp).sum())
        self.ins += int(np.maximum(0, fp - fn).sum())
        self.n_ref += int(r.sum())

        for pf, rf in zip(pred.frames, ref.frames):
            pv = [v for _, v in pf if v is not None]
            rv = [v for _, v in rf if v is not None]
            if pv and rv:
                cost = frame_doa_cost(pv, rv)
                rows, cols = linear_sum_assignment(cost)
                self.doa_total += float(cost[rows, cols].sum())
                self.doa_pairs += len(rows)
        pc, rc = pred.counts(), ref.counts()
        self.frames_matched += int((pc == rc).sum())
        self.frames_total += len(rc)
        return self

    @property
    def f_score(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 100.0 if denom == 0 else 100.0 * 2 * self.tp / denom

    @property
    def error_rate(self) -> float:
        errors = self.subs + self.dels + self.ins
        return errors / max(self.n_ref, 1)

    @property
    def doa_error(self) -> float:
        return 180.0 if self.doa_pairs == 0 else self.doa_total / self.doa_pairs

    @property
    def frame_recall(self) -> float:
        return 100.0 if self.frames_total == 0 else 100.0 * self.frames_matched / self.frames_total

    def report(self) -> MetricReport:
        return MetricReport(self.doa_error, self.frame_recall, self.f_score, self.error_rate)


def segment_f_er(pred: FrameEvents, ref: FrameEvents, n_classes: int, segment_frames: int = SEGMENT_FRAMES):
    """(F in percent, ER) over segments of ``segment_frames`` label frames."""
    s = SELDScores(n_classes, segment_frames).update(pred, ref)
    return s.f_score, s.error_rate


def doa_error(pred: FrameEvents, ref: FrameEvents) -> float:
    """Mean angular error (degrees) over Hungarian-matched DOA pairs."""
    n_classes = 1 + max([c for f in pred.frames + ref.frames for c, _ in f], default=0)
    return SELDScores(n_classes).update(pred, ref).doa_error


def frame_recall(pred: FrameEvents, ref: FrameEvents) -> float:
    """Percentage of frames whose predicted active count equals the reference count."""
    _check_lengths(pred, ref)
    pc, rc = pred.counts(), ref.counts()
    return 100.0 * float((pc == rc).mean()) if len(rc) else 100.0


def compute_metrics(pairs, n_classes: int) -> MetricReport:
    """Aggregate over an iterable of ``(pred, ref)`` FrameEvents pairs."""
    scores = SELDScores(n_classes)
    for pred, ref in pairs:
        scores.update(pred, ref)
    return scores.report()
