"""Frame-level SELD event sets shared by the scene builder, trainer and metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .spatial import direction_vector, vector_to_angles

LABEL_HOP = 0.1

Entry = Tuple[int, Optional[np.ndarray]]


@dataclass
class FrameEvents:
    """Per label frame, a list of ``(class_id, unit DOA or None)`` entries.

    The same class may appear more than once in a frame (two instances at
    different directions).  ``None`` marks an active class without a usable
    direction.
    """

    frames: List[List[Entry]] = field(default_factory=list)
    hop: float = LABEL_HOP

    @classmethod
    def empty(cls, n_frames: int, hop: float = LABEL_HOP) -> "FrameEvents":
        return cls([[] for _ in range(n_frames)], hop)

    def __len__(self) -> int:
        return len(self.frames)

    def add(self, frame: int, class_id: int, doa) -> None:
        v = None if doa is None else np.asarray(doa, dtype=float)
        self.frames[frame].append((int(class_id), v))

    def counts(self) -> np.ndarray:
        return np.array([len(f) for f in self.frames], dtype=int)

    def truncate(self, n_frames: int) -> "FrameEvents":
        frames = [list(f) for f in self.frames[:n_frames]]
        frames += [[] for _ in range(n_frames - len(frames))]
        return FrameEvents(frames, self.hop)

    def activity(self, n_classes: int) -> np.ndarray:
        act = np.zeros((len(self.frames), n_classes), dtype=bool)
        for t, entries in enumerate(self.frames):
            for c, _ in entries:
                act[t, c] = True
        return act

    def relabel(self, mapping) -> "FrameEvents":
        return FrameEvents([[(int(mapping[c]), v) for c, v in f] for f in self.frames], self.hop)

    def to_rows(self) -> list:
        rows = []
        for t, entries in enumerate(self.frames):
            for c, v in sorted(entries, key=lambda e: e[0]):
                if v is None:
                    az, el = float("nan"), float("nan")
                else:
                    az, el = (float(a) for a in vector_to_angles(v))
                rows.append((t, c, az, el))
        return rows

    @classmethod
    def from_rows(cls, rows, n_frames: Optional[int] = None, hop: float = LABEL_HOP) -> "FrameEvents":
        rows = list(rows)
        if n_frames is None:
            n_frames = 1 + max((r[0] for r in rows), default=-1)
        out = cls.empty(n_frames, hop)
        for t, c, az, el in rows:
            if np.isnan(az) or np.isnan(el):
                out.add(t, c, None)
            else:
                out.add(t, c, direction_vector(az, el))
        return out

    def to_targets(self, n_classes: int, n_frames: Optional[int] = None):
        """Rasterise to ``(sed (T, C), doa (T, 3C))`` training targets.

        DOA is laid out per class as consecutive (x, y, z).  When a class is
        present twice in a frame the first listed instance wins.
        """
        n = len(self.frames) if n_frames is None else n_frames
        sed = np.zeros((n, n_classes), dtype=np.float32)
        doa = np.zeros((n, n_classes, 3), dtype=np.float32)
        for t, entries in enumerate(self.frames[:n]):
            for c, v in entries:
                if sed[t, c]:
                    continue
                sed[t, c] = 1.0
                if v is not None:
                    doa[t, c] = v
        return sed, doa.reshape(n, 3 * n_classes)


SELDReference = FrameEvents
