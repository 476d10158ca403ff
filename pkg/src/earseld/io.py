"""File formats: multichannel float WAV, label CSV, JSON documents, checksums."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
from scipy.io import wavfile

LABEL_COLUMNS = ("frame_index", "class_id", "azimuth_deg", "elevation_deg")


def write_wav(path, audio: np.ndarray, sample_rate: int) -> None:
    """Write a (channels, samples) array as 32-bit float WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, sample_rate, np.ascontiguousarray(np.asarray(audio, dtype=np.float32).T))


def read_wav(path):
    sample_rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim == 1:
        data = data[:, None]
    return data.T.astype(np.float64), sample_rate


def write_label_csv(path, rows) -> None:
    """rows: iterable of (frame_index, class_id, azimuth_deg, elevation_deg)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_COLUMNS)
        for frame, cls, az, el in rows:
            w.writerow([int(frame), int(cls), f"{az:.6f}", f"{el:.6f}"])


def read_label_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LABEL_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(LABEL_COLUMNS)}")
        return [
            (int(r["frame_index"]), int(r["class_id"]), float(r["azimuth_deg"]), float(r["elevation_deg"]))
            for r in reader
        ]


def sha256_file(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
