"""Sensor recordings: resampling, windowing, normalization, participant folds.

Also provides a synthetic accelerometer generator used as the desk-scale
data source, and CSV ingestion for real per-participant recordings.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SYNTH_RATE_HZ = 50.0


class NonIntegerDecimation(ValueError):
    pass


class ZeroVariance(ValueError):
    pass


class TooFewParticipants(ValueError):
    pass


@dataclass
class Recording:
    participant_id: str
    timestamps: np.ndarray
    samples: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] < 1:
            raise ValueError(f"samples must be T x C with C >= 1, got {self.samples.shape}")
        if len(self.timestamps) != len(self.samples):
            raise ValueError("timestamp count and sample count differ")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.samples):
                raise ValueError("label count and sample count differ")

    @property
    def rate(self) -> float:
        """Sampling rate in Hz, estimated from the median timestamp spacing."""
        if len(self.timestamps) < 2:
            raise ValueError("need at least two samples to infer a rate")
        return 1.0 / float(np.median(np.diff(self.timestamps)))


@dataclass
class SensorWindow:
    values: np.ndarray
    label: Optional[int]
    participant_id: str


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class FoldPlan:
    folds: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"folds": self.folds}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        return cls(json.loads(text)["folds"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())


def resample(rec: Recording, target_hz: float, orig_hz: Optional[float] = None) -> Recording:
    """Decimate by keeping every (orig/target)-th sample. No interpolation."""
    orig_hz = rec.rate if orig_hz is None else orig_hz
    ratio = orig_hz / target_hz
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-6:
        raise NonIntegerDecimation(
            f"cannot sub-sample {orig_hz:g} Hz to {target_hz:g} Hz (ratio {ratio:g})"
        )
    labels = None if rec.labels is None else rec.labels[::step]
    return Recording(rec.participant_id, rec.timestamps[::step], rec.samples[::step], labels)


def _modal_label(labels: np.ndarray) -> Optional[int]:
    labels = labels[labels >= 0]
    if len(labels) == 0:
        return None
    values, counts = np.unique(labels, return_counts=True)
    # np.unique sorts ascending, so argmax picks the smallest id on ties
    return int(values[np.argmax(counts)])


def window(rec: Recording, length: int = 100, overlap: float = 0.0) -> list[SensorWindow]:
    if length < 1:
        raise ValueError("window length must be >= 1")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    stride = max(1, int(round(length * (1.0 - overlap))))
    T = len(rec.samples)
    out = []
    for start in range(0, T - length + 1, stride):
        label = None
        if rec.labels is not None:
            label = _modal_label(rec.labels[start : start + length])
        out.append(SensorWindow(rec.samples[start : start + length].copy(), label, rec.participant_id))
    return out


def fit_norm(train_windows: Sequence[SensorWindow]) -> NormStats:
    if len(train_windows) == 0:
        raise ValueError("cannot fit normalization on an empty split")
    data = np.concatenate([w.values for w in train_windows], axis=0)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    if np.any(std <= 1e-12):
        raise ZeroVariance(f"constant channel(s): {np.flatnonzero(std <= 1e-12).tolist()}")
    return NormStats(mean, std)


def apply_norm(windows: Sequence[SensorWindow], stats: NormStats) -> list[SensorWindow]:
    return [
        SensorWindow((w.values - stats.mean) / stats.std, w.label, w.participant_id)
        for w in windows
    ]


def make_folds(participants: Sequence[str], seed: int = 0, n_folds: int = 5) -> FoldPlan:
    """Participant-wise folds with disjoint test sets covering everyone once.

    Test sets are the n_folds near-equal chunks of a seeded permutation; the
    remaining participants are shuffled again and split 80:20 into train/val.
    """
    participants = list(dict.fromkeys(participants))
    if len(participants) < n_folds:
        raise TooFewParticipants(f"need >= {n_folds} participants, got {len(participants)}")
    rng = np.random.default_rng(seed)
    order = [participants[i] for i in rng.permutation(len(participants))]
    chunks = np.array_split(np.arange(len(order)), n_folds)
    folds = []
    for chunk in chunks:
        test = [order[i] for i in chunk]
        rest = [p for p in order if p not in set(test)]
        rest = [rest[i] for i in rng.permutation(len(rest))]
        n_val = max(1, int(round(0.2 * len(rest)))) if len(rest) > 1 else 0
        folds.append({"train": sorted(rest[n_val:]), "val": sorted(rest[:n_val]), "test": sorted(test)})
    return FoldPlan(folds)


def split_by_participant(windows, participants) -> list:
    keep = set(participants)
    return [w for w in windows if w.participant_id in keep]


# --- synthetic data -------------------------------------------------------


@dataclass(frozen=True)
class ClassSignature:
    name: str
    freq: float
    amp: float
    phase: float  # x-to-y phase offset, radians
    y_sign: float  # +1 / -1; flipping it changes direction but not magnitude


def class_signatures(classes: int) -> list[ClassSignature]:
    """Signatures for `classes` activities.

    With >= 3 classes, class 0 is near-static. The last two classes always
    share frequency, amplitude and phase and differ only in the sign of the
    y axis, so any magnitude-only representation cannot separate them.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    sigs = []
    n_free = classes - 2
    if n_free > 0:
        sigs.append(ClassSignature("static", 0.3, 0.03, 0.0, 1.0))
    for i in range(1, n_free):
        sigs.append(ClassSignature(f"dynamic{i}", 1.6 + 0.9 * i, 0.5 + 0.35 * i, 0.6 * i, 1.0))
    sigs.append(ClassSignature("pos-phase", 1.2, 0.8, np.pi / 4, 1.0))
    sigs.append(ClassSignature("neg-phase", 1.2, 0.8, np.pi / 4, -1.0))
    return sigs


def _segment(sig: ClassSignature, n: int, rng, freq_jitter: float, amp_jitter: float, noise: float):
    t = np.arange(n) / SYNTH_RATE_HZ
    f = sig.freq * freq_jitter
    a = sig.amp * amp_jitter
    theta = 2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)
    x = a * np.sin(theta)
    y = sig.y_sign * a * np.sin(theta + sig.phase)
    z = 1.0 + 0.5 * a * np.sin(2 * theta)
    out = np.stack([x, y, z], axis=1)
    return out + noise * rng.standard_normal(out.shape)


def synth_dataset(
    num_participants: int = 6,
    classes: int = 4,
    seed: int = 0,
    seconds_per_segment: float = 20.0,
    segments_per_class: int = 2,
    noise: float = 0.05,
) -> list[Recording]:
    """Labelled 3-axis 50 Hz recordings, one per participant.

    Each recording is a shuffled sequence of activity segments. Participant
    jitter on frequency and amplitude is shared by all of that participant's
    classes.
    """
    sigs = class_signatures(classes)
    rng = np.random.default_rng(seed)
    n = int(round(seconds_per_segment * SYNTH_RATE_HZ))
    recs = []
    for p in range(num_participants):
        freq_jitter = 1.0 + 0.05 * rng.standard_normal()
        amp_jitter = 1.0 + 0.1 * rng.standard_normal()
        order = np.repeat(np.arange(classes), segments_per_class)
        rng.shuffle(order)
        parts, labels = [], []
        for c in order:
            parts.append(_segment(sigs[c], n, rng, freq_jitter, amp_jitter, noise))
            labels.append(np.full(n, c, dtype=np.int64))
        samples = np.concatenate(parts)
        ts = np.arange(len(samples)) / SYNTH_RATE_HZ
        recs.append(Recording(f"P{p:03d}", ts, samples, np.concatenate(labels)))
    return recs


# --- file ingestion -------------------------------------------------------


def read_csv_recording(path) -> Recording:
    """Read one participant file with header ``timestamp,x,y,z,label``."""
    path = Path(path)
    ts, xyz, labels = [], [], []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"timestamp", "x", "y", "z", "label"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ts.append(float(row["timestamp"]))
            xyz.append((float(row["x"]), float(row["y"]), float(row["z"])))
            lab = row["label"].strip()
            labels.append(int(lab) if lab else -1)
    labels = np.asarray(labels, dtype=np.int64)
    return Recording(path.stem, np.asarray(ts), np.asarray(xyz), None if np.all(labels < 0) else labels)


def write_csv_recording(rec: Recording, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "x", "y", "z", "label"])
        for i in range(len(rec.timestamps)):
            lab = "" if rec.labels is None or rec.labels[i] < 0 else int(rec.labels[i])
            w.writerow([repr(float(rec.timestamps[i]))] + [repr(float(v)) for v in rec.samples[i]] + [lab])


def read_csv_dir(directory) -> list[Recording]:
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no CSV recordings in {directory}")
    return [read_csv_recording(f) for f in files]


def windows_to_arrays(windows: Sequence[SensorWindow]):
    """Stack windows into (N, W, C) values, (N,) labels (-1 for none), participant ids."""
    x = np.stack([w.values for w in windows]).astype(np.float64)
    y = np.array([-1 if w.label is None else w.label for w in windows], dtype=np.int64)
    pids = [w.participant_id for w in windows]
    return x, y, pids
