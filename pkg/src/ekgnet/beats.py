"""Heartbeat extraction: resample, window, normalize, R-peaks, 1.2T segments, splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .wfdb import Annotation, Record, map_to_aami

FS = 125
WINDOW = 10 * FS
BEAT_LEN = 178
PEAK_THRESHOLD = 0.9
LABEL_TOLERANCE_S = 0.15
V_LOW, V_HIGH = 0.6, 0.7


class BeatError(ValueError):
    pass


@dataclass(frozen=True)
class Beat:
    samples: np.ndarray
    label: int
    t_beat: float = 0.0
    source: tuple[str, int, int] = ("", 0, 0)


@dataclass
class BeatSet:
    """Columnar beat collection: row i of every array describes one beat."""

    x: np.ndarray  # (n, BEAT_LEN)
    y: np.ndarray  # (n,) int class index
    t_beat: np.ndarray  # (n,) float, samples at 125 Hz
    record: np.ndarray  # (n,) str
    window: np.ndarray  # (n,) int
    peak: np.ndarray  # (n,) int
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        self.x = np.asarray(self.x)
        if self.x.ndim != 2 or (len(self.x) and self.x.shape[1] != BEAT_LEN):
            raise BeatError(f"beats must have shape (n, {BEAT_LEN}), got {self.x.shape}")
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t_beat = np.asarray(self.t_beat, dtype=float)
        self.record = np.asarray(self.record, dtype=str)
        self.window = np.asarray(self.window, dtype=np.int64)
        self.peak = np.asarray(self.peak, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Beat:
        return Beat(self.x[i], int(self.y[i]), float(self.t_beat[i]),
                    (str(self.record[i]), int(self.window[i]), int(self.peak[i])))

    def __iter__(self) -> Iterator[Beat]:
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def take(self, idx) -> "BeatSet":
        idx = np.asarray(idx, dtype=np.int64)
        return BeatSet(self.x[idx], self.y[idx], self.t_beat[idx], self.record[idx],
                       self.window[idx], self.peak[idx], self.classes)

    def source_keys(self) -> list[str]:
        return [f"{r}:{w}:{p}" for r, w, p in zip(self.record, self.window, self.peak)]

    @classmethod
    def empty(cls, classes: Sequence[str]) -> "BeatSet":
        return cls(np.zeros((0, BEAT_LEN)), [], [], [], [], [], tuple(classes))

    @classmethod
    def from_beats(cls, beats: Sequence[Beat], classes: Sequence[str]) -> "BeatSet":
        if not beats:
            return cls.empty(classes)
        return cls(np.stack([b.samples for b in beats]), [b.label for b in beats],
                   [b.t_beat for b in beats], [b.source[0] for b in beats],
                   [b.source[1] for b in beats], [b.source[2] for b in beats],
                   tuple(classes))

    @classmethod
    def concat(cls, sets: Sequence["BeatSet"]) -> "BeatSet":
        sets = [s for s in sets if len(s)] or list(sets[:1])
        return cls(np.concatenate([s.x for s in sets]), np.concatenate([s.y for s in sets]),
                   np.concatenate([s.t_beat for s in sets]),
                   np.concatenate([s.record for s in sets]),
                   np.concatenate([s.window for s in sets]),
                   np.concatenate([s.peak for s in sets]), sets[0].classes)


# ---------------------------------------------------------------------------
# Signal conditioning

def resample(signal, fs_in: float, fs_out: float = FS) -> np.ndarray:
    """Linear-interpolation resampling onto the fs_out sample grid."""
    x = np.asarray(signal, dtype=float)
    if x.size == 0:
        raise BeatError("cannot resample an empty signal")
    if fs_in <= 0 or fs_out <= 0:
        raise BeatError("sampling rates must be positive")
    if fs_in < fs_out:
        raise BeatError(f"upsampling not supported ({fs_in} -> {fs_out})")
    if fs_in == fs_out:
        return x.copy()
    n_out = int(round(x.size * fs_out / fs_in))
    t = np.arange(n_out) * (fs_in / fs_out)
    return np.interp(t, np.arange(x.size), x)


def window_10s(signal, fs: int = FS) -> list[np.ndarray]:
    if fs != FS:
        raise BeatError(f"windowing expects {FS} Hz input, got {fs}")
    x = np.asarray(signal)
    n = x.size // WINDOW
    return [x[i * WINDOW:(i + 1) * WINDOW] for i in range(n)]


def normalize(window) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]. Returns (values, degenerate)."""
    x = np.asarray(window, dtype=float)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x), True
    return (x - lo) / (hi - lo), False


def find_rpeaks(window, threshold: float = PEAK_THRESHOLD) -> np.ndarray:
    """Local maxima (first-difference sign change) at or above `threshold`."""
    x = np.asarray(window, dtype=float)
    d = np.diff(x)
    i = np.nonzero((d[:-1] > 0) & (d[1:] <= 0))[0] + 1
    return i[x[i] >= threshold]


def nominal_period(rpeaks) -> float:
    return float(np.median(np.diff(rpeaks)))


def segment_beat(window, r: int, t_beat: float) -> np.ndarray:
    """Samples [r, r + floor(1.2 T)) zero-padded or truncated to BEAT_LEN."""
    seg = np.asarray(window, dtype=float)[r:r + int(math.floor(1.2 * t_beat))][:BEAT_LEN]
    out = np.zeros(BEAT_LEN)
    out[:seg.size] = seg
    return out


def label_peaks(rpeaks, beat_ann_idx: np.ndarray, beat_ann_cls: np.ndarray,
                fs: float = FS, tol_s: float = LABEL_TOLERANCE_S) -> np.ndarray:
    """Class of the nearest beat annotation within ±tol_s of each peak, -1 if none.

    Annotation indices must already be on the `fs` grid and sorted.
    """
    rpeaks = np.asarray(rpeaks, dtype=float)
    out = np.full(rpeaks.size, -1, dtype=np.int64)
    if beat_ann_idx.size == 0 or rpeaks.size == 0:
        return out
    pos = np.searchsorted(beat_ann_idx, rpeaks)
    lo = np.clip(pos - 1, 0, beat_ann_idx.size - 1)
    hi = np.clip(pos, 0, beat_ann_idx.size - 1)
    d_lo = np.abs(rpeaks - beat_ann_idx[lo])
    d_hi = np.abs(beat_ann_idx[hi] - rpeaks)
    best = np.where(d_hi < d_lo, hi, lo)
    dist = np.minimum(d_lo, d_hi)
    ok = dist <= tol_s * fs + 1e-9
    out[ok] = beat_ann_cls[best[ok]]
    return out


def extract_beats(window, rpeaks, labels, *, record: str = "", window_index: int = 0
                  ) -> list[Beat]:
    """Cut one beat per R-peak using the window's median R-R period.

    `labels` holds one class index per peak (negative drops the beat) or a
    single int applied to every peak (record-level labels, e.g. PTB).
    """
    rpeaks = np.asarray(rpeaks, dtype=np.int64)
    if rpeaks.size < 2:
        return []
    t = nominal_period(rpeaks)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), rpeaks.shape)
    beats = []
    for r, lab in zip(rpeaks, labels):
        if lab < 0:
            continue
        beats.append(Beat(segment_beat(window, int(r), t), int(lab), t,
                          (record, window_index, int(r))))
    return beats


def scale_to_voltage(beat) -> np.ndarray:
    x = np.asarray(beat, dtype=float)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise BeatError("beat values must lie in [0, 1]")
    return V_LOW + (V_HIGH - V_LOW) * x


def beats_from_record(record: Record, classes: Sequence[str], *,
                      record_label: str | None = None, channel: int | None = None
                      ) -> list[Beat]:
    """Run the full extraction chain over one record.

    With `record_label` set (PTB task), every detected peak gets that class and
    annotations are ignored; otherwise labels come from AAMI-mapped beat
    annotations.
    """
    ch = record.channel() if channel is None else channel
    x = resample(record.signals[ch], record.fs, FS)
    cls_index = {c: i for i, c in enumerate(classes)}
    if record_label is None:
        ann_idx, ann_cls = _beat_annotations(record.annotations, record.fs, cls_index)
    beats = []
    for w, seg in enumerate(window_10s(x)):
        xn, degenerate = normalize(seg)
        if degenerate:
            continue
        peaks = find_rpeaks(xn)
        if record_label is not None:
            labels = np.int64(cls_index[record_label])
        else:
            labels = label_peaks(peaks + w * WINDOW, ann_idx, ann_cls)
        beats.extend(extract_beats(xn, peaks, labels, record=record.name, window_index=w))
    return beats


def _beat_annotations(anns: Sequence[Annotation], fs_in: float, cls_index: dict
                      ) -> tuple[np.ndarray, np.ndarray]:
    idx, cls = [], []
    for a in anns:
        c = map_to_aami(a.symbol)
        if c is None or c not in cls_index:
            continue
        idx.append(a.sample_index * FS / fs_in)
        cls.append(cls_index[c])
    order = np.argsort(idx, kind="stable")
    return np.asarray(idx, dtype=float)[order], np.asarray(cls, dtype=np.int64)[order]


# ---------------------------------------------------------------------------
# Splits

MITBIH_TEST = (800, 800, 800, 800)
MITBIH_TARGET = (88069,) * 4
PTB_TEST = (809, 2102)  # (Healthy, MI)
PTB_TARGET = (8400, 8400)


@dataclass
class SplitConfig:
    test_counts: tuple[int, ...]
    oversample_target: tuple[int, ...]
    seed: int = 0
    val_fraction: float = 0.0

    @classmethod
    def mitbih(cls, seed: int = 0, val_fraction: float = 0.0) -> "SplitConfig":
        return cls(MITBIH_TEST, MITBIH_TARGET, seed, val_fraction)

    @classmethod
    def ptb(cls, seed: int = 0, val_fraction: float = 0.0) -> "SplitConfig":
        return cls(PTB_TEST, PTB_TARGET, seed, val_fraction)


@dataclass
class Splits:
    train: BeatSet
    val: BeatSet
    test: BeatSet
    config: SplitConfig
    source_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def manifest(self) -> dict:
        return {
            "seed": self.config.seed,
            "test_counts": self.config.test_counts and list(self.config.test_counts),
            "oversample_target": list(self.config.oversample_target),
            "val_fraction": self.config.val_fraction,
            "classes": list(self.test.classes),
            "source_counts": [int(c) for c in self.source_counts],
            "train_counts": [int(c) for c in self.train.counts()],
            "val_counts": [int(c) for c in self.val.counts()],
            "test_counts_actual": [int(c) for c in self.test.counts()],
            "test_sources": [[str(r), int(w), int(p)] for r, w, p in
                             zip(self.test.record, self.test.window, self.test.peak)],
        }


def make_splits(beats: BeatSet, config: SplitConfig, rng: np.random.Generator) -> Splits:
    """Test quota first, then a stratified validation hold-out, then oversampling.

    Only the train pool is oversampled; test and validation beats never reach it.
    """
    C = beats.num_classes
    if len(config.test_counts) != C or len(config.oversample_target) != C:
        raise BeatError("split config does not match the number of classes")
    counts = beats.counts()
    test_idx, val_idx, train_idx = [], [], []
    for c in range(C):
        idx = np.nonzero(beats.y == c)[0]
        if idx.size < config.test_counts[c]:
            raise BeatError(f"class {beats.classes[c]}: {idx.size} beats, "
                            f"test quota needs {config.test_counts[c]}")
        idx = rng.permutation(idx)
        t = config.test_counts[c]
        test_idx.append(np.sort(idx[:t]))
        rest = idx[t:]
        nv = int(round(config.val_fraction * rest.size))
        val_idx.append(np.sort(rest[:nv]))
        pool = rest[nv:]
        target = config.oversample_target[c]
        if pool.size > target:
            raise BeatError(f"class {beats.classes[c]}: train pool {pool.size} exceeds "
                            f"oversample target {target}")
        if pool.size == 0 and target > 0:
            raise BeatError(f"class {beats.classes[c]}: no beats left to oversample")
        extra = rng.choice(pool, size=target - pool.size, replace=True)
        train_idx.append(np.concatenate([pool, extra]))
    train = rng.permutation(np.concatenate(train_idx))
    return Splits(beats.take(train), beats.take(np.concatenate(val_idx)),
                  beats.take(np.concatenate(test_idx)), config, counts)


def split_and_oversample(beats: BeatSet, config: SplitConfig, rng: np.random.Generator
                         ) -> tuple[BeatSet, BeatSet]:
    cfg = SplitConfig(config.test_counts, config.oversample_target, config.seed, 0.0)
    s = make_splits(beats, cfg, rng)
    return s.train, s.test


# ---------------------------------------------------------------------------
# Beats CSV

def write_beats_csv(path, beats: BeatSet, sources: bool = True) -> None:
    """178 values + integer label per row; optional `<stem>.sources.csv` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row, lab in zip(beats.x, beats.y):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
    if sources:
        with open(_sources_path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["record", "window", "peak", "t_beat"])
            for r, wi, p, t in zip(beats.record, beats.window, beats.peak, beats.t_beat):
                w.writerow([r, int(wi), int(p), repr(float(t))])


def _sources_path(path: Path) -> Path:
    return path.with_name(path.stem + ".sources.csv")


def load_beats_csv(path, classes: Sequence[str]) -> BeatSet:
    path = Path(path)
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != BEAT_LEN + 1:
                raise BeatError(f"{path}:{lineno}: expected {BEAT_LEN + 1} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row[:BEAT_LEN]]
                lab = float(row[BEAT_LEN])
            except ValueError as exc:
                raise BeatError(f"{path}:{lineno}: non-numeric cell") from exc
            if lab != int(lab) or not 0 <= lab < len(classes):
                raise BeatError(f"{path}:{lineno}: label {row[BEAT_LEN]} outside [0, {len(classes)})")
            xs.append(vals)
            ys.append(int(lab))
    n = len(ys)
    x = np.asarray(xs, dtype=float).reshape(n, BEAT_LEN)
    src = _sources_path(path)
    if src.exists():
        with open(src, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != n:
            raise BeatError(f"{src}: {len(rows)} rows for {n} beats")
        return BeatSet(x, ys, [float(r["t_beat"]) for r in rows], [r["record"] for r in rows],
                       [int(r["window"]) for r in rows], [int(r["peak"]) for r in rows],
                       tuple(classes))
    return BeatSet(x, ys, np.zeros(n), [path.stem] * n, np.zeros(n, int), np.arange(n),
                   tuple(classes))


def write_manifest(path, splits: Splits) -> None:
    Path(path).write_text(json.dumps(splits.manifest(), indent=1) + "\n")
