"""Synthetic ECG records with per-beat morphology classes, plus a WFDB writer.

The records are not physiological; they give every pipeline stage something
with known R-peak positions and labels to chew on when the PhysioNet data is
not at hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .wfdb import ANN_SYMBOLS, AUX, SKIP, encode_format212, signal_checksum

CODES = {sym: code for code, sym in ANN_SYMBOLS.items()}

# (offset s, width s, amplitude mV) per wave; R is at offset 0. R heights are
# tuned so every class clears the 0.9 peak threshold after 125 Hz resampling.
MORPHOLOGY = {
    "N": [(-0.20, 0.025, 0.15), (-0.03, 0.010, -0.10), (0.0, 0.018, 1.0),
          (0.03, 0.010, -0.20), (0.25, 0.050, 0.30)],
    "A": [(-0.12, 0.020, -0.10), (-0.03, 0.010, -0.10), (0.0, 0.018, 1.0),
          (0.03, 0.010, -0.25), (0.22, 0.040, 0.20)],
    "V": [(-0.04, 0.030, -0.25), (0.0, 0.030, 1.15), (0.07, 0.035, -0.45),
          (0.28, 0.070, -0.35)],
    "/": [(-0.06, 0.003, 0.5), (0.0, 0.022, 1.05), (0.05, 0.025, -0.35),
          (0.30, 0.060, 0.25)],
}
RR_FACTOR = {"N": 1.0, "A": 0.7, "V": 0.75, "/": 1.0}


@dataclass
class SyntheticRecord:
    name: str
    fs: float
    signals: np.ndarray  # (nsig, n) mV
    ann_samples: np.ndarray
    ann_symbols: list[str]


def synth_ecg(duration_s: float, fs: float, rng: np.random.Generator,
              mix: dict[str, float] | None = None, rr_s: float = 0.8,
              noise_mv: float = 0.01, wander_mv: float = 0.02):
    """One lead of synthetic ECG. Returns (signal mV, R sample indices, symbols)."""
    mix = mix or {"N": 0.7, "A": 0.1, "V": 0.1, "/": 0.1}
    syms = list(mix)
    p = np.array([mix[s] for s in syms], dtype=float)
    p /= p.sum()
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    sig = np.zeros(n)
    r_times, labels = [], []
    tr = 0.5
    while True:
        sym = syms[rng.choice(len(syms), p=p)]
        tr_next = tr + rr_s * RR_FACTOR[sym] * rng.uniform(0.95, 1.05)
        if tr_next > duration_s - 0.6:
            break
        tr = tr_next
        r_times.append(tr)
        labels.append(sym)
        amp = rng.uniform(0.97, 1.03)
        for off, width, a in MORPHOLOGY[sym]:
            c = tr + off
            lo, hi = np.searchsorted(t, [c - 5 * width, c + 5 * width])
            sig[lo:hi] += amp * a * np.exp(-0.5 * ((t[lo:hi] - c) / width) ** 2)
    sig += wander_mv * np.sin(2 * np.pi * 0.2 * t + rng.uniform(0, 2 * np.pi))
    sig += noise_mv * rng.standard_normal(n)
    r_idx = np.round(np.asarray(r_times) * fs).astype(np.int64)
    return sig, r_idx, labels


def make_record(name: str, rng: np.random.Generator, duration_s: float = 60.0,
                fs: float = 360.0, mix=None, nsig: int = 2) -> SyntheticRecord:
    sig, r_idx, labels = synth_ecg(duration_s, fs, rng, mix)
    chans = [sig] + [0.5 * sig + 0.02 * rng.standard_normal(sig.size) for _ in range(nsig - 1)]
    return SyntheticRecord(name, fs, np.stack(chans), r_idx, labels)


# ---------------------------------------------------------------------------
# Writers (test fixtures only)

def encode_annotations(samples, symbols, aux: dict[int, bytes] | None = None) -> bytes:
    """MIT annotation bytes for (sample, symbol) pairs; `aux` maps list index -> bytes."""
    words: list[int] = []
    prev = 0
    for i, (s, sym) in enumerate(zip(samples, symbols)):
        d = int(s) - prev
        if d < 0:
            raise ValueError("annotation samples must be non-decreasing")
        if d > 1023:
            words += [SKIP << 10, (d >> 16) & 0xFFFF, d & 0xFFFF]
            d = 0
        words.append((CODES[sym] << 10) | d)
        prev = int(s)
        if aux and i in aux:
            b = aux[i]
            words.append((AUX << 10) | len(b))
            b = b + b"\x00" * (len(b) % 2)
            words += list(np.frombuffer(b, dtype="<u2"))
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


def write_wfdb(prefix, signals_mv: np.ndarray, fs: float, ann_samples=None,
               ann_symbols=None, gain: float = 200.0, baseline: int = 1024,
               descriptions=None, aux=None) -> None:
    """Write `.hea` + format-212 `.dat` (+ `.atr` when annotations are given)."""
    prefix = Path(prefix)
    name = prefix.name
    sig = np.atleast_2d(np.asarray(signals_mv, dtype=float))
    adc = np.clip(np.round(sig * gain) + baseline, -2048, 2047).astype(np.int64)
    nsig, n = adc.shape
    (prefix.parent / f"{name}.dat").write_bytes(encode_format212(adc.T))
    descriptions = descriptions or (["MLII"] + [f"V{i}" for i in range(1, nsig)])
    lines = [f"{name} {nsig} {fs:g} {n}"]
    for ch in range(nsig):
        lines.append(f"{name}.dat 212 {gain:g}({baseline}) 11 {baseline} {adc[ch, 0]} "
                     f"{signal_checksum(adc[ch])} 0 {descriptions[ch]}")
    prefix.with_suffix(".hea").write_text("\n".join(lines) + "\n")
    if ann_samples is not None:
        prefix.with_suffix(".atr").write_bytes(
            encode_annotations(ann_samples, ann_symbols, aux))


def write_synthetic_record(directory, rec: SyntheticRecord) -> Path:
    prefix = Path(directory) / rec.name
    # rhythm annotation at sample 0 exercises the AUX path
    samples = [0, *rec.ann_samples.tolist()]
    symbols = ["+", *rec.ann_symbols]
    write_wfdb(prefix, rec.signals, rec.fs, samples, symbols, aux={0: b"(N"})
    return prefix
