"""Minimal WFDB reader: `.hea` headers, format-212 signals and MIT annotations.

Only what the MIT-BIH / PTB lead-II workflows need. Other storage formats
are rejected rather than guessed at.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_GAIN = 200.0
DEFAULT_FS = 250.0
SUPPORTED_FORMAT = 212

# MIT annotation codes -> mnemonic symbols (codes 15 and 17 are unassigned).
ANN_SYMBOLS = {
    0: " ", 1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s", 19: "T",
    20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^", 27: "t",
    28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]", 34: "e", 35: "n",
    36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63

# Beat (QRS) annotation symbols; everything else is rhythm/noise/comment.
BEAT_SYMBOLS = frozenset("NLRBAaJSVrFejnE/fQ?")

ARRHYTHMIA_CLASSES = ("N", "S", "V", "Q")
MI_CLASSES = ("Healthy", "MI")

# Annotation names grouped per AAMI EC57 class, one symbol per name.
AAMI_TABLE = {
    "N": {"Normal": "N", "Left bundle branch block": "L",
          "Right bundle branch block": "R", "Atrial escape": "e",
          "Nodal escape": "j"},
    "S": {"Atrial premature": "A", "Aberrant atrial premature": "a",
          "Nodal premature": "J", "Supraventricular premature": "S"},
    "V": {"Premature ventricular contraction": "V", "Ventricular escape": "E"},
    "Q": {"Paced": "/", "Fusion of paced and normal": "f", "Unclassifiable": "Q"},
}
SYMBOL_TO_AAMI = {sym: cls for cls, names in AAMI_TABLE.items() for sym in names.values()}


class WfdbError(ValueError):
    """Raised for malformed or unsupported WFDB input."""


class ChecksumError(WfdbError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    storage_format: int
    gain: float
    baseline: int
    units: str
    adc_resolution: int
    adc_zero: int
    initial_value: int
    checksum: int | None
    block_size: int
    description: str


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    num_signals: int
    sampling_rate: float
    num_samples: int
    signals: tuple[SignalSpec, ...]
    comments: tuple[str, ...] = ()


@dataclass(frozen=True)
class Annotation:
    sample_index: int
    symbol: str
    code: int
    channel: int = 0
    subtype: int = 0
    num: int = 0
    aux: bytes | None = None


@dataclass
class Record:
    header: RecordHeader
    signals: np.ndarray  # (num_signals, num_samples) in physical units (mV)
    annotations: list[Annotation] = field(default_factory=list)
    adc: np.ndarray | None = None

    @property
    def name(self) -> str:
        return self.header.record_name

    @property
    def fs(self) -> float:
        return self.header.sampling_rate

    def channel(self, preferred=("MLII", "II", "ii")) -> int:
        """Index of the first signal whose description matches a lead-II name, else 0."""
        for name in preferred:
            for i, sig in enumerate(self.header.signals):
                if sig.description.strip() == name:
                    return i
        return 0


# ---------------------------------------------------------------------------
# Header

_FMT_RE = re.compile(r"^(\d+)(?:x(\d+))?(?::(\d+))?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\((-?\d+)\))?(?:/(.*))?$")


def _int_field(fields: list[str], i: int, default: int) -> int:
    return int(fields[i]) if len(fields) > i else default


def parse_header(text: str) -> RecordHeader:
    lines = [ln.strip() for ln in text.splitlines()]
    comments = tuple(ln[1:].strip() for ln in lines if ln.startswith("#"))
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise WfdbError("empty header")

    rec = lines[0].split()
    if len(rec) < 2:
        raise WfdbError(f"malformed record line: {lines[0]!r}")
    name = rec[0].split("/")[0]
    try:
        nsig = int(rec[1])
        fs = float(rec[2].split("/")[0]) if len(rec) > 2 else DEFAULT_FS
        nsamp = int(rec[3]) if len(rec) > 3 else 0
    except ValueError as exc:
        raise WfdbError(f"malformed record line: {lines[0]!r}") from exc
    if nsig < 1:
        raise WfdbError(f"num_signals must be >= 1, got {nsig}")
    if fs <= 0:
        raise WfdbError(f"sampling_rate must be > 0, got {fs}")

    sig_lines = lines[1:]
    if len(sig_lines) != nsig:
        raise WfdbError(f"header declares {nsig} signals but has {len(sig_lines)} signal lines")

    signals = []
    for ln in sig_lines:
        f = ln.split(maxsplit=8)
        if len(f) < 2:
            raise WfdbError(f"malformed signal line: {ln!r}")
        m = _FMT_RE.match(f[1])
        if not m:
            raise WfdbError(f"malformed format field: {f[1]!r}")
        fmt = int(m.group(1))
        if fmt != SUPPORTED_FORMAT:
            raise WfdbError(f"unsupported storage format {fmt} (only 212 is supported)")
        gain, baseline, units = DEFAULT_GAIN, None, "mV"
        if len(f) > 2:
            g = _GAIN_RE.match(f[2])
            if not g:
                raise WfdbError(f"malformed gain field: {f[2]!r}")
            gain = float(g.group(1))
            if g.group(2) is not None:
                baseline = int(g.group(2))
            if g.group(3):
                units = g.group(3)
        if gain == 0:
            gain = DEFAULT_GAIN
        try:
            adc_res = _int_field(f, 3, 12)
            adc_zero = _int_field(f, 4, 0)
            init = _int_field(f, 5, adc_zero)
            cksum = int(f[6]) if len(f) > 6 else None
            blk = _int_field(f, 7, 0)
        except ValueError as exc:
            raise WfdbError(f"malformed signal line: {ln!r}") from exc
        signals.append(SignalSpec(
            file_name=f[0], storage_format=fmt, gain=gain,
            baseline=adc_zero if baseline is None else baseline, units=units,
            adc_resolution=adc_res, adc_zero=adc_zero, initial_value=init,
            checksum=cksum, block_size=blk,
            description=f[8] if len(f) > 8 else "",
        ))
    return RecordHeader(name, nsig, fs, nsamp, tuple(signals), comments)


# ---------------------------------------------------------------------------
# Format 212

def decode_format212(data: bytes, num_signals: int, num_samples: int) -> np.ndarray:
    """Unpack format-212 bytes into a (num_samples, num_signals) int array."""
    total = num_signals * num_samples
    need = (3 * total + 1) // 2
    padded = 3 * ((total + 1) // 2)
    if len(data) < need:
        raise WfdbError(f"truncated format-212 data: {len(data)} bytes, need {need}")
    if len(data) > padded:
        raise WfdbError(f"{len(data) - padded} trailing bytes beyond format-212 padding")

    raw = np.frombuffer(data, dtype=np.uint8)[:need]
    raw = np.concatenate([raw, np.zeros(padded - need, np.uint8)]).astype(np.int32)
    b = raw.reshape(-1, 3)
    out = np.empty(2 * len(b), dtype=np.int32)
    out[0::2] = b[:, 0] | ((b[:, 1] & 0x0F) << 8)
    out[1::2] = b[:, 2] | ((b[:, 1] & 0xF0) << 4)
    out = out[:total]
    out[out > 2047] -= 4096
    return out.reshape(num_samples, num_signals)


def encode_format212(samples: np.ndarray) -> bytes:
    """Pack interleaved 12-bit samples; used to build test fixtures."""
    s = np.asarray(samples, dtype=np.int64).ravel()
    if s.size and (s.min() < -2048 or s.max() > 2047):
        raise WfdbError("sample outside 12-bit range")
    if s.size % 2:
        s = np.append(s, 0)
    u = (s & 0xFFF).reshape(-1, 2)
    b = np.empty((len(u), 3), dtype=np.uint8)
    b[:, 0] = u[:, 0] & 0xFF
    b[:, 1] = ((u[:, 0] >> 8) & 0x0F) | ((u[:, 1] >> 4) & 0xF0)
    b[:, 2] = u[:, 1] & 0xFF
    nbytes = (3 * np.asarray(samples).size + 1) // 2
    return b.tobytes()[:nbytes]


def signal_checksum(adc: np.ndarray) -> int:
    """16-bit signed sum of raw ADC values, as stored in `.hea` files."""
    s = int(np.asarray(adc, dtype=np.int64).sum()) & 0xFFFF
    return s - 0x10000 if s >= 0x8000 else s


# ---------------------------------------------------------------------------
# Annotations

def parse_annotations(data: bytes) -> list[Annotation]:
    if len(data) % 2:
        data = data + b"\x00"
    words = np.frombuffer(data, dtype="<u2")
    anns: list[Annotation] = []
    t = 0
    chan = num = 0
    pending: dict | None = None

    def flush():
        if pending is not None:
            anns.append(Annotation(**pending))

    i = 0
    n = len(words)
    while i < n:
        w = int(words[i])
        code, interval = w >> 10, w & 0x3FF
        i += 1
        if w == 0:
            flush()
            return anns
        if code == SKIP:
            if i + 2 > n:
                break
            hi, lo = int(words[i]), int(words[i + 1])
            skip = (hi << 16) | lo
            if skip >= 1 << 31:
                skip -= 1 << 32
            t += skip
            i += 2
        elif code == NUM:
            num = interval - 1024 if interval > 511 else interval
            if pending is not None:
                pending["num"] = num
        elif code == SUB:
            if pending is not None:
                pending["subtype"] = interval - 1024 if interval > 511 else interval
        elif code == CHN:
            chan = interval
            if pending is not None:
                pending["channel"] = chan
        elif code == AUX:
            nbytes = interval
            nwords = (nbytes + 1) // 2
            if i + nwords > n:
                break
            if pending is not None:
                pending["aux"] = words[i:i + nwords].tobytes()[:nbytes]
            i += nwords
        else:
            flush()
            t += interval
            if t >= 1 << 31:
                raise WfdbError("annotation sample index overflow")
            pending = dict(sample_index=t, code=code,
                           symbol=ANN_SYMBOLS.get(code, f"[{code}]"),
                           channel=chan, num=num)
    raise WfdbError("annotation stream has no terminator")


def map_to_aami(symbol: str) -> str | None:
    """AAMI class for a beat symbol; None for non-beat annotations."""
    if symbol in SYMBOL_TO_AAMI:
        return SYMBOL_TO_AAMI[symbol]
    if symbol in BEAT_SYMBOLS:
        return "Q"
    return None


# ---------------------------------------------------------------------------
# Records

def load_record(path_prefix, strict: bool = False, annotator: str = "atr") -> Record:
    """Load `<prefix>.hea`, its format-212 signal file and `<prefix>.<annotator>`.

    Checksum or initial-value mismatches are logged; ``strict=True`` raises
    `ChecksumError` instead. A missing annotation file yields no annotations.
    """
    prefix = Path(path_prefix)
    header = parse_header(prefix.with_suffix(".hea").read_text())
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise WfdbError(f"{header.record_name}: multi-file records are not supported")
    data = (prefix.parent / files.pop()).read_bytes()
    adc = decode_format212(data, header.num_signals, header.num_samples).T

    for ch, spec in enumerate(header.signals):
        problems = []
        # headers in the wild store the 16-bit sum both signed and unsigned
        if spec.checksum is not None and (signal_checksum(adc[ch]) - spec.checksum) % 65536:
            problems.append(f"checksum {signal_checksum(adc[ch])} != header {spec.checksum}")
        if header.num_samples and adc[ch, 0] != spec.initial_value:
            problems.append(f"initial value {adc[ch, 0]} != header {spec.initial_value}")
        if problems:
            msg = f"{header.record_name} signal {ch}: " + "; ".join(problems)
            if strict:
                raise ChecksumError(msg)
            log.warning(msg)

    gains = np.array([s.gain for s in header.signals])[:, None]
    base = np.array([s.baseline for s in header.signals])[:, None]
    signals = (adc - base) / gains

    ann_path = prefix.with_suffix("." + annotator)
    anns = parse_annotations(ann_path.read_bytes()) if ann_path.exists() else []
    return Record(header, signals, anns, adc)


def read_diagnosis_table(path) -> dict[str, str]:
    """Sidecar CSV `record_name,label` with label in {MI, Healthy}."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "record_name":
                continue
            if len(row) != 2 or row[1] not in MI_CLASSES:
                raise WfdbError(f"bad diagnosis row {row!r} in {path}")
            out[row[0].strip()] = row[1].strip()
    return out
