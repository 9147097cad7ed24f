"""6-bit uniform weight quantization and single-weight stochastic fine-tuning."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .model import ModelParams, arch_metadata


@dataclass(frozen=True)
class Codebook:
    bits: int
    w_max: float

    @property
    def num_levels(self) -> int:
        return 2 ** self.bits

    @property
    def step(self) -> float:
        return 2 * self.w_max / (self.num_levels - 1)

    @property
    def levels(self) -> np.ndarray:
        # symmetric by construction: levels[i] == -levels[n-1-i]
        n = self.num_levels
        return self.step * (np.arange(n) - (n - 1) / 2)


def build_codebook(params: ModelParams, bits: int = 6) -> Codebook:
    """One global symmetric grid spanning [-max|w|, +max|w|]."""
    flat = params.flat()
    if not np.all(np.isfinite(flat)):
        raise ValueError("cannot quantize non-finite weights")
    w_max = float(np.abs(flat).max())
    if w_max == 0:
        raise ValueError("cannot build a codebook for an all-zero model")
    return Codebook(bits, w_max)


@dataclass
class QuantizedModel:
    codes: dict[str, np.ndarray]  # int arrays, entries in [0, 2**bits)
    codebook: Codebook
    arch: dict = field(default_factory=dict)

    def copy(self) -> "QuantizedModel":
        return QuantizedModel({k: v.copy() for k, v in self.codes.items()}, self.codebook,
                              dict(self.arch))

    def weight_ids(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, idx) for k, v in self.codes.items() for idx in np.ndindex(v.shape)]

    @property
    def num_weights(self) -> int:
        return sum(v.size for v in self.codes.values())


def quantize_array(w, codebook: Codebook) -> np.ndarray:
    """Nearest level index; exact midpoints go to the lower code."""
    u = (np.asarray(w, dtype=float) + codebook.w_max) / codebook.step
    codes = np.ceil(u - 0.5).astype(np.int64)
    return np.clip(codes, 0, codebook.num_levels - 1)


def quantize(params: ModelParams, codebook: Codebook) -> QuantizedModel:
    return QuantizedModel({k: quantize_array(v, codebook) for k, v in params.tensors().items()},
                          codebook, arch_metadata(params.num_classes))


def decode_codes(codes: dict[str, np.ndarray], codebook: Codebook) -> dict[str, np.ndarray]:
    levels = codebook.levels
    out = {}
    for k, c in codes.items():
        c = np.asarray(c)
        if c.size and (c.min() < 0 or c.max() >= codebook.num_levels):
            raise ValueError(f"{k}: code outside [0, {codebook.num_levels})")
        out[k] = levels[c]
    return out


def decode(qmodel: QuantizedModel) -> ModelParams:
    return ModelParams(**decode_codes(qmodel.codes, qmodel.codebook))


@dataclass
class FinetuneStep:
    iteration: int
    weight_id: str
    direction: int
    acc_before: float
    acc_after: float
    accepted: bool


def finetune(qmodel: QuantizedModel, eval_fn: Callable[[QuantizedModel], float], E: int,
             rng: np.random.Generator) -> tuple[QuantizedModel, list[float], list[FinetuneStep]]:
    """Random single-weight +/-1 code moves, reverted only when accuracy drops.

    A move that would leave the code range is a no-op trial and is kept.
    Returns (model, accepted accuracy after each iteration incl. start, log).
    """
    if E < 0:
        raise ValueError("E must be >= 0")
    q = qmodel.copy()
    ids = q.weight_ids()
    top = q.codebook.num_levels - 1
    acc = float(eval_fn(q))
    trace = [acc]
    steps = []
    for e in range(1, E + 1):
        name, idx = ids[rng.integers(len(ids))]
        direction = 1 if rng.integers(2) else -1
        old = int(q.codes[name][idx])
        new = min(max(old + direction, 0), top)
        wid = f"{name}{list(idx)}"
        if new == old:
            steps.append(FinetuneStep(e, wid, direction, acc, acc, True))
            trace.append(acc)
            continue
        q.codes[name][idx] = new
        acc_new = float(eval_fn(q))
        accepted = not acc_new < acc
        if accepted:
            steps.append(FinetuneStep(e, wid, direction, acc, acc_new, True))
            acc = acc_new
        else:
            q.codes[name][idx] = old
            steps.append(FinetuneStep(e, wid, direction, acc, acc_new, False))
        trace.append(acc)
    return q, trace, steps


# ---------------------------------------------------------------------------
# Persistence

def save_quantized(path, q: QuantizedModel, metadata: dict | None = None) -> None:
    doc = {"bits": q.codebook.bits, "w_max": q.codebook.w_max, "arch": q.arch,
           "codes": {k: v.tolist() for k, v in q.codes.items()},
           "metadata": metadata or {}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_quantized(path) -> QuantizedModel:
    doc = json.loads(Path(path).read_text())
    cb = Codebook(int(doc["bits"]), float(doc["w_max"]))
    q = QuantizedModel({k: np.asarray(v, dtype=np.int64) for k, v in doc["codes"].items()},
                       cb, doc.get("arch", {}))
    decode_codes(q.codes, cb)  # range check
    return q


def write_finetune_log(path, steps: list[FinetuneStep]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "weight_id", "direction", "acc_before", "acc_after",
                    "accepted"])
        for s in steps:
            w.writerow([s.iteration, s.weight_id, "up" if s.direction > 0 else "down",
                        repr(s.acc_before), repr(s.acc_after), int(s.accepted)])
