"""Adam training of EKGNet with hardware weight noise and optional distillation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .beats import BeatSet
from .metrics import balanced_accuracy
from .model import (
    ModelParams, NoiseModel, arch_metadata, backward, ce_batch, distill_batch, forward,
    predict,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.003
    halve_every: int = 50
    weight_decay: float = 1e-4
    epochs: int = 150
    batch_size: int = 128
    distill_temperature: float = 1.5
    distill_weight: float = 0.5  # only used when teacher logits are supplied
    init_scale: float = 0.1
    reparam_grad: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.distill_temperature <= 0:
            raise ValueError("distillation temperature must be positive")
        if not 0.0 <= self.distill_weight <= 1.0:
            raise ValueError("distill_weight must lie in [0, 1]")


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * 0.5 ** (epoch // config.halve_every)


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(params.map(np.zeros_like), params.map(np.zeros_like))


def adam_step(state: AdamState, params: ModelParams, grads: ModelParams, lr: float,
              weight_decay: float = 0.0) -> tuple[AdamState, ModelParams]:
    """Adam with L2 decay folded into the gradient. Returns new state and params."""
    b1, b2, t = state.beta1, state.beta2, state.step + 1
    g = grads.map(lambda gr, w: gr + weight_decay * w, params)
    m = state.m.map(lambda m_, g_: b1 * m_ + (1 - b1) * g_, g)
    v = state.v.map(lambda v_, g_: b2 * v_ + (1 - b2) * g_ * g_, g)
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = params.map(lambda w, m_, v_: w - lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps), m, v)
    return AdamState(m, v, t, b1, b2, state.eps), new


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, lr: float, loss: float, val: float | None) -> None:
        self.rows.append({"epoch": epoch, "lr": lr, "train_loss": loss,
                          "val_balanced_acc": val})

    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["epoch", "lr", "train_loss", "val_balanced_acc"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if v is None else repr(v)) for k, v in r.items()})


class TrainingError(RuntimeError):
    pass


def train(config: TrainConfig, train_beats: BeatSet, val_beats: BeatSet | None = None,
          teacher_logits: dict[str, np.ndarray] | None = None,
          noise: NoiseModel | None = None, init: ModelParams | None = None,
          ) -> tuple[ModelParams, History]:
    """Minibatch Adam over `train_beats`; returns the best-validation parameters.

    Teacher logits are keyed by beat source key (`record:window:peak`).
    """
    noise = NoiseModel() if noise is None else noise
    rng = np.random.default_rng(config.seed)
    C = train_beats.num_classes
    params = init.copy() if init is not None else ModelParams.init(C, rng, config.init_scale)
    state = AdamState.zeros_like(params)

    lam = config.distill_weight
    teacher = None
    if lam > 0:
        if teacher_logits is None:
            raise TrainingError("distill_weight > 0 but no teacher logits supplied")
        keys = train_beats.source_keys()
        missing = [k for k in keys if k not in teacher_logits]
        if missing:
            raise TrainingError(f"{len(missing)} training beats lack teacher logits, "
                                f"e.g. {missing[0]}")
        teacher = np.stack([teacher_logits[k] for k in keys])

    x_all, y_all = train_beats.x, train_beats.y
    n = len(y_all)
    hist = History()
    best, best_val = params.copy(), -1.0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            x = x_all[idx].astype(float)
            logits, cache = forward(params, x, noise, rng)
            if teacher is None:
                loss, dl = ce_batch(logits, y_all[idx])
            else:
                loss, dl = distill_batch(logits, teacher[idx], y_all[idx],
                                         config.distill_temperature, lam)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            grads = backward(params, cache, dl, noise, config.reparam_grad)
            state, params = adam_step(state, params, grads, lr, config.weight_decay)
            total += loss * len(idx)
        val = None
        if val_beats is not None and len(val_beats):
            val = balanced_accuracy(val_beats.y, predict(params, val_beats.x), C)
            if val > best_val:
                best, best_val = params.copy(), val
        hist.add(epoch, lr, total / n, val)
        log.info("epoch %d lr %.6g loss %.5f val %s", epoch, lr, total / n, val)
    if val_beats is None or not len(val_beats):
        best = params
    return best, hist


# ---------------------------------------------------------------------------
# Persistence

def save_checkpoint(path, params: ModelParams, metadata: dict | None = None) -> None:
    doc = {"arch": arch_metadata(params.num_classes),
           "tensors": {k: v.tolist() for k, v in params.tensors().items()},
           "metadata": metadata or {}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    params = ModelParams(**{k: np.asarray(doc["tensors"][k], dtype=float)
                            for k in ("conv1", "conv2", "fc1", "fc2")})
    params.validate()
    return params, doc.get("metadata", {})


def read_teacher_logits(path) -> dict[str, np.ndarray]:
    """CSV rows `beat_id, logit_0, ..., logit_{C-1}` (optional header)."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "beat_id":
                continue
            out[row[0]] = np.array([float(v) for v in row[1:]])
    return out


def config_dict(cfg) -> dict:
    return asdict(cfg)
