"""End-to-end runs: ingest -> extract -> split -> train -> quantize -> fine-tune -> evaluate."""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analog import AnalogNetwork, MacConfig
from .beats import BeatSet, SplitConfig, beats_from_record, load_beats_csv, make_splits
from .beats import scale_to_voltage, write_beats_csv, write_manifest
from .metrics import Metrics, metrics_from_predictions, write_confusion_csv
from .model import NoiseModel, predict
from .quant import (
    build_codebook, decode, finetune, quantize, save_quantized, write_finetune_log,
)
from .train import TrainConfig, read_teacher_logits, save_checkpoint, train
from .wfdb import ARRHYTHMIA_CLASSES, MI_CLASSES, load_record, read_diagnosis_table

log = logging.getLogger(__name__)

TASKS = {"mitbih": ARRHYTHMIA_CLASSES, "ptb": MI_CLASSES}
STAGE_IDS = {"split": 1, "train": 2, "finetune": 3, "analog": 4}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")


@dataclass
class QuantConfig:
    bits: int = 6
    finetune_iters: int = 5000


@dataclass
class AnalogConfig:
    seeds: int = 10
    calibrate: bool = True
    target_swing: float = 0.05


@dataclass
class ExperimentConfig:
    task: str = "mitbih"
    records: list[str] = field(default_factory=list)
    data_dir: str | None = None
    beats_csv: str | None = None
    diagnosis_csv: str | None = None
    teacher_logits: str | None = None
    strict_checksum: bool = False
    split: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    mac: MacConfig = field(default_factory=MacConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    analog: AnalogConfig = field(default_factory=AnalogConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    @property
    def classes(self) -> tuple[str, ...]:
        return TASKS[self.task]

    def split_config(self) -> SplitConfig:
        base = SplitConfig.mitbih() if self.task == "mitbih" else SplitConfig.ptb()
        s = self.split
        return SplitConfig(tuple(s.get("test_counts", base.test_counts)),
                           tuple(s.get("oversample_target", base.oversample_target)),
                           derive_seed(self.seed, "split"), s.get("val_fraction", 0.1))

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        sc = self.split_config()
        C = len(self.classes)
        if len(sc.test_counts) != C or len(sc.oversample_target) != C:
            raise ValueError(f"task {self.task} has {C} classes; split counts disagree")
        paths = list(self.records) + [p for p in (self.data_dir, self.beats_csv,
                                                  self.diagnosis_csv, self.teacher_logits) if p]
        for p in paths:
            if p in self.records:
                if not Path(p).with_suffix(".hea").exists():
                    raise FileNotFoundError(f"{p}.hea")
            elif not Path(p).exists():
                raise FileNotFoundError(p)
        if not (self.records or self.data_dir or self.beats_csv):
            raise ValueError("config needs records, data_dir or beats_csv")
        if self.task == "ptb" and not self.beats_csv and not self.diagnosis_csv:
            raise ValueError("ptb task needs diagnosis_csv")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"], d["noise"], d["mac"] = asdict(self.train), asdict(self.noise), self.mac.to_dict()
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        nested = {"train": TrainConfig, "noise": NoiseModel, "mac": MacConfig,
                  "quant": QuantConfig, "analog": AnalogConfig}
        for k, typ in nested.items():
            if k in d:
                sub = dict(d[k])
                if k == "noise" and "sigma_coeffs" in sub:
                    sub["sigma_coeffs"] = tuple(sub["sigma_coeffs"])
                d[k] = typ(**sub)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(str(path))
        doc = json.loads(path.read_text())
        cfg = cls.from_dict(doc)
        base = path.parent
        # relative paths (data and output) resolve against the config file
        if "out_dir" in doc:
            cfg.out_dir = str(_resolve(base, cfg.out_dir))
        cfg.records = [str(_resolve(base, r)) for r in cfg.records]
        for k in ("data_dir", "beats_csv", "diagnosis_csv", "teacher_logits"):
            v = getattr(cfg, k)
            if v:
                setattr(cfg, k, str(_resolve(base, v)))
        return cfg


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def derive_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, STAGE_IDS[stage]]).generate_state(1)[0])


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# Stages

def record_prefixes(cfg: ExperimentConfig) -> list[Path]:
    prefixes = [Path(r) for r in cfg.records]
    if cfg.data_dir:
        # PTB ships one directory per patient; MIT-BIH extras (x_mitdb/) sit below the top level
        pattern = "**/*.hea" if cfg.task == "ptb" else "*.hea"
        prefixes += sorted(p.with_suffix("") for p in Path(cfg.data_dir).glob(pattern))
    return prefixes


def ingest_and_extract(cfg: ExperimentConfig) -> BeatSet:
    classes = cfg.classes
    if cfg.beats_csv:
        return load_beats_csv(cfg.beats_csv, classes)
    diag = read_diagnosis_table(cfg.diagnosis_csv) if cfg.task == "ptb" else None
    sets = []
    for prefix in record_prefixes(cfg):
        rec = load_record(prefix, strict=cfg.strict_checksum)
        if diag is not None:
            label = diag.get(rec.name)
            if label is None:
                log.info("skipping %s: no diagnosis", rec.name)
                continue
            beats = beats_from_record(rec, classes, record_label=label)
        else:
            beats = beats_from_record(rec, classes)
        log.info("%s: %d beats", rec.name, len(beats))
        sets.append(BeatSet.from_beats(beats, classes))
    if not sets:
        raise ValueError("no records produced beats")
    return BeatSet.concat(sets)


def finetune_eval_fn(val: BeatSet):
    def eval_fn(q) -> float:
        m = metrics_from_predictions(val.y, predict(decode(q), val.x), val.classes)
        return m.balanced_accuracy
    return eval_fn


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every stage and write artifacts under `cfg.out_dir`. Returns the metrics dict."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    incomplete = out / "INCOMPLETE"
    incomplete.write_text("running\n")
    stamp = {"config_hash": cfg.hash(), "seed": cfg.seed}
    timings = {}
    stage = "validate"

    def mark(name):
        nonlocal stage
        timings[stage] = round(time.perf_counter() - t0, 3)
        stage = name

    t0 = time.perf_counter()
    try:
        cfg.validate()
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
        classes = cfg.classes

        mark("extract")
        t0 = time.perf_counter()
        beats = ingest_and_extract(cfg)
        write_beats_csv(out / "beats.csv", beats)

        mark("split")
        t0 = time.perf_counter()
        sc = cfg.split_config()
        splits = make_splits(beats, sc, np.random.default_rng(sc.seed))
        write_manifest(out / "split_manifest.json", splits)
        write_beats_csv(out / "val.csv", splits.val)
        write_beats_csv(out / "test.csv", splits.test)

        mark("train")
        t0 = time.perf_counter()
        teacher = read_teacher_logits(cfg.teacher_logits) if cfg.teacher_logits else None
        overrides = {"seed": derive_seed(cfg.seed, "train")}
        if teacher is None:
            overrides["distill_weight"] = 0.0  # no teacher: plain cross-entropy
        tcfg = TrainConfig(**{**asdict(cfg.train), **overrides})
        params, hist = train(tcfg, splits.train, splits.val, teacher, cfg.noise)
        save_checkpoint(out / "model_float.json", params,
                        {**stamp, "config": asdict(tcfg), "epoch": len(hist.rows),
                         "val_metric": max((r["val_balanced_acc"] or 0) for r in hist.rows)
                         if hist.rows else None})
        hist.write_csv(out / "history.csv")

        mark("quantize")
        t0 = time.perf_counter()
        q0 = quantize(params, build_codebook(params, cfg.quant.bits))
        save_quantized(out / "model_quantized.json", q0, stamp)

        mark("finetune")
        t0 = time.perf_counter()
        eval_fn = finetune_eval_fn(splits.val if len(splits.val) else splits.train)
        q, trace, steps = finetune(q0, eval_fn, cfg.quant.finetune_iters,
                                   np.random.default_rng(derive_seed(cfg.seed, "finetune")))
        save_quantized(out / "model_finetuned.json", q,
                       {**stamp, "val_before": trace[0], "val_after": trace[-1]})
        write_finetune_log(out / "finetune_log.csv", steps)

        mark("evaluate")
        t0 = time.perf_counter()
        test = splits.test
        results: dict = {}
        for name, p in (("float", params), ("quantized", decode(q0)), ("finetuned", decode(q))):
            m = metrics_from_predictions(test.y, predict(p, test.x), classes)
            results[name] = m.to_dict()
            write_confusion_csv(out / f"confusion_{name}.csv", m)
        results["analog"] = analog_evaluation(q, test, splits.val, cfg, out)

        metrics = {**stamp, "task": cfg.task, "classes": list(classes),
                   "counts": {"train": len(splits.train), "val": len(splits.val),
                              "test": len(test)},
                   **results}
        (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
        mark("done")
    except Exception as exc:
        incomplete.write_text(f"stage={stage}\ncause={type(exc).__name__}: {exc}\n")
        raise StageError(stage, exc) from exc
    incomplete.unlink()
    (out / "run_log.json").write_text(json.dumps(
        {**stamp, "version": version_string(), "stage_seconds": timings,
         "seeds": {k: derive_seed(cfg.seed, k) for k in STAGE_IDS}}, indent=1) + "\n")
    return metrics


def analog_evaluation(q, test: BeatSet, calib: BeatSet, cfg: ExperimentConfig, out: Path
                      ) -> dict:
    volts = scale_to_voltage(test.x)
    gains = None
    if cfg.analog.calibrate:
        cal = calib if len(calib) else test
        gains = AnalogNetwork(q, cfg.mac).calibrate(scale_to_voltage(cal.x),
                                                    cfg.analog.target_swing)
    quiet = AnalogNetwork(q, MacConfig.noiseless(v_ref=cfg.mac.v_ref,
                                                 input_center=cfg.mac.input_center), gains)
    m0 = metrics_from_predictions(test.y, quiet.predict(volts), test.classes)
    write_confusion_csv(out / "confusion_analog_noiseless.csv", m0)

    base = derive_seed(cfg.seed, "analog")
    per_seed, total = [], np.zeros_like(m0.confusion)
    for k in range(cfg.analog.seeds):
        rng = np.random.default_rng([base, k])
        net = AnalogNetwork(q, cfg.mac, gains, rng, cfg.noise)
        m = metrics_from_predictions(test.y, net.predict(volts, rng), test.classes)
        per_seed.append(round(m.balanced_accuracy, 12))
        total += m.confusion
    write_confusion_csv(out / "confusion_analog.csv", Metrics(total, test.classes))
    return {"noiseless": m0.to_dict(),
            "layer_gains": None if gains is None else [float(g) for g in gains],
            "balanced_accuracy_per_seed": per_seed,
            "balanced_accuracy_mean": round(float(np.mean(per_seed)), 12) if per_seed else None,
            "balanced_accuracy_sd": round(float(np.std(per_seed, ddof=1)), 12)
            if len(per_seed) > 1 else 0.0,
            "mac": cfg.mac.to_dict()}
