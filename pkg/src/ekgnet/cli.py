"""Command-line entry point.

    ekgnet run --config exp.json [--seed N] [--out DIR]
    ekgnet characterize-mac --trials 100000

Every failure exits nonzero with one JSON line on stderr:
``{"error": "<kind>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .analog import AnalogNetwork, characterize_mac
from .beats import (
    BeatSet, load_beats_csv, make_splits, scale_to_voltage, write_beats_csv,
    write_manifest,
)
from .experiment import (
    ExperimentConfig, StageError, TASKS, derive_seed, finetune_eval_fn, ingest_and_extract,
    run_experiment,
)
from .metrics import Metrics, metrics_from_predictions, write_confusion_csv
from .model import predict
from .quant import (
    build_codebook, decode, finetune, load_quantized, quantize, save_quantized,
    write_finetune_log,
)
from .train import TrainConfig, load_checkpoint, read_teacher_logits, save_checkpoint, train
from .wfdb import load_record


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "task", None):
        cfg.task = args.task
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(doc: dict, out: Path | None, name: str) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if out is not None:
        (out / name).write_text(text)
    sys.stdout.write(text)


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _model_for_eval(path):
    """Float checkpoint or quantized model file -> float parameters."""
    doc = json.loads(Path(path).read_text())
    if "codes" in doc:
        return decode(load_quantized(path))
    return load_checkpoint(path)[0]


# ---------------------------------------------------------------------------
# Subcommands

def cmd_ingest(args):
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    for prefix in args.record:
        rec = load_record(prefix, strict=args.strict)
        rows.append({"record": rec.name, "sampling_rate": rec.fs,
                     "num_signals": rec.header.num_signals,
                     "num_samples": rec.header.num_samples,
                     "signals": [s.description for s in rec.header.signals],
                     "annotations": len(rec.annotations)})
    _emit({"records": rows}, out, "ingest.json")


def cmd_extract(args):
    cfg = _load_config(args)
    if args.record:
        cfg.records = list(args.record)
    cfg.validate()
    out = _out_dir(args, cfg)
    beats = ingest_and_extract(cfg)
    write_beats_csv(out / "beats.csv", beats)
    doc = {**_stamp(cfg), "beats": len(beats),
           "counts": dict(zip(beats.classes, map(int, beats.counts())))}
    if args.split:
        sc = cfg.split_config()
        splits = make_splits(beats, sc, np.random.default_rng(sc.seed))
        write_manifest(out / "split_manifest.json", splits)
        for name in ("train", "val", "test"):
            write_beats_csv(out / f"{name}.csv", getattr(splits, name))
        doc["split"] = {k: [int(c) for c in getattr(splits, k).counts()]
                        for k in ("train", "val", "test")}
    _emit(doc, out, "extract.json")


def _beats(path, cfg) -> BeatSet:
    return load_beats_csv(path, cfg.classes)


def cmd_train(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    tr = _beats(args.train, cfg)
    val = _beats(args.val, cfg) if args.val else None
    teacher = read_teacher_logits(args.teacher) if args.teacher else None
    overrides = {"seed": derive_seed(cfg.seed, "train")}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if teacher is None:
        overrides["distill_weight"] = 0.0
    tcfg = TrainConfig(**{**asdict(cfg.train), **overrides})
    params, hist = train(tcfg, tr, val, teacher, cfg.noise)
    save_checkpoint(out / "model_float.json", params, {**_stamp(cfg), "config": asdict(tcfg)})
    hist.write_csv(out / "history.csv")
    _emit({**_stamp(cfg), "epochs": len(hist.rows), "final_loss": hist.rows[-1]["train_loss"]
           if hist.rows else None, "params": params.num_params()}, out, "train.json")


def cmd_quantize(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    params, _ = load_checkpoint(args.model)
    q = quantize(params, build_codebook(params, args.bits or cfg.quant.bits))
    save_quantized(out / "model_quantized.json", q, _stamp(cfg))
    _emit({**_stamp(cfg), "bits": q.codebook.bits, "w_max": q.codebook.w_max},
          out, "quantize.json")


def cmd_finetune(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    q0 = load_quantized(args.model)
    val = _beats(args.val, cfg)
    iters = cfg.quant.finetune_iters if args.iters is None else args.iters
    q, trace, steps = finetune(q0, finetune_eval_fn(val), iters,
                               np.random.default_rng(derive_seed(cfg.seed, "finetune")))
    save_quantized(out / "model_finetuned.json", q,
                   {**_stamp(cfg), "val_before": trace[0], "val_after": trace[-1]})
    write_finetune_log(out / "finetune_log.csv", steps)
    _emit({**_stamp(cfg), "iterations": iters, "val_before": trace[0], "val_after": trace[-1],
           "accepted": sum(s.accepted for s in steps)}, out, "finetune.json")


def cmd_simulate(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    q = load_quantized(args.model)
    beats = _beats(args.beats, cfg)
    volts = scale_to_voltage(beats.x)
    gains = None
    if cfg.analog.calibrate:
        cal = _beats(args.calibrate, cfg) if args.calibrate else beats
        gains = AnalogNetwork(q, cfg.mac).calibrate(scale_to_voltage(cal.x),
                                                    cfg.analog.target_swing)
    seeds = cfg.analog.seeds if args.seeds is None else args.seeds
    base = derive_seed(cfg.seed, "analog")
    accs, total = [], np.zeros((len(cfg.classes),) * 2, dtype=np.int64)
    for k in range(seeds):
        rng = np.random.default_rng([base, k])
        net = AnalogNetwork(q, cfg.mac, gains, rng, cfg.noise)
        m = metrics_from_predictions(beats.y, net.predict(volts, rng), cfg.classes)
        accs.append(round(m.balanced_accuracy, 12))
        total += m.confusion
    if seeds:
        write_confusion_csv(out / "confusion_analog.csv", Metrics(total, cfg.classes))
    _emit({**_stamp(cfg), "seeds": seeds, "balanced_accuracy_per_seed": accs,
           "balanced_accuracy_mean": round(float(np.mean(accs)), 12) if accs else None,
           "balanced_accuracy_sd": round(float(np.std(accs, ddof=1)), 12)
           if len(accs) > 1 else 0.0,
           "layer_gains": list(gains) if gains else None}, out, "simulate.json")


def cmd_characterize(args):
    cfg = _load_config(args) if args.config else ExperimentConfig()
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    rep = characterize_mac(cfg.mac, args.trials, np.random.default_rng(seed), args.w_max)
    _emit({**rep, "seed": seed}, out, "mac_nrmse.json")


def cmd_eval(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    params = _model_for_eval(args.model)
    beats = _beats(args.beats, cfg)
    m = metrics_from_predictions(beats.y, predict(params, beats.x), cfg.classes)
    write_confusion_csv(out / "confusion.csv", m)
    _emit({**_stamp(cfg), "model": str(args.model), **m.to_dict()}, out, "eval.json")


def cmd_run(args):
    if not args.config:
        raise CliError("usage", "run needs --config")
    cfg = _load_config(args)
    metrics = run_experiment(cfg)
    summary = {k: metrics[k]["balanced_accuracy"] for k in ("float", "quantized", "finetuned")}
    summary["analog_mean"] = metrics["analog"]["balanced_accuracy_mean"]
    sys.stdout.write(json.dumps({"out_dir": cfg.out_dir, "balanced_accuracy": summary}) + "\n")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--task", choices=sorted(TASKS))
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ekgnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="parse WFDB records")
    s.add_argument("record", nargs="+", help="record path prefix (no extension)")
    s.add_argument("--strict", action="store_true", help="fail on checksum mismatch")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("extract", parents=[common], help="records -> beats CSV")
    s.add_argument("--record", nargs="+")
    s.add_argument("--split", action="store_true", help="also write train/val/test CSVs")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", parents=[common], help="train the float model")
    s.add_argument("--train", required=True, help="training beats CSV")
    s.add_argument("--val", help="validation beats CSV")
    s.add_argument("--teacher", help="teacher logits CSV")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("quantize", parents=[common], help="6-bit weight quantization")
    s.add_argument("--model", required=True)
    s.add_argument("--bits", type=int)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("finetune", parents=[common], help="single-weight code search")
    s.add_argument("--model", required=True, help="quantized model JSON")
    s.add_argument("--val", required=True)
    s.add_argument("--iters", type=int)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("simulate", parents=[common], help="analog Monte Carlo accuracy")
    s.add_argument("--model", required=True, help="quantized model JSON")
    s.add_argument("--beats", required=True)
    s.add_argument("--calibrate", help="beats CSV for gain calibration (default: --beats)")
    s.add_argument("--seeds", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("characterize-mac", parents=[common], help="MAC NRMSE report")
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--w-max", type=float, default=0.1)
    s.set_defaults(func=cmd_characterize)

    s = sub.add_parser("eval", parents=[common], help="float or quantized model metrics")
    s.add_argument("--model", required=True)
    s.add_argument("--beats", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", parents=[common], help="full experiment")
    s.set_defaults(func=cmd_run)
    return p


def _fail(kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())})
                     + "\n")
    return 2 if kind == "usage" else 1


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", exc.filename or str(exc).strip("'"))
    except StageError as exc:
        return _fail(f"stage:{exc.stage}", f"{type(exc.cause).__name__}: {exc.cause}")
    except (ValueError, KeyError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
