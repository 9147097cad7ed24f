"""Write a small synthetic WFDB corpus plus a matching experiment config.

    python scripts/make_synthetic_corpus.py OUT_DIR [--records 4] [--seconds 120]

Then: ekgnet run --config OUT_DIR/experiment.json
"""

import argparse
import json
from pathlib import Path

import numpy as np

from ekgnet.synthetic import make_record, write_synthetic_record

MIX = {"N": 0.4, "A": 0.2, "V": 0.2, "/": 0.2}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--records", type=int, default=4)
    ap.add_argument("--seconds", type=float, default=120.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--test-per-class", type=int, default=20)
    ap.add_argument("--train-per-class", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()

    out = Path(args.out)
    (out / "records").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.records):
        rec = make_record(f"syn{i:03d}", rng, args.seconds, 360.0, MIX)
        write_synthetic_record(out / "records", rec)

    cfg = {
        "task": "mitbih",
        "data_dir": "records",
        "split": {"test_counts": [args.test_per_class] * 4,
                  "oversample_target": [args.train_per_class] * 4,
                  "val_fraction": 0.1},
        "train": {"epochs": args.epochs, "batch_size": 64},
        "quant": {"finetune_iters": 200},
        "analog": {"seeds": 3},
        "seed": args.seed,
        "out_dir": "run",
    }
    (out / "experiment.json").write_text(json.dumps(cfg, indent=1) + "\n")
    print(out / "experiment.json")


if __name__ == "__main__":
    main()
