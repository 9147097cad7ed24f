"""Build tests/data WFDB fixtures with the reference `wfdb` package.

The fixture files are written by wfdb's own writers and the expected values
are read back with wfdb's readers, so the bundled expectations do not depend
on ekgnet's parser or encoders.

    python scripts/make_fixture.py
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import wfdb

from ekgnet.synthetic import synth_ecg

OUT = Path(__file__).resolve().parents[1] / "tests" / "data"


def digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<i2").tobytes()).hexdigest()


def build(name, nsig, seconds, fs, seed, skip_gap=False):
    rng = np.random.default_rng(seed)
    sig, r_idx, labels = synth_ecg(seconds, fs, rng)
    n = sig.size
    if n % 2 == 0 and nsig == 1:
        sig, n = sig[:-1], n - 1  # odd total exercises the 212 half-group padding
    chans = [sig] + [0.6 * sig + 0.03 * rng.standard_normal(n) for _ in range(nsig - 1)]
    p = np.stack(chans, axis=1)
    wfdb.wrsamp(name, fs=fs, units=["mV"] * nsig,
                sig_name=["MLII"] + [f"V{i}" for i in range(1, nsig)],
                p_signal=p, fmt=["212"] * nsig, adc_gain=[200.0] * nsig,
                baseline=[1024] * nsig, write_dir=str(OUT))

    pairs = [(int(s), str(sym)) for s, sym in zip(r_idx, labels) if s < n]
    if skip_gap:
        # a > 1023-sample gap forces a SKIP pseudo-annotation
        pairs = [(s, sym) for s, sym in pairs if s < 2000 or s > 4000]
    samples = [0] + [s for s, _ in pairs]
    symbols = ["+"] + [sym for _, sym in pairs]
    aux = ["(N"] + [""] * len(pairs)
    wfdb.wrann(name, "atr", np.asarray(samples), symbol=symbols, aux_note=aux,
               write_dir=str(OUT))

    rec_d = wfdb.rdrecord(str(OUT / name), physical=False)
    rec_p = wfdb.rdrecord(str(OUT / name))
    ann = wfdb.rdann(str(OUT / name), "atr")
    return {
        "record": name,
        "num_signals": rec_d.n_sig,
        "sampling_rate": rec_d.fs,
        "num_samples": rec_d.sig_len,
        "adc_sha256": [digest(rec_d.d_signal[:, c]) for c in range(rec_d.n_sig)],
        "adc_head": [rec_d.d_signal[:16, c].tolist() for c in range(rec_d.n_sig)],
        "physical_head": [rec_p.p_signal[:16, c].tolist() for c in range(rec_p.n_sig)],
        "checksum": list(rec_d.checksum),
        "annotation_count": len(ann.sample),
        "annotation_samples": ann.sample.tolist(),
        "annotation_symbols": list(ann.symbol),
        "annotation_aux": list(ann.aux_note),
        "wfdb_version": wfdb.__version__,
    }


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    expected = [
        build("fx100", 2, 60.0, 360, seed=100),
        build("fx101", 1, 45.0, 360, seed=101, skip_gap=True),
    ]
    (OUT / "fixture_expected.json").write_text(json.dumps(expected, indent=1) + "\n")
    print("wrote", [e["record"] for e in expected])
