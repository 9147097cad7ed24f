import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ekgnet.beats import (
    BEAT_LEN, BeatError, BeatSet, SplitConfig, beats_from_record, extract_beats, find_rpeaks,
    label_peaks, load_beats_csv, make_splits, nominal_period, normalize, resample,
    scale_to_voltage, segment_beat, split_and_oversample, window_10s, write_beats_csv,
)
from ekgnet.synthetic import make_record
from ekgnet.wfdb import ARRHYTHMIA_CLASSES, Annotation, Record, RecordHeader

finite = st.floats(-1e3, 1e3, allow_nan=False)


# -- resampling / windows -------------------------------------------------

def test_resample_identity():
    x = np.random.default_rng(0).normal(size=50)
    assert np.array_equal(resample(x, 125, 125), x)


@given(st.floats(-5, 5), st.sampled_from([360, 1000, 250]), st.integers(2, 400))
def test_resample_constant(c, fs_in, n):
    y = resample(np.full(n, c), fs_in, 125)
    assert y.size == round(n * 125 / fs_in)
    assert np.allclose(y, c)


def test_resample_sine_against_analytic():
    t = np.arange(3600) / 360
    y = resample(np.sin(2 * np.pi * t), 360, 125)
    t_out = np.arange(y.size) / 125
    assert np.max(np.abs(y - np.sin(2 * np.pi * t_out))) < 0.01


def test_resample_errors():
    with pytest.raises(BeatError):
        resample([], 360)
    with pytest.raises(BeatError):
        resample([1.0, 2.0], 0)
    with pytest.raises(BeatError):
        resample([1.0, 2.0], 100, 125)


@pytest.mark.parametrize("n,windows", [(2500, 2), (1249, 0), (3000, 2)])
def test_windowing(n, windows):
    w = window_10s(np.arange(n))
    assert len(w) == windows
    assert all(len(x) == 1250 for x in w)
    if windows:
        assert w[-1][-1] == windows * 1250 - 1


# -- normalization / peaks ------------------------------------------------

def test_normalize_range():
    x, deg = normalize(np.linspace(-2, 2, 11))
    assert not deg and x.min() == 0.0 and x.max() == 1.0


def test_normalize_constant_is_degenerate():
    x, deg = normalize(np.full(7, 3.2))
    assert deg and not x.any()


@given(arrays(float, st.integers(2, 60), elements=finite), st.floats(0.1, 100),
       st.floats(-100, 100))
def test_normalize_affine_invariant(x, a, b):
    if np.ptp(x) < 1e-6:
        return
    assert np.allclose(normalize(a * x + b)[0], normalize(x)[0], atol=1e-9)


def test_no_peaks_on_monotone():
    assert find_rpeaks(np.linspace(0, 1, 50)).size == 0


def test_triangle_peak():
    x = np.concatenate([np.linspace(0, 1, 21), np.linspace(1, 0, 21)[1:]])
    assert find_rpeaks(x).tolist() == [20]


def test_bump_train_exact_peaks():
    t = np.arange(600)
    big = [100, 225, 350, 475]
    x = sum(np.exp(-0.5 * ((t - c) / 3) ** 2) for c in big)
    x = x + sum(0.3 * np.exp(-0.5 * ((t - c) / 3) ** 2) for c in [160, 290, 410])
    assert find_rpeaks(x).tolist() == big


@given(arrays(float, st.integers(3, 200), elements=st.floats(0, 1)))
def test_peaks_are_maxima_above_threshold(x):
    p = find_rpeaks(x)
    assert np.all(np.diff(p) > 0)
    for i in p:
        assert x[i] >= 0.9 and x[i] > x[i - 1] and x[i] >= x[i + 1]


# -- segmentation / labels ------------------------------------------------

def test_segment_arithmetic():
    w = np.linspace(0.01, 1, 1250)
    peaks = np.array([100, 225, 350, 475])
    assert nominal_period(peaks) == 125
    b = segment_beat(w, 100, 125)
    assert np.array_equal(b[:150], w[100:250])
    assert not b[150:].any() and b.size == BEAT_LEN


def test_segment_truncates_long_period():
    w = np.ones(1250)
    b = segment_beat(w, 0, 200)  # floor(240) > 178
    assert b.size == BEAT_LEN and b.all()


def test_segment_near_window_end_zero_padded():
    w = np.ones(1250)
    b = segment_beat(w, 1200, 125)
    assert b[:50].all() and not b[50:].any()


def test_single_peak_emits_nothing():
    assert extract_beats(np.ones(1250), [300], [0]) == []


def test_extract_drops_unlabeled_and_pads():
    w = np.random.default_rng(1).uniform(0.1, 1, 1250)
    beats = extract_beats(w, [100, 225, 350, 475], [0, -1, 2, 3], record="r", window_index=4)
    assert [b.label for b in beats] == [0, 2, 3]
    assert [b.source for b in beats] == [("r", 4, 100), ("r", 4, 350), ("r", 4, 475)]
    for b in beats:
        assert b.samples.size == BEAT_LEN and not b.samples[150:].any()


def test_label_nearest_within_tolerance():
    ann = np.array([100.0, 118.0, 400.0])
    cls = np.array([0, 2, 1])
    # 0.15 s at 125 Hz = 18.75 samples
    assert label_peaks([104, 115, 382, 430], ann, cls).tolist() == [0, 2, 1, -1]
    assert label_peaks([], ann, cls).size == 0
    assert label_peaks([5], np.array([]), np.array([])).tolist() == [-1]


def test_voltage_scale():
    assert np.allclose(scale_to_voltage([0.0, 0.5, 1.0]), [0.6, 0.65, 0.7])
    with pytest.raises(BeatError):
        scale_to_voltage([1.01])


def test_record_label_applies_to_all_peaks():
    rec = make_record("p1", np.random.default_rng(2), 30.0, 1000.0, nsig=1)
    header = RecordHeader("p1", 1, 1000.0, rec.signals.shape[1], ())
    beats = beats_from_record(Record(header, rec.signals), ("Healthy", "MI"), record_label="MI")
    assert beats and all(b.label == 1 for b in beats)


def test_annotation_labels_from_record():
    rec = make_record("a1", np.random.default_rng(5), 40.0)
    anns = [Annotation(int(s), sym, 0) for s, sym in zip(rec.ann_samples, rec.ann_symbols)]
    header = RecordHeader("a1", 2, 360.0, rec.signals.shape[1], ())
    beats = beats_from_record(Record(header, rec.signals, anns), ARRHYTHMIA_CLASSES, channel=0)
    aami = {"N": 0, "A": 1, "V": 2, "/": 3}
    truth = {int(round(s * 125 / 360)): aami[sym] for s, sym in zip(rec.ann_samples,
                                                                     rec.ann_symbols)}
    assert len(beats) > 0.8 * 32  # 4 windows of about 8 beats
    for b in beats:
        r = b.source[1] * 1250 + b.source[2]
        near = min(truth, key=lambda t: abs(t - r))
        assert abs(near - r) <= 2 and truth[near] == b.label
        assert b.samples.min() >= 0 and b.samples.max() <= 1


# -- splits ---------------------------------------------------------------

def _beatset(counts, seed=0):
    rng = np.random.default_rng(seed)
    n = sum(counts)
    y = np.repeat(np.arange(len(counts)), counts)
    return BeatSet(rng.uniform(0, 1, (n, BEAT_LEN)), y, np.full(n, 125.0),
                   [f"r{i % 7}" for i in range(n)], np.arange(n) // 7, np.arange(n),
                   tuple("NSVQ"[:len(counts)]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(5, 40), min_size=2, max_size=4), st.integers(0, 2**32 - 1),
       st.floats(0, 0.3))
def test_split_properties(counts, seed, vf):
    beats = _beatset(counts)
    test = [min(c, 3) for c in counts]
    target = [60] * len(counts)
    s = make_splits(beats, SplitConfig(tuple(test), tuple(target), seed, vf),
                    np.random.default_rng(seed))
    assert s.train.counts().tolist() == target
    assert s.test.counts().tolist() == test
    tr, te, va = set(s.train.source_keys()), set(s.test.source_keys()), set(s.val.source_keys())
    assert not tr & te and not tr & va and not te & va
    assert len(set(s.test.source_keys())) == len(s.test)


def test_balanced_input_train_is_permutation():
    beats = _beatset([10, 10])
    tr, te = split_and_oversample(beats, SplitConfig((2, 2), (8, 8)), np.random.default_rng(0))
    assert sorted(tr.source_keys()) == sorted(set(beats.source_keys()) - set(te.source_keys()))


def test_split_deterministic():
    beats = _beatset([30, 20, 12, 9])
    cfg = SplitConfig((4, 4, 4, 4), (50, 50, 50, 50), 0, 0.1)
    a = make_splits(beats, cfg, np.random.default_rng(7))
    b = make_splits(beats, cfg, np.random.default_rng(7))
    assert a.train.source_keys() == b.train.source_keys()
    assert a.manifest() == b.manifest()


def test_split_insufficient():
    with pytest.raises(BeatError, match="test quota"):
        make_splits(_beatset([3, 10]), SplitConfig((5, 5), (20, 20)), np.random.default_rng(0))


# -- CSV ------------------------------------------------------------------

def test_csv_roundtrip(tmp_path):
    beats = _beatset([4, 3])
    write_beats_csv(tmp_path / "b.csv", beats)
    back = load_beats_csv(tmp_path / "b.csv", beats.classes)
    assert np.array_equal(back.x, beats.x) and np.array_equal(back.y, beats.y)
    assert back.source_keys() == beats.source_keys()


def test_csv_zero_row(tmp_path):
    p = tmp_path / "z.csv"
    p.write_text(",".join(["0"] * BEAT_LEN + ["0"]) + "\n")
    b = load_beats_csv(p, ARRHYTHMIA_CLASSES)[0]
    assert b.label == 0 and not b.samples.any()


@pytest.mark.parametrize("row,match", [
    (["0"] * 177 + ["0"], "columns"),
    (["0"] * 178 + ["4"], "label"),
    (["x"] + ["0"] * 177 + ["0"], "non-numeric"),
])
def test_csv_errors(tmp_path, row, match):
    p = tmp_path / "bad.csv"
    p.write_text(",".join(row) + "\n")
    with pytest.raises(BeatError, match=match):
        load_beats_csv(p, ARRHYTHMIA_CLASSES)
