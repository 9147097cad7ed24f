import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ekgnet.analog import (
    AnalogNetwork, MacConfig, agc, analog_forward, characterize_mac, hardware_rpeak_detect,
    mac_sequence, monte_carlo_accuracy,
)
from ekgnet.beats import find_rpeaks, normalize, resample, scale_to_voltage, window_10s
from ekgnet.model import ModelParams, NoiseModel, predict
from ekgnet.quant import build_codebook, decode, quantize
from ekgnet.synthetic import synth_ecg
from ekgnet.train import TrainConfig, train

from helpers import toy_beats

QUIET = MacConfig.noiseless()


def _qmodel(seed=0, C=4, scale=0.3):
    p = ModelParams.init(C, np.random.default_rng(seed), scale)
    return quantize(p, build_codebook(p))


def _beats(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 178))


# -- MAC ------------------------------------------------------------------

def test_mac_noiseless_centered_dot():
    rng = np.random.default_rng(0)
    w, x = rng.normal(size=20), rng.uniform(0.6, 0.7, 20)
    cfg = MacConfig.noiseless(v_ref=0.0)
    assert mac_sequence(w, x, cfg) == pytest.approx(np.dot(w, x - 0.65), abs=1e-15)


def test_mac_zero_weights_give_vref():
    assert mac_sequence(np.zeros(8), np.full(8, 0.7), QUIET) == 0.65


def test_mac_length_mismatch():
    with pytest.raises(ValueError):
        mac_sequence(np.zeros(3), np.zeros(4), QUIET)


def test_mac_config_validation():
    with pytest.raises(ValueError):
        MacConfig(sigma_w_rel=-1)
    with pytest.raises(ValueError):
        MacConfig(gain=0)
    assert QUIET.is_noiseless and not MacConfig().is_noiseless


@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_mac_shift_invariance(seed, n):
    rng = np.random.default_rng(seed)
    w, x = rng.normal(size=n), rng.uniform(0.6, 0.7, n)
    perm = rng.permutation(n)
    assert mac_sequence(w[perm], x[perm], QUIET) == pytest.approx(mac_sequence(w, x, QUIET),
                                                                   abs=1e-12)


def test_mac_noise_zero_mean_plus_leakage():
    rng = np.random.default_rng(1)
    n, trials = 6, 100_000
    cfg = MacConfig(leakage_per_step=1e-4, sigma_kernel_rel=0.0)
    w = np.broadcast_to(rng.uniform(-0.1, 0.1, n), (trials, n))
    x = np.broadcast_to(rng.uniform(0.6, 0.7, n), (trials, n))
    d = mac_sequence(w, x, cfg, rng, w_range=0.2) - mac_sequence(w, x, QUIET)
    se = d.std() / np.sqrt(trials)
    assert abs(d.mean() - n * 1e-4) < 3 * se


def test_mac_reproducible():
    w, x = np.full(5, 0.05), np.full(5, 0.68)
    a = mac_sequence(w, x, MacConfig(), np.random.default_rng(4))
    b = mac_sequence(w, x, MacConfig(), np.random.default_rng(4))
    assert a == b


def test_mac_needs_rng_when_noisy():
    with pytest.raises(ValueError):
        mac_sequence(np.ones(2), np.ones(2), MacConfig())


# -- network --------------------------------------------------------------

@pytest.mark.parametrize("C", [4, 2])
def test_noiseless_equivalence(C):
    q = _qmodel(3, C)
    x = _beats(500, 3)
    net = AnalogNetwork(q, QUIET)
    assert np.array_equal(net.predict(scale_to_voltage(x)), predict(decode(q), x))


def test_equivalence_survives_calibrated_gains():
    q = _qmodel(4)
    x = _beats(300, 4)
    net = AnalogNetwork(q, QUIET)
    gains = net.calibrate(scale_to_voltage(x))
    assert all(g > 0 for g in gains)
    assert np.array_equal(net.predict(scale_to_voltage(x)), predict(decode(q), x))


def test_calibration_hits_target_swing():
    q = _qmodel(5)
    v = scale_to_voltage(_beats(200, 5))
    net = AnalogNetwork(q, MacConfig())
    net.calibrate(v, 0.05)
    assert net.cfg == MacConfig()  # restored after the noiseless probe
    quiet = AnalogNetwork(q, QUIET, tuple(net.gains.values()))
    for layer in ("conv1", "conv2", "fc1", "fc2"):
        dev = np.abs(quiet._run(v, None, layer) - 0.65)
        assert np.percentile(dev, 99) == pytest.approx(0.05, rel=1e-9)


def test_zero_input_gives_vref_and_code_zero():
    q = _qmodel(6)
    out = analog_forward(q, np.full(178, 0.6), QUIET)
    assert np.all(out.node_voltages == 0.65) and out.class_code == 0


def test_analog_forward_matches_network_and_checks_shape():
    q = _qmodel(7)
    v = scale_to_voltage(_beats(1, 7)[0])
    out = analog_forward(q, v, QUIET)
    assert out.class_code == int(np.argmax(out.node_voltages))
    assert out.class_code in range(4)
    with pytest.raises(ValueError):
        analog_forward(q, np.zeros(177), QUIET)


def test_noisy_runs_are_seeded():
    q = _qmodel(8)
    v = scale_to_voltage(_beats(50, 8))
    a = monte_carlo_accuracy(q, v, None, MacConfig(), [1, 2], noise=NoiseModel())
    b = monte_carlo_accuracy(q, v, None, MacConfig(), [1, 2], noise=NoiseModel())
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_noise_barely_moves_a_trained_model():
    tr = toy_beats(40, seed=0)
    params, _ = train(TrainConfig(epochs=30, batch_size=16, seed=1, distill_weight=0.0), tr)
    q = quantize(params, build_codebook(params))
    te = toy_beats(50, seed=2)
    v = scale_to_voltage(te.x)
    quiet = AnalogNetwork(q, QUIET)
    gains = quiet.calibrate(v)
    ref = quiet.predict(v)
    rng = np.random.default_rng(0)
    noisy = AnalogNetwork(q, MacConfig(), gains, rng, NoiseModel()).predict(v, rng)
    assert not np.array_equal(quiet.run(v), AnalogNetwork(q, MacConfig(), gains, rng).run(v, rng))
    assert np.mean(noisy == ref) >= 0.95


# -- R-peak detector ------------------------------------------------------

def test_flat_signal_no_events():
    assert hardware_rpeak_detect(np.zeros(1000)).size == 0


def test_isolated_sample_needs_two_highs():
    x = np.zeros(100)
    x[50] = 1.0  # one rising gradient sample, then falling
    assert hardware_rpeak_detect(x, grad_threshold=0.5).size == 0
    x[51] = 2.0  # two consecutive rising samples
    assert hardware_rpeak_detect(x, grad_threshold=0.5).tolist() == [51]


def test_hysteresis_validation():
    with pytest.raises(ValueError):
        hardware_rpeak_detect(np.arange(10.0), hysteresis=(0.1, 0.2))


def test_periodic_input_and_refractory():
    x = np.zeros(1250)
    starts = np.arange(20, 1250, 100)
    for s in starts:
        x[s:s + 4] = [0.3, 0.6, 0.9, 1.0]
        x[s + 6:s + 9] = [0.4, 0.8, 1.0]  # second upstroke inside the refractory window
    ev = hardware_rpeak_detect(x)
    assert ev.size == starts.size
    assert np.all(np.diff(ev) > 25)


def test_agrees_with_software_detector_on_synthetic():
    rng = np.random.default_rng(12)
    sig, _, _ = synth_ecg(60, 360, rng, mix={"N": 1.0})
    agree = total = 0
    for w in window_10s(resample(sig, 360)):
        xn, _ = normalize(w)
        soft = find_rpeaks(xn)
        hard = hardware_rpeak_detect(xn)
        total += soft.size
        agree += sum(np.any(np.abs(hard - p) <= 12) for p in soft)
    assert total > 50 and agree / total >= 0.9


# -- AGC ------------------------------------------------------------------

def test_agc_cases():
    t = np.linspace(0, 1, 1000, endpoint=False)
    s = 0.01 * np.sin(2 * np.pi * 5 * t)
    assert agc(s, 0.1, [1, 2, 5, 10]) == (5, False)
    assert agc(10 * s, 0.1, [1, 2, 5, 10]) == (1, False)
    assert agc(s, 1.0, [1, 2, 5, 10]) == (10, True)
    with pytest.raises(ValueError):
        agc(s, 0.1, [])


# -- characterization -----------------------------------------------------

def test_characterize_noiseless_is_zero():
    r = characterize_mac(QUIET, 10_000)
    assert r["nrmse_weight_path"] == r["nrmse_input_path"] == r["nrmse_kernel"] == 0.0


@settings(max_examples=5, deadline=None)
@given(st.floats(0.001, 0.02), st.floats(0.001, 0.02), st.floats(0.0001, 0.01))
def test_characterize_recovers_knobs(sw, si, sk):
    cfg = MacConfig(sigma_w_rel=sw, sigma_in_rel=si, sigma_kernel_rel=sk)
    r = characterize_mac(cfg, 20_000, np.random.default_rng(0))
    assert r["nrmse_weight_path"] == pytest.approx(sw, rel=0.1)
    assert r["nrmse_input_path"] == pytest.approx(si, rel=0.1)
    assert r["nrmse_kernel"] == pytest.approx(sk, rel=0.1)
