"""Behavioral model of the analog classifier datapath.

Values on the analog side are node voltages. A MAC node holds
``v_ref + gain * sum(w * dx)`` where ``dx`` is the input deviation from its
zero reference: 0.6 V for the ECG input (the 0.6-0.7 V input range encodes
[0, 1]) and ``v_ref`` for internal nodes. ReLU clamps at ``v_ref``; max
pooling and the final max function act on raw node voltages.

Circuit timing (parallel MACs, sample delays, capacitor ping-pong) is not
modeled, only the arithmetic and its noise.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .beats import V_HIGH, V_LOW, WINDOW
from .model import CONV_CHANNELS, INPUT_LEN, KERNEL, POOL, STRIDE, NoiseModel
from .quant import QuantizedModel, decode

INPUT_RANGE = V_HIGH - V_LOW  # 0.1 V
INPUT_ZERO = V_LOW
LAYERS = ("conv1", "conv2", "fc1", "fc2")


@dataclass(frozen=True)
class MacConfig:
    v_ref: float = 0.65
    gain: float = 1.0
    sigma_w_rel: float = 0.0036
    sigma_in_rel: float = 0.0062
    sigma_kernel_rel: float = 0.0002
    leakage_per_step: float = 0.0
    input_center: float = 0.65
    input_range: float = INPUT_RANGE
    w_range: float | None = None  # weight full-scale span; None -> 2 * max|w|

    def __post_init__(self):
        if min(self.sigma_w_rel, self.sigma_in_rel, self.sigma_kernel_rel) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.gain <= 0:
            raise ValueError("gain must be positive")

    @classmethod
    def noiseless(cls, **kw) -> "MacConfig":
        return cls(sigma_w_rel=0.0, sigma_in_rel=0.0, sigma_kernel_rel=0.0,
                   leakage_per_step=0.0, **kw)

    @property
    def is_noiseless(self) -> bool:
        return not (self.sigma_w_rel or self.sigma_in_rel or self.sigma_kernel_rel
                    or self.leakage_per_step)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HardwareOutput:
    class_code: int
    node_voltages: np.ndarray


def _w_range(cfg: MacConfig, weights) -> float:
    if cfg.w_range is not None:
        return cfg.w_range
    return 2.0 * float(np.max(np.abs(weights))) if np.size(weights) else 0.0


def draw_mismatch(weights, cfg: MacConfig, rng: np.random.Generator, w_range=None):
    """Static per-weight mismatch, drawn once per simulated chip."""
    wr = _w_range(cfg, weights) if w_range is None else w_range
    shape = np.shape(weights)
    if cfg.sigma_kernel_rel == 0:
        return np.zeros(shape)
    return rng.normal(0.0, cfg.sigma_kernel_rel * wr, shape)


def mac_sequence(weights, inputs, cfg: MacConfig, rng: np.random.Generator | None = None,
                 *, x_center: float | None = None, mismatch=None, w_range=None,
                 gain: float | None = None):
    """Accumulate ``gain * (w + noise) * (x - center + noise)`` onto ``v_ref``.

    Operates on the last axis; leading axes broadcast so one call can evaluate
    many MAC units at once. Weight-path noise is redrawn on every product,
    `mismatch` is the static part.
    """
    w = np.asarray(weights, dtype=float)
    x = np.asarray(inputs, dtype=float)
    if w.shape[-1] != x.shape[-1]:
        raise ValueError(f"length mismatch: {w.shape[-1]} weights vs {x.shape[-1]} inputs")
    center = cfg.input_center if x_center is None else x_center
    g = cfg.gain if gain is None else gain
    n = w.shape[-1]
    dx = x - center
    if cfg.is_noiseless:
        return cfg.v_ref + g * np.sum(w * dx, axis=-1)
    if rng is None:
        raise ValueError("noisy MAC needs an rng")
    wr = _w_range(cfg, w) if w_range is None else w_range
    shape = np.broadcast_shapes(w.shape, x.shape)
    if mismatch is None:
        mismatch = draw_mismatch(w, cfg, rng, wr)
    w_eff = w + mismatch
    if cfg.sigma_w_rel:
        w_eff = w_eff + rng.normal(0.0, cfg.sigma_w_rel * wr, shape)
    if cfg.sigma_in_rel:
        dx = dx + rng.normal(0.0, cfg.sigma_in_rel * cfg.input_range, shape)
    return cfg.v_ref + g * np.sum(w_eff * dx, axis=-1) + n * cfg.leakage_per_step


# ---------------------------------------------------------------------------
# Network dataflow

class AnalogNetwork:
    """A quantized EKGNet mapped onto MAC units with per-layer conversion gains.

    `layer_gains` scale each layer's accumulated current into volts (the
    feedback-resistor choice); `calibrate` picks them so node swings use the
    input range. The static mismatch is drawn at construction from `rng`.
    """

    def __init__(self, qmodel: QuantizedModel, cfg: MacConfig = MacConfig(),
                 layer_gains=None, rng: np.random.Generator | None = None,
                 noise: NoiseModel | None = None):
        self.q = qmodel
        self.weights = decode(qmodel).tensors()
        self.cfg = cfg
        self.w_range = cfg.w_range if cfg.w_range is not None else 2 * qmodel.codebook.w_max
        self.gains = dict(zip(LAYERS, layer_gains or (cfg.gain,) * 4))
        self.noise = noise
        if cfg.sigma_kernel_rel and rng is not None:
            self.mismatch = {k: draw_mismatch(w, cfg, rng, self.w_range)
                             for k, w in self.weights.items()}
        else:
            self.mismatch = {k: np.zeros_like(w) for k, w in self.weights.items()}

    @property
    def num_classes(self) -> int:
        return self.weights["fc2"].shape[0]

    def _mac(self, layer, w, x, rng, x_center):
        return mac_sequence(w, x, self.cfg, rng, x_center=x_center,
                            mismatch=self.mismatch[layer].reshape(w.shape),
                            w_range=self.w_range, gain=self.gains[layer])

    def _run(self, v, rng, stop: str | None = None):
        cfg, W = self.cfg, self.weights
        vref = cfg.v_ref

        # conv1: taps (B, 87, 1, K) against kernels (C, K)
        w1 = W["conv1"][:, 0, :]
        taps = sliding_window_view(v, KERNEL, axis=-1)[:, ::STRIDE, :][:, :, None, :]
        n1 = self._mac("conv1", w1, taps, rng, cfg.input_center)
        # input zero sits at 0.6 V; fold the centering offset back in
        n1 = n1 + self.gains["conv1"] * (cfg.input_center - INPUT_ZERO) * w1.sum(axis=1)
        if stop == "conv1":
            return n1
        n1 = np.maximum(n1, vref)  # (B, 87, C)

        # conv2: channel-major taps (B, 41, 36)
        win = sliding_window_view(n1, KERNEL, axis=1)[:, ::STRIDE]  # (B, 41, C, K)
        taps2 = win.reshape(*win.shape[:2], CONV_CHANNELS * KERNEL)
        w2 = W["conv2"].reshape(1, CONV_CHANNELS * KERNEL)
        n2 = self._mac("conv2", w2, taps2[:, :, None, :], rng, vref)[..., 0]
        if stop == "conv2":
            return n2
        n2 = np.maximum(n2, vref)  # (B, 41)

        # peak detectors
        pooled = sliding_window_view(n2, POOL, axis=-1)[:, ::STRIDE].max(axis=-1)  # (B, 18)

        n3 = self._mac("fc1", W["fc1"], pooled[:, None, :], rng, vref)  # (B, 12)
        if stop == "fc1":
            return n3
        n4 = self._mac("fc2", W["fc2"], n3[:, None, :], rng, vref)  # (B, C)
        if self.noise is not None and self.noise.output_leakage and rng is not None:
            n4 = n4 + rng.normal(self.noise.leakage_mean, self.noise.leakage_sd, n4.shape)
        return n4

    def run(self, beats_v, rng: np.random.Generator | None = None) -> np.ndarray:
        """Output node voltages for (B, 178) input voltages."""
        v = np.asarray(beats_v, dtype=float)
        if v.ndim != 2 or v.shape[-1] != INPUT_LEN:
            raise ValueError(f"beats must have shape (B, {INPUT_LEN}), got {v.shape}")
        return self._run(v, rng)

    def predict(self, beats_v, rng: np.random.Generator | None = None,
                batch: int = 1024) -> np.ndarray:
        beats_v = np.asarray(beats_v, dtype=float)
        out = np.empty(len(beats_v), dtype=np.int64)
        for s in range(0, len(beats_v), batch):
            out[s:s + batch] = self.run(beats_v[s:s + batch], rng).argmax(axis=1)
        return out

    def calibrate(self, beats_v, target_swing: float = 0.05, pct: float = 99.0
                  ) -> tuple[float, ...]:
        """Set per-layer gains so the `pct` percentile node deviation hits `target_swing`.

        Runs noiselessly, one layer at a time, each with the gains fixed so far.
        """
        v = np.asarray(beats_v, dtype=float)
        saved, self.cfg = self.cfg, MacConfig.noiseless(
            v_ref=self.cfg.v_ref, input_center=self.cfg.input_center)
        try:
            for layer in LAYERS:
                self.gains[layer] = 1.0
                s = float(np.percentile(np.abs(self._run(v, None, layer) - self.cfg.v_ref),
                                        pct))
                self.gains[layer] = target_swing / s if s > 0 else 1.0
        finally:
            self.cfg = saved
        return tuple(self.gains[k] for k in LAYERS)


def analog_forward(qmodel: QuantizedModel, beat, cfg: MacConfig = MacConfig(),
                   rng: np.random.Generator | None = None, *, layer_gains=None,
                   network: AnalogNetwork | None = None) -> HardwareOutput:
    """Classify one beat given in volts; returns the 2-bit code and output nodes."""
    beat = np.asarray(beat, dtype=float)
    if beat.shape != (INPUT_LEN,):
        raise ValueError(f"beat must have shape ({INPUT_LEN},), got {beat.shape}")
    net = network or AnalogNetwork(qmodel, cfg, layer_gains, rng)
    nodes = net.run(beat[None], rng)[0]
    return HardwareOutput(int(np.argmax(nodes)), nodes)


def monte_carlo_accuracy(qmodel: QuantizedModel, beats_v, labels, cfg: MacConfig,
                         seeds, *, layer_gains=None, noise: NoiseModel | None = None,
                         num_classes: int | None = None) -> list[np.ndarray]:
    """Predicted codes for each seed; each seed is an independent chip + noise draw."""
    preds = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        net = AnalogNetwork(qmodel, cfg, layer_gains, rng, noise)
        preds.append(net.predict(beats_v, rng))
    return preds


# ---------------------------------------------------------------------------
# Front end: R-peak detector and automatic gain control

def hardware_rpeak_detect(samples, grad_threshold: float | None = None,
                          hysteresis: tuple[float, float] | None = None,
                          refractory: int = 25, calibration: int = WINDOW) -> np.ndarray:
    """Gradient comparator with Schmitt hysteresis at 125 S/s.

    The comparator output goes high when the sample-to-sample gradient exceeds
    the high threshold and low when it falls under the low one. An event is
    emitted on the second consecutive high output, then suppressed for
    `refractory` samples. Without explicit thresholds the high threshold is
    60% of the largest gradient in the first `calibration` samples and the low
    threshold half of that.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        return np.zeros(0, dtype=np.int64)
    grad = np.diff(x)
    if hysteresis is not None:
        high, low = hysteresis
    else:
        if grad_threshold is None:
            g = grad[:calibration]
            grad_threshold = 0.6 * float(g.max()) if g.size else 0.0
        if grad_threshold <= 0:  # nothing rises in the calibration window
            return np.zeros(0, dtype=np.int64)
        high, low = grad_threshold, 0.5 * grad_threshold
    if not high > low:
        raise ValueError("hysteresis needs high > low")

    events = []
    state = False
    run = 0
    last = -refractory - 1
    for i, g in enumerate(grad, start=1):
        if g > high:
            state = True
        elif g < low:
            state = False
        run = run + 1 if state else 0
        if run == 2 and i - last > refractory:
            events.append(i)
            last = i
    return np.asarray(events, dtype=np.int64)


def agc(signal, target_amplitude: float, gain_ladder) -> tuple[float, bool]:
    """First ladder gain whose peak-to-valley output reaches the target.

    Returns (gain, saturated); saturated means the ladder ran out.
    """
    ladder = list(gain_ladder)
    if not ladder:
        raise ValueError("empty gain ladder")
    x = np.asarray(signal, dtype=float)
    ptp = float(x.max() - x.min())
    for g in ladder:
        # comparator resolution: treat a 1e-12 relative shortfall as reached
        if g * ptp >= target_amplitude * (1 - 1e-12):
            return g, False
    return ladder[-1], True


# ---------------------------------------------------------------------------
# MAC characterization

def characterize_mac(cfg: MacConfig = MacConfig(), trials: int = 100_000,
                     rng: np.random.Generator | None = None, w_max: float = 0.1) -> dict:
    """Monte Carlo NRMSE of single products against the ideal product.

    Each path is swept with only its own noise source active and normalized by
    the full-scale output span of the sweep:

    * weight path: w uniform over [-w_max, w_max], input at full scale;
    * input path: input uniform over the input range, weight at w_max;
    * kernel: weight and input fixed, a fresh static mismatch per position,
      normalized by the weight-sweep span.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    wr = cfg.w_range if cfg.w_range is not None else 2 * w_max
    base = replace(cfg, w_range=wr, leakage_per_step=0.0)
    x_fs = cfg.input_center + cfg.input_range / 2
    d_fs = x_fs - cfg.input_center

    def run(c, w, x):
        out = mac_sequence(w[:, None], x[:, None], c, rng,
                           mismatch=np.zeros((len(w), 1)) if not c.sigma_kernel_rel else None)
        ideal = c.v_ref + c.gain * w * (x - c.input_center)
        return out - ideal

    only_w = replace(base, sigma_in_rel=0.0, sigma_kernel_rel=0.0)
    w = rng.uniform(-w_max, w_max, trials)
    e_w = run(only_w, w, np.full(trials, x_fs))
    span_w = cfg.gain * wr * abs(d_fs)

    only_x = replace(base, sigma_w_rel=0.0, sigma_kernel_rel=0.0)
    x = rng.uniform(cfg.input_center - cfg.input_range / 2,
                    cfg.input_center + cfg.input_range / 2, trials)
    e_x = run(only_x, np.full(trials, w_max), x)
    span_x = cfg.gain * w_max * cfg.input_range

    only_k = replace(base, sigma_w_rel=0.0, sigma_in_rel=0.0)
    e_k = run(only_k, np.full(trials, w_max), np.full(trials, x_fs))

    def nrmse(e, span):
        return float(np.sqrt(np.mean(e * e)) / span) if span > 0 else 0.0

    res = {"nrmse_weight_path": nrmse(e_w, span_w),
           "nrmse_input_path": nrmse(e_x, span_x),
           "nrmse_kernel": nrmse(e_k, span_w)}
    # Gaussian errors: relative standard error of an RMS estimate is ~1/sqrt(2N)
    half = 1.96 / np.sqrt(2 * trials)
    ci = {k: [v * (1 - half), v * (1 + half)] for k, v in res.items()}
    return {**res, "ci95": ci, "trials": trials, "cfg": base.to_dict(), "w_max": w_max}
