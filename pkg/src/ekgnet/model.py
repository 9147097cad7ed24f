"""EKGNet: a bias-free two-conv / two-FC network and its hand-written gradients.

Layout (input length 178):

    conv1 6x1x6 /2 -> 87x6 -> ReLU -> conv2 1x6x6 /2 -> 41 -> ReLU
    -> maxpool 6 /2 -> 18 -> fc1 12x18 -> fc2 Cx12 -> logits

All batched code takes inputs of shape (B, 178). Weight noise is sampled per
beat, so effective weights carry a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

INPUT_LEN = 178
CONV_CHANNELS = 6
KERNEL = 6
STRIDE = 2
POOL = 6
HIDDEN = 12
TENSORS = ("conv1", "conv2", "fc1", "fc2")


def out_len(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


CONV1_LEN = out_len(INPUT_LEN, KERNEL, STRIDE)  # 87
CONV2_LEN = out_len(CONV1_LEN, KERNEL, STRIDE)  # 41
POOL_LEN = out_len(CONV2_LEN, POOL, STRIDE)  # 18


def arch_metadata(num_classes: int) -> dict:
    return {"input_len": INPUT_LEN, "channels": [1, CONV_CHANNELS, 1],
            "kernel": KERNEL, "strides": [STRIDE, STRIDE], "pool": [POOL, STRIDE],
            "classes": num_classes}


class ShapeError(ValueError):
    pass


@dataclass
class ModelParams:
    conv1: np.ndarray  # (6, 1, 6)
    conv2: np.ndarray  # (1, 6, 6)
    fc1: np.ndarray  # (12, 18)
    fc2: np.ndarray  # (C, 12)

    @classmethod
    def shapes(cls, num_classes: int) -> dict[str, tuple[int, ...]]:
        return {"conv1": (CONV_CHANNELS, 1, KERNEL), "conv2": (1, CONV_CHANNELS, KERNEL),
                "fc1": (HIDDEN, POOL_LEN), "fc2": (num_classes, HIDDEN)}

    @classmethod
    def init(cls, num_classes: int, rng: np.random.Generator, scale: float = 0.1
             ) -> "ModelParams":
        return cls(**{k: rng.uniform(-scale, scale, s)
                      for k, s in cls.shapes(num_classes).items()})

    @classmethod
    def zeros(cls, num_classes: int) -> "ModelParams":
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(num_classes).items()})

    @property
    def num_classes(self) -> int:
        return self.fc2.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        return ModelParams(**{k: fn(v, *(o.tensors()[k] for o in others))
                              for k, v in self.tensors().items()})

    def copy(self) -> "ModelParams":
        return self.map(np.array)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors().values()])

    def validate(self) -> None:
        for k, s in self.shapes(self.num_classes).items():
            if getattr(self, k).shape != s:
                raise ShapeError(f"{k}: expected {s}, got {getattr(self, k).shape}")
            if not np.all(np.isfinite(getattr(self, k))):
                raise ShapeError(f"{k}: non-finite weights")


# ---------------------------------------------------------------------------
# Layers (single instance; also accept a leading batch axis on the input)

def conv1d(x: np.ndarray, w: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    """Valid, bias-free 1-D convolution. x: (..., L, Cin), w: (Cout, Cin, K)."""
    x = np.asarray(x, dtype=float)
    cout, cin, k = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, weights expect {cin}")
    if x.shape[-2] < k:
        raise ShapeError(f"input length {x.shape[-2]} shorter than kernel {k}")
    p = _patches(x, k, stride)
    return p @ w.reshape(cout, cin * k).T


def relu(x):
    return np.maximum(x, 0.0)


def maxpool1d(x: np.ndarray, k: int = POOL, stride: int = STRIDE
              ) -> tuple[np.ndarray, np.ndarray]:
    """Max over windows; argmax is the offset inside each window (first max wins)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < k:
        raise ShapeError(f"input length {x.shape[-1]} shorter than pool {k}")
    win = sliding_window_view(x, k, axis=-1)[..., ::stride, :]
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], -1)[..., 0], arg


def dense(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input size {x.shape[-1]} vs weights {w.shape}")
    return x @ w.T


def _patches(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(..., L, C) -> (..., L', C*K) with channel-major, tap-minor ordering."""
    win = sliding_window_view(x, k, axis=-2)[..., ::stride, :, :]
    return win.reshape(*win.shape[:-2], win.shape[-2] * k)


# ---------------------------------------------------------------------------
# Noise model

@dataclass
class NoiseModel:
    """Weight noise sd is a quadratic in the weight value (volts); logits get leakage."""

    sigma_coeffs: tuple[float, float, float] = (0.0021090, 0.0002000, 0.002355)
    leakage_mean: float = 0.0005
    leakage_sd: float = 0.0001
    weight_noise: bool = True
    output_leakage: bool = True

    @classmethod
    def off(cls) -> "NoiseModel":
        return cls(weight_noise=False, output_leakage=False)

    def sigma(self, w):
        a2, a1, a0 = self.sigma_coeffs
        return a2 * np.square(w) + a1 * w + a0

    def dsigma(self, w):
        a2, a1, _ = self.sigma_coeffs
        return 2 * a2 * w + a1


def sample_noisy_weights(params: ModelParams, noise: NoiseModel, rng: np.random.Generator,
                         eps: ModelParams | None = None) -> ModelParams:
    """One draw of w + sigma(w) * eps."""
    if not noise.weight_noise:
        return params.copy()
    if eps is None:
        eps = params.map(lambda w: rng.standard_normal(w.shape))
    return params.map(lambda w, e: w + noise.sigma(w) * e, eps)


def apply_output_leakage(logits, noise: NoiseModel, rng: np.random.Generator):
    logits = np.asarray(logits, dtype=float)
    if not noise.output_leakage:
        return logits
    return logits + rng.normal(noise.leakage_mean, noise.leakage_sd, logits.shape)


# ---------------------------------------------------------------------------
# Forward / backward

@dataclass
class ForwardCache:
    x: np.ndarray
    weights: dict[str, np.ndarray]  # effective weights, each (B, *shape)
    eps: dict[str, np.ndarray] | None
    p1: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    p2: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    pooled: np.ndarray
    pool_arg: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    extra: dict = field(default_factory=dict)


def forward(params: ModelParams, x, noise: NoiseModel | None = None,
            rng: np.random.Generator | None = None,
            eps: dict[str, np.ndarray] | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Raw logits for a beat (178,) or batch (B, 178).

    With `noise.weight_noise`, each beat sees its own weight draw; pass `eps`
    (dict of (B, *shape) standard normals) to fix the draw.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[-1] != INPUT_LEN:
        raise ShapeError(f"beat length must be {INPUT_LEN}, got {x.shape[-1]}")
    B = x.shape[0]
    tensors = params.tensors()
    if noise is not None and noise.weight_noise:
        if eps is None:
            if rng is None:
                raise ValueError("weight noise needs an rng or explicit eps")
            eps = {k: rng.standard_normal((B,) + w.shape) for k, w in tensors.items()}
        W = {k: w + noise.sigma(w) * eps[k] for k, w in tensors.items()}
    else:
        eps = None
        W = {k: np.broadcast_to(w, (B,) + w.shape) for k, w in tensors.items()}

    p1 = _patches(x[..., None], KERNEL, STRIDE)  # (B, 87, 6)
    z1 = p1 @ W["conv1"].reshape(B, CONV_CHANNELS, KERNEL).transpose(0, 2, 1)
    a1 = relu(z1)
    p2 = _patches(a1, KERNEL, STRIDE)  # (B, 41, 36)
    z2 = (p2 @ W["conv2"].reshape(B, 1, CONV_CHANNELS * KERNEL).transpose(0, 2, 1))[..., 0]
    a2 = relu(z2)
    pooled, arg = maxpool1d(a2)
    hidden = (W["fc1"] @ pooled[..., None])[..., 0]
    logits = (W["fc2"] @ hidden[..., None])[..., 0]
    if noise is not None and noise.output_leakage:
        if rng is None:
            raise ValueError("output leakage needs an rng")
        logits = apply_output_leakage(logits, noise, rng)
    cache = ForwardCache(x, W, eps, p1, z1, a1, p2, z2, a2, pooled, arg, hidden, logits)
    return (logits[0] if single else logits), cache


def predict(params: ModelParams, x, batch: int = 4096) -> np.ndarray:
    """Noise-free argmax class for each row of x."""
    x = np.asarray(x)
    out = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), batch):
        logits, _ = forward(params, x[s:s + batch])
        out[s:s + batch] = logits.argmax(axis=1)
    return out


def backward(params: ModelParams, cache: ForwardCache, dlogits,
             noise: NoiseModel | None = None, reparam: bool = True) -> ModelParams:
    """Gradient w.r.t. the clean weights, summed over the batch.

    Through the noise, d(w~)/dw = 1 + sigma'(w) * eps; `reparam=False` treats
    sigma as a constant (straight-through).
    """
    dl = np.asarray(dlogits, dtype=float)
    if dl.ndim == 1:
        dl = dl[None]
    B = cache.x.shape[0]
    if dl.shape != cache.logits.shape:
        raise ShapeError(f"upstream gradient {dl.shape} vs logits {cache.logits.shape}")
    W = cache.weights

    g4 = dl[:, :, None] * cache.hidden[:, None, :]
    dh = (dl[:, None, :] @ W["fc2"])[:, 0]
    g3 = dh[:, :, None] * cache.pooled[:, None, :]
    dp = (dh[:, None, :] @ W["fc1"])[:, 0]

    da2 = np.zeros_like(cache.a2)
    for k in range(POOL):
        da2[:, k:k + STRIDE * POOL_LEN:STRIDE] += np.where(cache.pool_arg == k, dp, 0.0)
    dz2 = da2 * (cache.z2 > 0)
    g2 = (dz2[:, None, :] @ cache.p2).reshape(B, 1, CONV_CHANNELS, KERNEL)

    dp2 = dz2[..., None] * W["conv2"].reshape(B, 1, CONV_CHANNELS * KERNEL)  # (B, 41, 36)
    dp2 = dp2.reshape(B, CONV2_LEN, CONV_CHANNELS, KERNEL)
    da1 = np.zeros_like(cache.a1)
    for k in range(KERNEL):
        da1[:, k:k + STRIDE * CONV2_LEN:STRIDE, :] += dp2[..., k]
    dz1 = da1 * (cache.z1 > 0)
    g1 = (dz1.transpose(0, 2, 1) @ cache.p1)[:, :, None, :]

    per_beat = {"conv1": g1, "conv2": g2, "fc1": g3, "fc2": g4}
    grads = {}
    for k, w in params.tensors().items():
        g = per_beat[k]
        if cache.eps is not None and reparam and noise is not None:
            g = g * (1.0 + noise.dsigma(w) * cache.eps[k])
        grads[k] = g.sum(axis=0)
    return ModelParams(**grads)


# ---------------------------------------------------------------------------
# Losses

def softmax(z, axis: int = -1):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1):
    z = np.asarray(z, dtype=float)
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def cross_entropy(logits, label) -> float:
    logits = np.asarray(logits, dtype=float)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-log_softmax(logits)[label])


def distill_loss(student_logits, teacher_logits, label, T: float = 1.5, lam: float = 0.5
                 ) -> float:
    s = np.asarray(student_logits, dtype=float)
    t = np.asarray(teacher_logits, dtype=float)
    if s.shape != t.shape:
        raise ShapeError(f"student {s.shape} vs teacher {t.shape}")
    pt = softmax(t / T)
    kl = float(np.sum(pt * (log_softmax(t / T) - log_softmax(s / T))))
    return (1 - lam) * cross_entropy(s, label) + lam * T * T * kl


def ce_batch(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    B = len(y)
    ls = log_softmax(logits)
    loss = -ls[np.arange(B), y].mean()
    d = np.exp(ls)
    d[np.arange(B), y] -= 1.0
    return float(loss), d / B


def distill_batch(logits: np.ndarray, teacher: np.ndarray, y: np.ndarray, T: float,
                  lam: float) -> tuple[float, np.ndarray]:
    B = len(y)
    ce, dce = ce_batch(logits, y)
    lt, ls = log_softmax(teacher / T), log_softmax(logits / T)
    pt = np.exp(lt)
    kl = float(np.sum(pt * (lt - ls)) / B)
    dkl = T * (np.exp(ls) - pt) / B
    return (1 - lam) * ce + lam * T * T * kl, (1 - lam) * dce + lam * dkl
