"""Independent oracles shared by the unit and acceptance tests."""

import math

import numpy as np

from ekgnet.beats import BEAT_LEN, BeatSet
from ekgnet.model import ModelParams, NoiseModel, backward, ce_batch, forward
from ekgnet.quant import Codebook, QuantizedModel


# -- brute-force layers ---------------------------------------------------

def conv1d_loops(x, w, stride):
    """x: (L, Cin), w: (Cout, Cin, K)."""
    L, cin = x.shape
    cout, _, k = w.shape
    n = (L - k) // stride + 1
    out = np.zeros((n, cout))
    for t in range(n):
        for o in range(cout):
            acc = 0.0
            for c in range(cin):
                for j in range(k):
                    acc += w[o, c, j] * x[t * stride + j, c]
            out[t, o] = acc
    return out


def maxpool_loops(x, k, stride):
    n = (len(x) - k) // stride + 1
    out, arg = np.zeros(n), np.zeros(n, dtype=int)
    for t in range(n):
        best, bi = x[t * stride], 0
        for j in range(1, k):
            if x[t * stride + j] > best:
                best, bi = x[t * stride + j], j
        out[t], arg[t] = best, bi
    return out, arg


def dense_loops(x, w):
    out = np.zeros(w.shape[0])
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            out[i] += w[i, j] * x[j]
    return out


# -- finite-difference gradient check -------------------------------------

def _pattern(cache):
    return (cache.z1 > 0, cache.z2 > 0, cache.pool_arg)


def gradcheck(params: ModelParams, x, eps, upstream=None, y=None, h=1e-5,
              noise: NoiseModel | None = None, floor=1e-7):
    """Compare backward() against central differences, one weight at a time.

    With `upstream` (B, C) the objective is sum(upstream * logits); with `y` it
    is mean cross-entropy. Components whose +/-h evaluation flips a ReLU or a
    pooling argmax are excluded (the objective is not differentiable there).
    Relative error uses max(|analytic|, |numeric|, floor) as denominator.
    Returns (worst relative error, number checked, number excluded).
    """
    noise = noise or NoiseModel(output_leakage=False)

    def objective(p):
        logits, cache = forward(p, x, noise, eps=eps)
        if upstream is not None:
            return float(np.sum(upstream * logits)), cache, upstream
        loss, dl = ce_batch(logits, y)
        return loss, cache, dl

    _, cache0, dl = objective(params)
    grads = backward(params, cache0, dl, noise).tensors()
    base = _pattern(cache0)
    worst, checked, excluded = 0.0, 0, 0
    for name, w in params.tensors().items():
        for idx in np.ndindex(w.shape):
            vals, kink = [], False
            for sign in (1, -1):
                p = params.copy()
                p.tensors()[name][idx] += sign * h
                f, c, _ = objective(p)
                kink |= any(not np.array_equal(a, b) for a, b in zip(base, _pattern(c)))
                vals.append(f)
            if kink:
                excluded += 1
                continue
            num = (vals[0] - vals[1]) / (2 * h)
            ana = grads[name][idx]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, excluded


def random_triple(rng, C=4, B=2):
    """(params, beats, eps) whose conv2 ReLU is live for every beat.

    A dead draw makes every gradient exactly zero and proves nothing.
    """
    noise = NoiseModel(output_leakage=False)
    while True:
        params = ModelParams.init(C, rng, 0.3)
        x = rng.uniform(0, 1, (B, 178))
        eps = {k: rng.standard_normal((B,) + w.shape) for k, w in params.tensors().items()}
        _, cache = forward(params, x, noise, eps=eps)
        if np.all((cache.z2 > 0).any(axis=1)):
            return params, x, eps


def toy_beats(n_per=40, seed=0, classes=("N", "S", "V", "Q")):
    """Separable toy beats: class c has a bump at a class-specific position."""
    rng = np.random.default_rng(seed)
    C = len(classes)
    t = np.arange(BEAT_LEN)
    xs, ys = [], []
    for c in range(C):
        for _ in range(n_per):
            center = 20 + 40 * c + rng.integers(-3, 4)
            x = np.exp(-0.5 * ((t - center) / 4.0) ** 2) + 0.05 * rng.uniform(size=BEAT_LEN)
            xs.append(x / x.max())
            ys.append(c)
    n = len(ys)
    return BeatSet(np.array(xs), ys, np.full(n, 125.0), ["toy"] * n, np.zeros(n, int),
                   np.arange(n), tuple(classes))


# -- fine-tuning toy ------------------------------------------------------

def rigged_toy(start=30):
    """Two weights; only 'up' on the first helps."""
    cb = Codebook(6, 1.0)
    q = QuantizedModel({"w": np.array([start, start])}, cb)

    def eval_fn(m):
        c = int(m.codes["w"][0])
        return 1.0 if c >= start + 1 else (0.5 if c == start else 0.0)
    return q, eval_fn


def binom_two_sided_p(k, n, p):
    pmf = [math.comb(n, i) * p ** i * (1 - p) ** (n - i) for i in range(n + 1)]
    return min(1.0, sum(x for x in pmf if x <= pmf[k] * (1 + 1e-9)))
