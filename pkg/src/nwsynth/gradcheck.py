"""Finite-difference checks for every layer primitive and for tiny end-to-end models."""
from __future__ import annotations

import numpy as np

from . import graph as G
from .features import FeatureProfile, mu_law_encode
from .nsf import LOSS_EPS, NsfModel, nsf_config
from .optim import GradCheckReport, grad_check
from .wavenet import WaveNetModel, wavenet_config

# Small profile used only for checking; not a data profile.
TINY = FeatureProfile("TINY", 8000, 16, 64, 64, 8, 0.0, 4000.0)
TINY_RESOLUTIONS = ((64, 8, 32), (32, 4, 16), (128, 32, 96))
# Near a spectral null log|X| bends on the scale of sqrt(eps), where a 1e-5
# central difference is no longer an accurate oracle; a higher floor bounds it.
TINY_LOSS_EPS = 1e-2


def _p(name, rng, *shape, low=-1.0, high=1.0):
    return G.Param(name, rng.uniform(low, high, shape))


def _dense(rng):
    n, i, o = rng.integers(1, 5, 3)
    x, w, b = _p("x", rng, n, i), _p("w", rng, i, o), _p("b", rng, o)
    proj = rng.standard_normal((n, o))
    return lambda: G.sum_all(G.mul(G.dense(x, w, b), proj)), [x, w, b]


def _conv(causal):
    def build(rng):
        t, cin, cout = rng.integers(3, 9), rng.integers(1, 4), rng.integers(1, 4)
        k, d = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x, w, b = _p("x", rng, t, cin), _p("w", rng, k, cin, cout), _p("b", rng, cout)
        proj = rng.standard_normal((t, cout))
        return lambda: G.sum_all(G.mul(G.conv1d(x, w, b, d, causal), proj)), [x, w, b]
    return build


def _lstm(reverse):
    def build(rng):
        t, n_in, u = rng.integers(2, 6), rng.integers(1, 3), rng.integers(1, 3)
        x = _p("x", rng, t, n_in)
        wx, wh, b = _p("wx", rng, n_in, 4 * u), _p("wh", rng, u, 4 * u), _p("b", rng, 4 * u)
        proj = rng.standard_normal((t, u))
        return lambda: G.sum_all(G.mul(G.lstm(x, wx, wh, b, reverse), proj)), [x, wx, wh, b]
    return build


def _unary(op, low=-2.0, high=2.0):
    def build(rng):
        x = _p("x", rng, rng.integers(1, 5), rng.integers(1, 4), low=low, high=high)
        proj = rng.standard_normal(x.shape)
        return lambda: G.sum_all(G.mul(op(x), proj)), [x]
    return build


def _gated(rng):
    x = _p("x", rng, rng.integers(1, 5), 2 * rng.integers(1, 3), low=-2, high=2)
    proj = rng.standard_normal((x.shape[0], x.shape[1] // 2))
    return lambda: G.sum_all(G.mul(G.gated(x), proj)), [x]


def _xent(rng):
    n, k = rng.integers(1, 5), rng.integers(2, 7)
    logits = _p("logits", rng, n, k, low=-3, high=3)
    targets = rng.integers(0, k, n)
    return lambda: G.softmax_cross_entropy(logits, targets), [logits]


def _stft(rng):
    fft = int(rng.choice([8, 16]))
    win = int(rng.integers(fft // 2, fft + 1))
    hop = int(rng.integers(1, win // 2 + 1))
    x = _p("x", rng, rng.integers(fft // 2 + 2, 3 * fft))
    probe = G.stft_magnitude(G.Tensor(x.data), fft, hop, win)
    proj = rng.standard_normal(probe.shape)
    return lambda: G.sum_all(G.mul(G.stft_magnitude(x, fft, hop, win, LOSS_EPS), proj)), [x]


def _elementwise(rng):
    shape = (rng.integers(1, 5), rng.integers(1, 4))
    a, b = _p("a", rng, *shape), _p("b", rng, shape[1])
    proj = rng.standard_normal(shape)
    return lambda: G.sum_all(G.mul(G.sub(G.mul(a, b), G.add(a, b)), proj)), [a, b]


def _repeat(rng):
    x = _p("x", rng, rng.integers(1, 4), rng.integers(1, 3))
    times = int(rng.integers(1, 5))
    proj = rng.standard_normal((x.shape[0] * times, x.shape[1]))
    return lambda: G.sum_all(G.mul(G.repeat_rows(x, times), proj)), [x]


def _gather(rng):
    x = _p("x", rng, rng.integers(2, 6))
    idx = rng.integers(0, x.shape[0], (rng.integers(1, 6), rng.integers(1, 4)))
    proj = rng.standard_normal(idx.shape)
    return lambda: G.sum_all(G.mul(G.gather(x, idx), proj)), [x]


def _sinc(rng):
    cutoff = _p("cutoff", rng, rng.integers(1, 4), low=0.02, high=0.48)
    taps = int(rng.choice([3, 9, 15]))
    proj = rng.standard_normal((cutoff.shape[0], taps))
    return lambda: G.sum_all(G.mul(G.sinc_lowpass(cutoff, taps), proj)), [cutoff]


PRIMITIVES = {
    "dense": _dense,
    "conv1d": _conv(False),
    "conv1d_causal": _conv(True),
    "lstm": _lstm(False),
    "lstm_reverse": _lstm(True),
    "tanh": _unary(G.tanh),
    "sigmoid": _unary(G.sigmoid),
    "log": _unary(G.log, 0.1, 3.0),
    "gated": _gated,
    "softmax_xent": _xent,
    "stft_magnitude": _stft,
    "add_mul": _elementwise,
    "repeat": _repeat,
    "gather": _gather,
    "sinc_lowpass": _sinc,
}


def check_primitive(name: str, seed: int, tolerance: float = 1e-4) -> GradCheckReport:
    loss_fn, params = PRIMITIVES[name](np.random.default_rng(seed))
    return grad_check(loss_fn, params, tolerance)


def check_primitives(seeds=range(100), tolerance: float = 1e-4, names=None) -> dict[str, float]:
    """Worst relative error over all seeds, per primitive."""
    worst = {}
    for name in names or PRIMITIVES:
        worst[name] = max(check_primitive(name, s, tolerance).max_error for s in seeds)
    return worst


def _tiny_inputs(rng, frames):
    mel = rng.normal(-2.0, 1.0, (frames, TINY.n_mels))
    f0 = np.where(rng.random(frames) < 0.75, rng.uniform(150.0, 400.0, frames), 0.0)
    return mel, f0


def tiny_model(arch: str, seed: int = 0):
    if arch == "nsf":
        return NsfModel(nsf_config("tiny", TINY, stft_resolutions=TINY_RESOLUTIONS,
                                   loss_eps=TINY_LOSS_EPS), seed=seed)
    return WaveNetModel(wavenet_config("tiny", TINY), seed=seed)


def check_model(arch: str, seed: int = 0, tolerance: float = 1e-4, frames: int | None = None,
                max_entries: int | None = None) -> GradCheckReport:
    """Check every parameter block of a tiny end-to-end graph.

    For NSF this includes the MVF network, whose only path to the loss runs
    through the sinc filter coefficients.
    """
    frames = frames or (12 if arch == "nsf" else 6)
    rng = np.random.default_rng(seed)
    model = tiny_model(arch, seed)
    mel, f0 = _tiny_inputs(rng, frames)
    if arch == "nsf":
        # a target near the model's own output keeps log-spectral residuals small
        y0 = model.forward(mel, f0, seed).data.astype(np.float64)
        target = y0 + 0.05 * np.std(y0) * rng.standard_normal(y0.size)

        def loss_fn():
            return model.loss(mel, f0, target, seed=seed)
    else:
        n = frames * TINY.hop
        t = np.arange(n) / TINY.sample_rate
        codes = mu_law_encode(0.2 * np.sin(2 * np.pi * 300.0 * t) + 0.01 * rng.standard_normal(n))

        def loss_fn():
            return model.loss(mel, f0, codes)
    return grad_check(loss_fn, list(model.params.values()), tolerance, max_entries=max_entries,
                      rng=np.random.default_rng(seed))
