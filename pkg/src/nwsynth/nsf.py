"""Harmonic-plus-noise neural source-filter synthesizer with a trainable maximum voiced frequency."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import graph as G
from .audio import Waveform
from .features import TS, FeatureProfile
from .nn import ConditionNet, BiLstm, Module

ARCH_NSF = 1

# (fft_size, hop, win_length) of the three spectral-distance resolutions.
STFT_RESOLUTIONS = ((512, 80, 320), (128, 40, 80), (2048, 640, 1920))
LOSS_EPS = 1e-5


@dataclass(frozen=True)
class NsfConfig:
    profile: FeatureProfile = TS
    n_harmonic_blocks: int = 5
    n_noise_blocks: int = 1
    conv_layers_per_block: int = 5
    kernel_size: int = 3
    channels: int = 64
    lstm_units: int = 32
    cond_channels: int = 63
    sine_amplitude: float = 0.1
    noise_std: float = 0.003
    sinc_taps: int = 63
    f0_input_scale: float = 1.0 / 500.0
    stft_resolutions: tuple = STFT_RESOLUTIONS
    loss_eps: float = LOSS_EPS

    def __post_init__(self):
        if self.sinc_taps % 2 == 0:
            raise ValueError("sinc_taps must be odd")
        if self.sine_amplitude <= 0 or self.noise_std <= 0:
            raise ValueError("sine_amplitude and noise_std must be positive")

    @property
    def dilations(self) -> list[int]:
        return [2 ** i for i in range(self.conv_layers_per_block)]

    @property
    def block_reach(self) -> int:
        """Samples on each side of an input that one filter block can influence."""
        return (self.kernel_size - 1) // 2 * sum(self.dilations)


PRESETS = {
    "desk": {},
    "large": {"channels": 128, "conv_layers_per_block": 10},
    "tiny": {"channels": 4, "lstm_units": 3, "cond_channels": 5, "conv_layers_per_block": 2,
             "n_harmonic_blocks": 2, "sinc_taps": 9},
}


def nsf_config(preset: str = "desk", profile: FeatureProfile = TS, **overrides) -> NsfConfig:
    return replace(NsfConfig(profile=profile), **{**PRESETS[preset], **overrides})


# --------------------------------------------------------------------------
# Source module


def source_excitation(per_sample_f0, sample_rate: int, seed: int | None, alpha: float = 0.1,
                      sigma: float = 0.003) -> tuple[np.ndarray, np.ndarray]:
    """Sine excitation following F0, Gaussian where unvoiced, plus a separate noise sequence.

    Phase accumulates sample by sample, so it stays continuous across F0 changes.
    Unvoiced samples carry noise with the sine's power alpha^2/2.
    """
    f0 = np.asarray(per_sample_f0, dtype=np.float64)
    if np.any(f0 < 0):
        raise ValueError("F0 must be non-negative")
    if np.any(f0 >= sample_rate / 2):
        raise ValueError(f"F0 must stay below Nyquist ({sample_rate / 2} Hz)")
    rng = np.random.default_rng(seed)
    phase = np.mod(np.cumsum(2 * np.pi * f0 / sample_rate), 2 * np.pi)
    voiced = f0 > 0
    harmonic = np.where(voiced,
                        alpha * np.sin(phase) + sigma * rng.standard_normal(f0.size),
                        alpha / np.sqrt(2.0) * rng.standard_normal(f0.size))
    noise = alpha / np.sqrt(2.0) * rng.standard_normal(f0.size)
    return harmonic, noise


# --------------------------------------------------------------------------
# Filters


def sinc_filter_pair(mvf_hz: G.Tensor, taps: int, sample_rate: int) -> tuple[G.Tensor, G.Tensor]:
    """Per-frame low-pass (cutoff = MVF) and complementary high-pass FIR kernels."""
    lp = G.sinc_lowpass(G.mul(mvf_hz, 1.0 / sample_rate), taps)
    delta = np.zeros((1, taps), dtype=lp.dtype)
    delta[0, taps // 2] = 1.0
    return lp, G.sub(delta, lp)


def apply_framewise_fir(x: G.Tensor, kernels: G.Tensor, hop: int) -> G.Tensor:
    """Filter a 1-D signal with a kernel that changes every ``hop`` samples.

    Kernels are symmetric, so correlation and convolution coincide.
    """
    taps = kernels.shape[1]
    half = taps // 2
    t = x.shape[0]
    if kernels.shape[0] * hop != t:
        raise G.ShapeError(f"fir: {kernels.shape[0]} frames x hop {hop} != {t} samples")
    zeros = np.zeros(half, dtype=x.dtype)
    xp = G.concat([zeros, x, zeros], axis=0)
    idx = np.arange(t)[:, None] + np.arange(taps)[None, :]
    return G.sum_axis(G.mul(G.repeat_rows(kernels, hop), G.gather(xp, idx)), axis=1)


# --------------------------------------------------------------------------
# Loss


def multires_stft_loss(generated, target, resolutions=STFT_RESOLUTIONS, eps: float = LOSS_EPS) -> G.Tensor:
    """Sum over resolutions of the mean squared log-magnitude difference."""
    generated, target = G.as_tensor(generated), G.as_tensor(target)
    if generated.shape != target.shape:
        raise G.ShapeError(f"multires_stft_loss: lengths {generated.shape} and {target.shape} differ")
    total = None
    for fft_size, hop, win in resolutions:
        a = G.log(G.stft_magnitude(generated, fft_size, hop, win, eps))
        b = G.log(G.stft_magnitude(target, fft_size, hop, win, eps))
        term = G.mean(G.square(G.sub(a, b)))
        total = term if total is None else G.add(total, term)
    return total


# --------------------------------------------------------------------------
# Model


class NsfModel(Module):
    arch_id = ARCH_NSF
    arch_name = "NSF"

    def __init__(self, config: NsfConfig, seed: int | None = 0):
        super().__init__()
        self.config = c = config
        rng = None if seed is None else np.random.default_rng(seed)
        n_mels = c.profile.n_mels
        self.cond = ConditionNet(self, "cond", n_mels, c.lstm_units, c.cond_channels, rng)
        self.mvf_lstm = BiLstm(self, "mvf.blstm", n_mels, c.lstm_units, rng)
        self.mvf_w = self.add_param("mvf.conv.w", (3, 2 * c.lstm_units, 1), rng)
        self.mvf_b = self.add_param("mvf.conv.b", (1,), None)
        cond_dim = c.cond_channels + 1
        self.blocks = {}
        names = [f"harm{i}" for i in range(c.n_harmonic_blocks)] + [f"noise{i}" for i in range(c.n_noise_blocks)]
        for name in names:
            layers = []
            w_in = self.add_param(f"{name}.in.w", (1, c.channels), rng)
            b_in = self.add_param(f"{name}.in.b", (c.channels,), None)
            for li in range(c.conv_layers_per_block):
                layers.append((
                    self.add_param(f"{name}.l{li}.conv.w", (c.kernel_size, c.channels, c.channels), rng),
                    self.add_param(f"{name}.l{li}.conv.b", (c.channels,), None),
                    self.add_param(f"{name}.l{li}.cond.w", (cond_dim, c.channels), rng),
                ))
            w_out = self.add_param(f"{name}.out.w", (c.channels, 1), rng)
            b_out = self.add_param(f"{name}.out.b", (1,), None)
            self.blocks[name] = (w_in, b_in, layers, w_out, b_out)

    @property
    def sample_rate(self) -> int:
        return self.config.profile.sample_rate

    @property
    def hop(self) -> int:
        return self.config.profile.hop

    # -- condition module ---------------------------------------------------

    def _check_frames(self, mel, frame_f0):
        mel = np.asarray(mel)
        frame_f0 = np.asarray(frame_f0).reshape(-1)
        if mel.ndim != 2 or mel.shape[0] != frame_f0.shape[0]:
            raise ValueError(f"mel has {mel.shape[0] if mel.ndim else 0} frames but F0 has {frame_f0.shape[0]}")
        if mel.shape[1] != self.config.profile.n_mels:
            raise ValueError(f"mel width {mel.shape[1]} != {self.config.profile.n_mels}")
        return mel, frame_f0

    def condition_frames(self, mel, frame_f0) -> tuple[G.Tensor, G.Tensor]:
        """Frame-rate conditioning features (F, cond_channels+1) and MVF in Hz (F,)."""
        mel, frame_f0 = self._check_frames(mel, frame_f0)
        mel_t = self.const(mel)
        feats = self.cond(mel_t, self.const(frame_f0[:, None]))
        raw = G.conv1d(self.mvf_lstm(mel_t), self.mvf_w, self.mvf_b)
        mvf = G.mul(G.sigmoid(G.sum_axis(raw, axis=1)), self.sample_rate / 2.0)
        return feats, mvf

    def condition_forward(self, mel, frame_f0) -> tuple[G.Tensor, G.Tensor, np.ndarray]:
        """Like :meth:`condition_frames`, with features and F0 repeated per sample."""
        feats, mvf = self.condition_frames(mel, frame_f0)
        f0 = np.repeat(np.asarray(frame_f0, dtype=np.float64).reshape(-1), self.hop)
        return G.repeat_rows(feats, self.hop), mvf, f0

    def _scaled(self, feats: G.Tensor) -> G.Tensor:
        scale = np.ones(feats.shape[1], dtype=feats.dtype)
        scale[-1] = self.config.f0_input_scale
        return G.mul(feats, scale)

    # -- filter module ------------------------------------------------------

    def filter_block_forward(self, name: str, excitation: G.Tensor, cond_frames: G.Tensor) -> G.Tensor:
        """One dilated-convolution block; returns excitation plus the block's correction."""
        w_in, b_in, layers, w_out, b_out = self.blocks[name]
        t = excitation.shape[0]
        if cond_frames.shape[0] * self.hop != t:
            raise G.ShapeError(f"{name}: {t} samples vs {cond_frames.shape[0]} frames x hop {self.hop}")
        e = G.gather(excitation, np.arange(t)[:, None]) if excitation.data.ndim == 1 else excitation
        h = G.dense(e, w_in, b_in)
        cond = self._scaled(cond_frames)
        for (cw, cb, kw), d in zip(layers, self.config.dilations):
            c = G.repeat_rows(G.dense(cond, kw), self.hop)
            h = G.add(h, G.tanh(G.add(G.conv1d(h, cw, cb, dilation=d, causal=False), c)))
        return G.add(e, G.dense(G.tanh(h), w_out, b_out))

    def forward(self, mel, frame_f0, seed: int | None = 0) -> G.Tensor:
        feats, mvf = self.condition_frames(mel, frame_f0)
        f0 = np.repeat(np.asarray(frame_f0, dtype=np.float64).reshape(-1), self.hop)
        c = self.config
        harm_src, noise_src = source_excitation(f0, self.sample_rate, seed, c.sine_amplitude, c.noise_std)
        h = self.const(harm_src[:, None])
        for i in range(c.n_harmonic_blocks):
            h = self.filter_block_forward(f"harm{i}", h, feats)
        n = self.const(noise_src[:, None])
        for i in range(c.n_noise_blocks):
            n = self.filter_block_forward(f"noise{i}", n, feats)
        lp, hp = sinc_filter_pair(mvf, c.sinc_taps, self.sample_rate)
        harmonic = apply_framewise_fir(G.sum_axis(h, axis=1), lp, self.hop)
        noise = apply_framewise_fir(G.sum_axis(n, axis=1), hp, self.hop)
        return G.add(harmonic, noise)

    def loss(self, mel, frame_f0, target, seed: int | None = 0) -> G.Tensor:
        out = self.forward(mel, frame_f0, seed)
        return multires_stft_loss(out, np.asarray(target, dtype=out.dtype),
                                  self.config.stft_resolutions, self.config.loss_eps)

    def synthesize(self, mel, frame_f0, seed: int | None = 0) -> Waveform:
        with G.no_grad():
            y = self.forward(mel, frame_f0, seed).data.astype(np.float64)
        return Waveform(np.clip(y, -1.0, 1.0), self.sample_rate)

    def hparams(self) -> dict[str, float]:
        c = self.config
        return {"sine_amplitude": c.sine_amplitude, "noise_std": c.noise_std,
                "sinc_taps": c.sinc_taps, "f0_input_scale": c.f0_input_scale, "kernel_size": c.kernel_size}

    @classmethod
    def config_from_tensors(cls, profile: FeatureProfile, shapes: dict, hparams: dict) -> NsfConfig:
        n_harm = len({k.split(".")[0] for k in shapes if k.startswith("harm")})
        n_noise = len({k.split(".")[0] for k in shapes if k.startswith("noise")})
        n_layers = len({k.split(".")[1] for k in shapes if k.startswith("harm0.l")})
        return NsfConfig(
            profile=profile, n_harmonic_blocks=n_harm, n_noise_blocks=n_noise,
            conv_layers_per_block=n_layers, kernel_size=int(hparams.get("kernel_size", 3)),
            channels=shapes["harm0.in.w"][1], lstm_units=shapes["cond.blstm.fw.wh"][0],
            cond_channels=shapes["cond.conv.w"][2],
            sine_amplitude=float(hparams.get("sine_amplitude", 0.1)),
            noise_std=float(hparams.get("noise_std", 0.003)),
            sinc_taps=int(hparams.get("sinc_taps", 63)),
            f0_input_scale=float(hparams.get("f0_input_scale", 1 / 500)))
