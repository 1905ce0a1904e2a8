"""Autoregressive WaveNet over 10-bit mu-law codes."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import graph as G
from .audio import Waveform
from .features import TS, FeatureProfile, N_CODES, mu_law_decode
from .nn import ConditionNet, Module

ARCH_WAVENET = 2


@dataclass(frozen=True)
class WaveNetConfig:
    profile: FeatureProfile = TS
    n_blocks: int = 30
    dilation_cycle: int = 10
    kernel_size: int = 2
    residual_channels: int = 32
    skip_channels: int = 64
    quant_levels: int = N_CODES
    lstm_units: int = 32
    cond_channels: int = 63
    f0_input_scale: float = 1.0 / 500.0

    def dilation(self, k: int) -> int:
        """Dilation of block k, counted from 1."""
        return 2 ** ((k - 1) % self.dilation_cycle)

    @property
    def dilations(self) -> list[int]:
        return [self.dilation(k) for k in range(1, self.n_blocks + 1)]


PRESETS = {
    "desk": {},
    "large": {"residual_channels": 64, "skip_channels": 128},
    "tiny": {"n_blocks": 2, "residual_channels": 4, "skip_channels": 4, "lstm_units": 3, "cond_channels": 5},
}


def wavenet_config(preset: str = "desk", profile: FeatureProfile = TS, **overrides) -> WaveNetConfig:
    return replace(WaveNetConfig(profile=profile), **{**PRESETS[preset], **overrides})


def receptive_field(config: WaveNetConfig) -> int:
    return 1 + (config.kernel_size - 1) * sum(config.dilations)


def codes_to_input(codes: np.ndarray) -> np.ndarray:
    """Scalar feedback input: code c becomes c/511.5 - 1."""
    return np.asarray(codes, dtype=np.float64) / ((N_CODES - 1) / 2.0) - 1.0


class WaveNetModel(Module):
    arch_id = ARCH_WAVENET
    arch_name = "WAVENET"

    def __init__(self, config: WaveNetConfig, seed: int | None = 0):
        super().__init__()
        self.config = c = config
        rng = None if seed is None else np.random.default_rng(seed)
        self.cond = ConditionNet(self, "cond", c.profile.n_mels, c.lstm_units, c.cond_channels, rng)
        r, s = c.residual_channels, c.skip_channels
        cond_dim = c.cond_channels + 1
        self.w_in = self.add_param("in.w", (1, r), rng)
        self.b_in = self.add_param("in.b", (r,), None)
        self.blocks = []
        for k in range(c.n_blocks):
            self.blocks.append((
                self.add_param(f"block{k}.conv.w", (c.kernel_size, r, 2 * r), rng),
                self.add_param(f"block{k}.conv.b", (2 * r,), None),
                self.add_param(f"block{k}.cond.w", (cond_dim, 2 * r), rng),
                self.add_param(f"block{k}.res.w", (r, r), rng),
                self.add_param(f"block{k}.res.b", (r,), None),
                self.add_param(f"block{k}.skip.w", (r, s), rng),
                self.add_param(f"block{k}.skip.b", (s,), None),
            ))
        self.w_post = self.add_param("post.w", (s, s), rng)
        self.b_post = self.add_param("post.b", (s,), None)
        self.w_out = self.add_param("out.w", (s, c.quant_levels), rng)
        self.b_out = self.add_param("out.b", (c.quant_levels,), None)

    @property
    def sample_rate(self) -> int:
        return self.config.profile.sample_rate

    @property
    def hop(self) -> int:
        return self.config.profile.hop

    def condition_frames(self, mel, frame_f0) -> G.Tensor:
        mel = np.asarray(mel)
        frame_f0 = np.asarray(frame_f0, dtype=np.float64).reshape(-1)
        if mel.ndim != 2 or mel.shape[0] != frame_f0.shape[0]:
            raise ValueError(f"mel has {mel.shape[0] if mel.ndim else 0} frames but F0 has {frame_f0.shape[0]}")
        return self.cond(self.const(mel), self.const(frame_f0[:, None]))

    def conditioning_forward(self, mel, frame_f0) -> G.Tensor:
        """Per-sample (frames*hop, cond_channels+1) features; last channel is F0 in Hz."""
        return G.repeat_rows(self.condition_frames(mel, frame_f0), self.hop)

    def _scaled(self, feats: G.Tensor) -> G.Tensor:
        scale = np.ones(feats.shape[1], dtype=feats.dtype)
        scale[-1] = self.config.f0_input_scale
        return G.mul(feats, scale)

    def teacher_forced_forward(self, codes, cond, hop: int | None = None) -> G.Tensor:
        """Logits (T, 1024); row t sees codes < t and conditioning rows covering t.

        ``cond`` has one row per ``hop`` samples (``hop=1`` for per-sample features).
        """
        codes = np.asarray(codes)
        if codes.size and (codes.min() < 0 or codes.max() >= self.config.quant_levels):
            raise ValueError("code out of range [0, 1023]")
        hop = self.hop if hop is None else hop
        cond = G.as_tensor(cond)
        t = codes.shape[0]
        if cond.shape[0] * hop != t:
            raise G.ShapeError(f"wavenet: {t} codes vs {cond.shape[0]} conditioning rows x hop {hop}")
        x = np.zeros((t, 1))
        x[1:, 0] = codes_to_input(codes[:-1])
        h = G.dense(self.const(x), self.w_in, self.b_in)
        cond = self._scaled(cond)
        skip = None
        for (cw, cb, kw, rw, rb, sw, sb), d in zip(self.blocks, self.config.dilations):
            z = G.conv1d(h, cw, cb, dilation=d, causal=True)
            z = G.add(z, G.repeat_rows(G.dense(cond, kw), hop) if hop > 1 else G.dense(cond, kw))
            a = G.gated(z)
            h = G.add(h, G.dense(a, rw, rb))
            s = G.dense(a, sw, sb)
            skip = s if skip is None else G.add(skip, s)
        post = G.tanh(G.dense(G.tanh(skip), self.w_post, self.b_post))
        return G.dense(post, self.w_out, self.b_out)

    def loss(self, mel, frame_f0, codes) -> G.Tensor:
        logits = self.teacher_forced_forward(codes, self.condition_frames(mel, frame_f0))
        return cross_entropy_loss(logits, codes)

    # -- generation ---------------------------------------------------------

    def sample_autoregressive(self, cond, seed: int | None = 0, mode: str = "sample",
                              hop: int | None = None, prime=None) -> Waveform:
        codes = self.generate_codes(cond, seed, mode, hop, prime)
        return Waveform(mu_law_decode(codes), self.sample_rate)

    def generate_codes(self, cond, seed: int | None = 0, mode: str = "sample", hop: int | None = None,
                       prime=None, return_logits: bool = False):
        """Sequential generation with per-block input history buffers.

        ``prime`` codes are fed back verbatim before free-running begins.
        """
        if mode not in ("sample", "argmax"):
            raise ValueError(f"mode must be 'sample' or 'argmax', got {mode!r}")
        hop = self.hop if hop is None else hop
        cond = np.asarray(cond.data if isinstance(cond, G.Tensor) else cond, dtype=np.float64)
        scale = np.ones(cond.shape[1])
        scale[-1] = self.config.f0_input_scale
        cond = cond * scale
        n = cond.shape[0] * hop
        prime = np.zeros(0, dtype=np.int64) if prime is None else np.asarray(prime, dtype=np.int64)
        rng = np.random.default_rng(seed)
        k = self.config.kernel_size
        p = {name: prm.data.astype(np.float64) for name, prm in self.params.items()}
        cond_proj = [cond @ p[f"block{i}.cond.w"] for i in range(len(self.blocks))]
        hist = [np.zeros(((k - 1) * d + 1, self.config.residual_channels)) for d in self.config.dilations]
        w_in, b_in = p["in.w"][0], p["in.b"]
        blocks = [(p[f"block{i}.conv.w"], p[f"block{i}.conv.b"], p[f"block{i}.res.w"], p[f"block{i}.res.b"],
                   p[f"block{i}.skip.w"], p[f"block{i}.skip.b"]) for i in range(len(self.blocks))]
        w_post, b_post, w_out, b_out = p["post.w"], p["post.b"], p["out.w"], p["out.b"]
        r = self.config.residual_channels
        codes = np.zeros(n, dtype=np.int64)
        logits_all = np.zeros((n, self.config.quant_levels)) if return_logits else None
        prev = 0.0
        for t in range(n):
            h = prev * w_in + b_in
            skip = 0.0
            frame = t // hop
            for i, ((cw, cb, rw, rb, sw, sb), d) in enumerate(zip(blocks, self.config.dilations)):
                buf = hist[i]
                buf[:-1] = buf[1:]
                buf[-1] = h
                z = cb + cond_proj[i][frame]
                for j in range(k):
                    z = z + buf[j * d] @ cw[j]
                a = np.tanh(z[:r]) * (0.5 * (1.0 + np.tanh(0.5 * z[r:])))
                h = h + a @ rw + rb
                skip = skip + a @ sw + sb
            logits = np.tanh(np.tanh(skip) @ w_post + b_post) @ w_out + b_out
            if return_logits:
                logits_all[t] = logits
            if t < prime.size:
                code = int(prime[t])
            elif mode == "argmax":
                code = int(np.argmax(logits))
            else:
                z = np.exp(logits - logits.max())
                cdf = np.cumsum(z / z.sum())
                code = int(min(np.searchsorted(cdf, rng.random(), side="right"), self.config.quant_levels - 1))
            codes[t] = code
            prev = float(codes_to_input(code))
        return (codes, logits_all) if return_logits else codes

    def hparams(self) -> dict[str, float]:
        c = self.config
        return {"kernel_size": c.kernel_size, "dilation_cycle": c.dilation_cycle, "f0_input_scale": c.f0_input_scale}

    @classmethod
    def config_from_tensors(cls, profile: FeatureProfile, shapes: dict, hparams: dict) -> WaveNetConfig:
        n_blocks = len({k.split(".")[0] for k in shapes if k.startswith("block")})
        return WaveNetConfig(
            profile=profile, n_blocks=n_blocks, dilation_cycle=int(hparams.get("dilation_cycle", 10)),
            kernel_size=shapes["block0.conv.w"][0], residual_channels=shapes["in.w"][1],
            skip_channels=shapes["post.w"][0], quant_levels=shapes["out.w"][1],
            lstm_units=shapes["cond.blstm.fw.wh"][0], cond_channels=shapes["cond.conv.w"][2],
            f0_input_scale=float(hparams.get("f0_input_scale", 1 / 500)))


def cross_entropy_loss(logits: G.Tensor, target_codes) -> G.Tensor:
    return G.softmax_cross_entropy(logits, np.asarray(target_codes, dtype=np.int64))
