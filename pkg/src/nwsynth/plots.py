"""Deterministic PNG figures for the CLI report paths."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import hsv_to_rgb  # noqa: E402

from .features import Rainbowgram  # noqa: E402

# No software/version or time stamps, so identical inputs give identical bytes.
PNG_METADATA = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, format="png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def rainbowgram_rgb(rg: Rainbowgram, floor_db: float = -80.0) -> np.ndarray:
    """(bins, frames, 3) image: hue from IF deviation, lightness from log magnitude."""
    spacing = rg.profile.sample_rate / rg.profile.fft_size
    dev = (rg.inst_freq - rg.bin_freqs[None, :]) / spacing
    hue = np.mod(np.clip(dev, -0.5, 0.5) + 0.5, 1.0)
    db = 20 * np.log10(np.maximum(rg.magnitude, 1e-12))
    db -= db.max() if db.size else 0.0
    light = np.clip(1.0 - db / floor_db, 0.0, 1.0)
    hsv = np.stack([hue, np.ones_like(hue), light], axis=-1)
    return hsv_to_rgb(hsv).transpose(1, 0, 2)


def rainbowgram_png(rg: Rainbowgram, path, title: str = "") -> None:
    img = rainbowgram_rgb(rg)
    fig, ax = plt.subplots(figsize=(8, 4))
    hop_s = rg.profile.hop / rg.profile.sample_rate
    extent = (0.0, img.shape[1] * hop_s, 0.0, rg.profile.sample_rate / 2)
    ax.imshow(img, origin="lower", aspect="auto", extent=extent, interpolation="nearest")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (Hz)")
    if title:
        ax.set_title(title)
    _save(fig, path)


def loss_curve_png(losses, path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=1.0)
    if len(losses) and min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    _save(fig, path)


def report_png(rows, path) -> None:
    """Bar chart of PCC and V/UV error per instrument; undefined PCC is drawn as 0."""
    names = [r.instrument for r in rows]
    x = np.arange(len(rows))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.5))
    a1.bar(x, [0.0 if r.pcc is None else r.pcc for r in rows])
    a1.set_ylim(-1.0, 1.0)
    a1.set_title("F0 PCC")
    a2.bar(x, [r.vuv_pct for r in rows], color="tab:orange")
    a2.set_ylim(0.0, 100.0)
    a2.set_title("V/UV error (%)")
    for ax in (a1, a2):
        ax.set_xticks(x, names)
    fig.tight_layout()
    _save(fig, path)
