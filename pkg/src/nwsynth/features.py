"""Feature extraction shared by the training and evaluation paths."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .audio import F0Track, Waveform

LOG_FLOOR = 1e-5
MU_BITS = 10
MU = 2 ** MU_BITS - 1
N_CODES = 2 ** MU_BITS


@dataclass(frozen=True)
class FeatureProfile:
    name: str
    sample_rate: int
    hop: int
    fft_size: int
    win_length: int
    n_mels: int
    fmin: float
    fmax: float

    def __post_init__(self):
        if not (self.hop <= self.win_length <= self.fft_size):
            raise ValueError(f"profile {self.name}: need hop <= win_length <= fft_size")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.hop)


# Scratch training profile (24 kHz, 5 ms shift) and the pretrained-model profile (22.05 kHz).
TS = FeatureProfile("TS", 24000, 120, 1024, 1024, 80, 0.0, 12000.0)
FT = FeatureProfile("FT", 22050, 256, 1024, 1024, 80, 0.0, 8000.0)
PROFILES = {"TS": TS, "FT": FT}


def get_profile(name: str) -> FeatureProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None


# --------------------------------------------------------------------------
# Resampling


def resample_ratio(source_rate: int, target_rate: int) -> tuple[int, int]:
    g = math.gcd(int(source_rate), int(target_rate))
    return target_rate // g, source_rate // g


def resample(waveform: Waveform, target_rate: int) -> Waveform:
    """Polyphase down-sampling; scipy's Kaiser low-pass cuts at the target Nyquist."""
    if target_rate > waveform.sample_rate:
        raise ValueError(f"up-sampling {waveform.sample_rate} -> {target_rate} is not supported")
    if target_rate == waveform.sample_rate:
        return Waveform(waveform.samples.copy(), target_rate)
    up, down = resample_ratio(waveform.sample_rate, target_rate)
    y = resample_poly(waveform.samples, up, down)
    return Waveform(np.clip(y, -1.0, 1.0), target_rate)


# --------------------------------------------------------------------------
# STFT and mel


def hann(n: int) -> np.ndarray:
    # Periodic Hann; sums to n/2.
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_indices(n_samples: int, fft_size: int, hop: int) -> np.ndarray:
    """Sample index matrix for centred frames over a reflection-padded signal.

    Row t covers samples centred on t*hop; there are ceil(n_samples/hop) rows.
    """
    pad = fft_size // 2
    padded = np.pad(np.arange(n_samples), pad, mode="reflect") if n_samples > 1 else \
        np.zeros(n_samples + 2 * pad, dtype=np.int64)
    n_frames = -(-n_samples // hop)
    starts = np.arange(n_frames) * hop
    return padded[starts[:, None] + np.arange(fft_size)[None, :]]


def analysis_window(win_length: int, fft_size: int) -> np.ndarray:
    w = np.zeros(fft_size)
    left = (fft_size - win_length) // 2
    w[left:left + win_length] = hann(win_length)
    return w


def stft(waveform: Waveform, profile: FeatureProfile) -> np.ndarray:
    return stft_array(waveform.samples, profile.fft_size, profile.hop, profile.win_length)


def stft_array(x: np.ndarray, fft_size: int, hop: int, win_length: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 1:
        raise ValueError("stft needs at least one sample")
    frames = x[frame_indices(x.size, fft_size, hop)] * analysis_window(win_length, fft_size)
    return np.fft.rfft(frames, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(profile: FeatureProfile) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape (n_mels, n_bins)."""
    if not (profile.fmin < profile.fmax <= profile.sample_rate / 2):
        raise ValueError(f"profile {profile.name}: need fmin < fmax <= Nyquist")
    edges = mel_to_hz(np.linspace(hz_to_mel(profile.fmin), hz_to_mel(profile.fmax), profile.n_mels + 2))
    freqs = np.arange(profile.n_bins) * profile.sample_rate / profile.fft_size
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(f"profile {profile.name}: band too narrow, {empty.size} empty mel filters")
    return fb


@dataclass
class MelSpectrogram:
    matrix: np.ndarray
    profile: FeatureProfile

    @property
    def frames(self) -> int:
        return self.matrix.shape[0]


def mel_spectrogram(waveform: Waveform, profile: FeatureProfile) -> MelSpectrogram:
    if waveform.sample_rate != profile.sample_rate:
        raise ValueError(
            f"sample rate {waveform.sample_rate} does not match profile {profile.name} "
            f"({profile.sample_rate}); resample first")
    mag = np.abs(stft(waveform, profile))
    mel = mag @ _filterbank_cached(profile).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), profile)


_FB_CACHE: dict[FeatureProfile, np.ndarray] = {}


def _filterbank_cached(profile):
    if profile not in _FB_CACHE:
        _FB_CACHE[profile] = mel_filterbank(profile)
    return _FB_CACHE[profile]


def save_mel(mel: MelSpectrogram, path) -> None:
    name = mel.profile.name.encode("utf-8")
    data = np.ascontiguousarray(mel.matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"MEL0" + struct.pack("<II", data.shape[0], data.shape[1]))
        fh.write(struct.pack("<I", len(name)) + name)
        fh.write(data.tobytes())


def load_mel(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if raw[:4] != b"MEL0":
        raise ValueError(f"{path}: bad magic, not a MEL0 file")
    frames, dims, nlen = struct.unpack("<III", raw[4:16])
    name = raw[16:16 + nlen].decode("utf-8")
    body = raw[16 + nlen:]
    if len(body) != frames * dims * 4:
        raise ValueError(f"{path}: truncated mel matrix")
    m = np.frombuffer(body, dtype="<f4").reshape(frames, dims).astype(np.float64)
    return MelSpectrogram(m, get_profile(name))


# --------------------------------------------------------------------------
# mu-law


def mu_law_compress(x):
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)


def mu_law_encode(x):
    """Amplitude in [-1, 1] to a code in [0, 1023].

    The companded value is split into 1024 equal cells over [-1, 1]; x=0 lands in 512.
    """
    y = mu_law_compress(x)
    code = np.floor((y + 1.0) / 2.0 * N_CODES).astype(np.int64)
    return np.clip(code, 0, N_CODES - 1)


def mu_law_decode(code):
    code = np.asarray(code)
    if np.any(code < 0) or np.any(code > N_CODES - 1):
        raise ValueError("mu-law code out of range [0, 1023]")
    y = (code.astype(np.float64) + 0.5) / N_CODES * 2.0 - 1.0
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(MU)) / MU


def mu_law_cell_edges() -> np.ndarray:
    """Amplitude boundaries of the 1024 cells (1025 values from -1 to 1)."""
    y = np.linspace(-1.0, 1.0, N_CODES + 1)
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(MU)) / MU


# --------------------------------------------------------------------------
# F0 handling


def align_f0_to_frames(f0: F0Track, n_frames: int, profile: FeatureProfile) -> np.ndarray:
    """Nearest-centre pick from the label grid onto the profile's hop grid.

    Ties go to the earlier label frame; indices past the last label repeat it.
    """
    if n_frames == 0:
        return np.zeros(0)
    if len(f0) == 0:
        raise ValueError("cannot align an empty F0 track to a nonempty frame grid")
    shift = Fraction(f0.frame_shift_s).limit_denominator(10 ** 6)
    # label position of frame j is j*hop/(sr*shift) = j*num/den
    num = profile.hop * shift.denominator
    den = profile.sample_rate * shift.numerator
    j = np.arange(n_frames, dtype=np.int64)
    # ceil(j*num/den - 1/2) = ceil((2*j*num - den) / (2*den))
    idx = -((den - 2 * j * num) // (2 * den))
    idx = np.clip(idx, 0, len(f0) - 1)
    return f0.values[idx].copy()


def upsample_f0_replicate(frame_f0, hop: int) -> np.ndarray:
    if hop < 1:
        raise ValueError("hop must be >= 1")
    return np.repeat(np.asarray(frame_f0, dtype=np.float64), hop)


def save_frame_f0(frame_f0, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in frame_f0:
            fh.write(f"{float(v):.3f}\n")


def load_frame_f0(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([float(line) for line in fh if line.strip()], dtype=np.float64)


# --------------------------------------------------------------------------
# Rainbow-gram


@dataclass
class Rainbowgram:
    magnitude: np.ndarray
    inst_freq: np.ndarray
    profile: FeatureProfile

    @property
    def bin_freqs(self) -> np.ndarray:
        return np.arange(self.profile.n_bins) * self.profile.sample_rate / self.profile.fft_size


def princarg(phase):
    return (np.asarray(phase) + np.pi) % (2 * np.pi) - np.pi


def rainbowgram(waveform: Waveform, profile: FeatureProfile, silence: float = 1e-10) -> Rainbowgram:
    """Per-bin magnitude and phase-advance instantaneous frequency.

    Bins with negligible energy in either frame of a pair report their centre frequency.
    """
    spec = stft_array(waveform.samples, profile.fft_size, profile.hop, profile.win_length)
    mag = np.abs(spec)
    sr = waveform.sample_rate
    k = np.arange(profile.n_bins)
    bin_hz = k * sr / profile.fft_size
    inst = np.tile(bin_hz, (spec.shape[0], 1))
    if spec.shape[0] > 1:
        dphi = np.angle(spec[1:]) - np.angle(spec[:-1])
        expected = 2 * np.pi * k * profile.hop / profile.fft_size
        dev = princarg(dphi - expected)
        dev[(mag[1:] <= silence) | (mag[:-1] <= silence)] = 0.0
        inst[1:] = bin_hz + dev * sr / (2 * np.pi * profile.hop)
    return Rainbowgram(mag, np.clip(inst, 0.0, sr / 2), profile)


def write_rainbowgram_csv(rg: Rainbowgram, path) -> None:
    frames, bins = rg.magnitude.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "bin", "magnitude", "inst_freq_hz"])
        for t in range(frames):
            for b in range(bins):
                w.writerow([t, b, f"{rg.magnitude[t, b]:.6g}", f"{rg.inst_freq[t, b]:.3f}"])


def peak_frequency(rg: Rainbowgram, frames: slice | None = None, min_hz: float = 40.0) -> float:
    """Median instantaneous frequency at the strongest bin at or above ``min_hz``.

    The floor keeps a DC offset and its window leakage from posing as the tone.
    """
    mag = rg.magnitude if frames is None else rg.magnitude[frames]
    inst = rg.inst_freq if frames is None else rg.inst_freq[frames]
    first = int(np.searchsorted(rg.bin_freqs, min_hz))
    peak = first + int(np.argmax(mag[:, first:].sum(axis=0)))
    return float(np.median(inst[:, peak]))
