"""WAV and F0 label I/O plus corpus tooling.

Waveforms are float64 mono arrays in [-1, 1]; F0 labels are one Hz value per
line on a 10 ms grid, 0 meaning unvoiced.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LABEL_SHIFT_S = 0.010
SPLITS = ("train", "dev", "test")
MAX_LABEL_MISMATCH_FRAMES = 2

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


class LabelError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class F0Track:
    values: np.ndarray
    frame_shift_s: float = LABEL_SHIFT_S

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.frame_shift_s <= 0:
            raise ValueError("frame_shift_s must be positive")
        voiced = self.values[self.values != 0]
        if np.any(self.values < 0) or np.any((voiced < 20) | (voiced > 20000)):
            raise LabelError("F0 values must be 0 (unvoiced) or within [20, 20000] Hz")

    def __len__(self):
        return self.values.shape[0]

    @property
    def voiced(self) -> np.ndarray:
        return self.values > 0


# --------------------------------------------------------------------------
# WAV


def read_wav(path) -> Waveform:
    """Read a RIFF WAV file (PCM 16/24-bit or IEEE float 32-bit).

    Multi-channel files keep channel 0 with a warning.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: malformed header (not RIFF/WAVE)")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError(f"{path}: malformed header (short fmt chunk)")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _FMT_EXTENSIBLE and len(body) >= 26:
                sub = struct.unpack("<H", body[24:26])[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None or data is None:
        raise WavError(f"{path}: malformed header (missing fmt or data chunk)")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise WavError(f"{path}: malformed header (channels={channels}, rate={rate})")

    if tag == _FMT_PCM and bits == 16:
        x = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FMT_PCM and bits == 24:
        b = np.frombuffer(data[: len(data) // 3 * 3], dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif tag == _FMT_FLOAT and bits == 32:
        x = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")

    n = x.shape[0] // channels
    if n == 0:
        raise WavError(f"{path}: empty audio")
    x = x[: n * channels].reshape(n, channels)
    if channels > 1:
        log.warning("%s: %d channels, keeping channel 0", path, channels)
    return Waveform(np.clip(x[:, 0], -1.0, 1.0), rate)


def write_wav(waveform: Waveform, path, bit_depth: int = 16) -> None:
    if bit_depth not in (16, 24):
        raise ValueError(f"bit_depth must be 16 or 24, got {bit_depth}")
    path = Path(path)
    x = np.clip(waveform.samples, -1.0, 1.0)
    if bit_depth == 16:
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
    else:
        q = np.clip(np.round(x * float(1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int32)
        q = np.where(q < 0, q + (1 << 24), q).astype(np.uint32)
        b = np.stack([q & 0xFF, (q >> 8) & 0xFF, (q >> 16) & 0xFF], axis=1).astype(np.uint8)
        payload = b.tobytes()
    nbytes = bit_depth // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, _FMT_PCM, 1, waveform.sample_rate,
        waveform.sample_rate * nbytes, nbytes, bit_depth)
    header += b"data" + struct.pack("<I", len(payload))
    path.write_bytes(header + payload + (b"\x00" if len(payload) & 1 else b""))


# --------------------------------------------------------------------------
# F0 labels


def parse_f0_labels(path) -> F0Track:
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                v = float(text)
            except ValueError:
                raise LabelError(f"{path}:{lineno}: non-numeric F0 value {text!r}") from None
            if not math.isfinite(v) or v < 0:
                raise LabelError(f"{path}:{lineno}: invalid F0 value {text!r}")
            values.append(v)
    return F0Track(np.array(values, dtype=np.float64), LABEL_SHIFT_S)


def write_f0_labels(track: F0Track, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in track.values:
            fh.write(f"{v:.3f}\n")


def check_label_alignment(waveform: Waveform, track: F0Track, context: str = "") -> None:
    """Raise unless label and audio durations agree to within two label frames."""
    diff = abs(len(track) * track.frame_shift_s - waveform.duration)
    if diff > MAX_LABEL_MISMATCH_FRAMES * track.frame_shift_s + 1e-9:
        raise LabelError(
            f"{context}F0 labels cover {len(track) * track.frame_shift_s:.3f} s "
            f"but audio is {waveform.duration:.3f} s")


# --------------------------------------------------------------------------
# Manifest


@dataclass
class Record:
    audio_path: str
    f0_path: str
    instrument: str
    piece_id: str
    split: str

    @property
    def stem(self) -> str:
        return Path(self.audio_path).stem


@dataclass
class CorpusManifest:
    records: list[Record] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        self.root = Path(self.root)
        for r in self.records:
            if r.split not in SPLITS:
                raise ManifestError(f"record {r.audio_path}: unknown split {r.split!r}")
        train = {r.piece_id for r in self.records if r.split == "train"}
        test = {r.piece_id for r in self.records if r.split == "test"}
        shared = sorted(train & test)
        if shared:
            raise ManifestError(f"pieces in both train and test: {', '.join(shared)}")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subset(self, split: str | None) -> "CorpusManifest":
        if split is None:
            return self
        return CorpusManifest([r for r in self.records if r.split == split], self.root)

    def load_record(self, r: Record) -> tuple[Waveform, F0Track]:
        ctx = f"record {r.audio_path}: "
        try:
            wav = read_wav(self.resolve(r.audio_path))
            f0 = parse_f0_labels(self.resolve(r.f0_path))
        except OSError as exc:
            raise ManifestError(f"{ctx}{exc}") from exc
        check_label_alignment(wav, f0, ctx)
        return wav, f0


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(cols)}")
            records.append(Record(*cols))
    manifest = CorpusManifest(records, path.parent)
    for r in records:
        for rel in (r.audio_path, r.f0_path):
            if not manifest.resolve(rel).exists():
                raise ManifestError(f"{path}: record {r.audio_path}: missing file {rel}")
    return manifest


def save_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write("\t".join([r.audio_path, r.f0_path, r.instrument, r.piece_id, r.split]) + "\n")


# --------------------------------------------------------------------------
# Statistics


@dataclass
class StatsRow:
    instrument: str
    split: str
    count: int
    duration_min: float
    f0_max: float | None
    f0_min: float | None


def corpus_stats(manifest: CorpusManifest) -> list[StatsRow]:
    """One summary row per (instrument, split) pair; F0 extrema cover voiced frames only.

    Instruments absent from a split produce no row.
    """
    acc: dict[tuple[str, str], list] = {}
    for r in manifest.records:
        wav, f0 = manifest.load_record(r)
        entry = acc.setdefault((r.instrument, r.split), [0, 0.0, [], []])
        entry[0] += 1
        entry[1] += wav.duration / 60.0
        voiced = f0.values[f0.values > 0]
        if voiced.size:
            entry[2].append(voiced.max())
            entry[3].append(voiced.min())
    rows = []
    for (inst, split), (count, minutes, maxes, mins) in sorted(
            acc.items(), key=lambda kv: (kv[0][0], SPLITS.index(kv[0][1]))):
        rows.append(StatsRow(inst, split, count, minutes,
                             max(maxes) if maxes else None, min(mins) if mins else None))
    return rows


def write_stats_csv(rows: list[StatsRow], path) -> None:
    """Write to a path, or to an already open text stream."""
    def fmt(v):
        return "NA" if v is None else f"{v:.1f}"

    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instrument", "split", "count", "duration_min", "f0_max", "f0_min"])
        for r in rows:
            w.writerow([r.instrument, r.split, r.count, f"{r.duration_min:.3f}", fmt(r.f0_max), fmt(r.f0_min)])

    if hasattr(path, "write"):
        emit(path)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        emit(fh)


# --------------------------------------------------------------------------
# Segmentation


def segment_track(waveform: Waveform, max_seconds: float = 15.0) -> list[Waveform]:
    # Fixed-boundary cuts; every segment except the last is exactly max_seconds long.
    if max_seconds <= 0:
        raise ValueError("max_seconds must be positive")
    step = int(round(max_seconds * waveform.sample_rate))
    step = max(step, 1)
    x = waveform.samples
    return [Waveform(x[i:i + step], waveform.sample_rate) for i in range(0, len(x), step)] or \
        [Waveform(x, waveform.sample_rate)]


# --------------------------------------------------------------------------
# Synthetic corpus

DEFAULT_INSTRUMENTS = {
    "violin": (196.0, 1400.0),
    "cello": (65.0, 700.0),
    "flute": (262.0, 1900.0),
}


@dataclass
class SynthCorpusSpec:
    n_tracks: int = 6
    seconds: float = 10.0
    sample_rate: int = 48000
    f0_ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_INSTRUMENTS))
    n_harmonics: int = 6
    noise_std: float = 0.002
    rest_prob: float = 0.2
    note_seconds: tuple[float, float] = (0.2, 0.6)


def plan_notes(rng: np.random.Generator, seconds: float, f0_range: tuple[float, float],
               rest_prob: float, note_seconds: tuple[float, float]) -> list[tuple[float, float, float]]:
    """Random (start, end, f0) note plan on semitones inside f0_range; f0 0 is a rest."""
    lo, hi = f0_range
    semis = np.arange(math.ceil(12 * math.log2(lo / 440.0)), math.floor(12 * math.log2(hi / 440.0)) + 1)
    notes = []
    t = 0.0
    while t < seconds:
        dur = float(rng.uniform(*note_seconds))
        end = min(seconds, t + dur)
        if rng.random() < rest_prob or semis.size == 0:
            f0 = 0.0
        else:
            f0 = float(440.0 * 2.0 ** (int(rng.choice(semis)) / 12.0))
        notes.append((t, end, f0))
        t = end
    return notes


def labels_from_plan(notes, seconds: float, shift: float = LABEL_SHIFT_S) -> np.ndarray:
    n = int(math.ceil(round(seconds / shift, 9)))
    times = np.arange(n) * shift
    out = np.zeros(n)
    for start, end, f0 in notes:
        out[(times >= start) & (times < end)] = f0
    return out


def render_plan(notes, seconds: float, sample_rate: int, rng: np.random.Generator,
                n_harmonics: int = 6, noise_std: float = 0.002, amplitude: float = 0.3) -> np.ndarray:
    """Ramped harmonic tones with 1/k partials over a low noise floor."""
    n = int(round(seconds * sample_rate))
    f0 = np.zeros(n)
    env = np.zeros(n)
    ramp = max(1, int(0.010 * sample_rate))
    for start, end, hz in notes:
        a, b = int(round(start * sample_rate)), min(n, int(round(end * sample_rate)))
        if b <= a or hz <= 0:
            continue
        f0[a:b] = hz
        e = np.ones(b - a)
        r = min(ramp, (b - a) // 2)
        if r > 0:
            e[:r] = np.linspace(0.0, 1.0, r, endpoint=False)
            e[b - a - r:] = np.linspace(1.0, 0.0, r, endpoint=False)
        env[a:b] = e
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    x = np.zeros(n)
    norm = sum(1.0 / k for k in range(1, n_harmonics + 1))
    for k in range(1, n_harmonics + 1):
        partial = np.sin(k * phase) / k
        partial[k * f0 >= sample_rate / 2] = 0.0
        x += partial
    x = amplitude * env * x / norm
    x += noise_std * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def make_synth_corpus(spec: SynthCorpusSpec, out_dir, seed: int = 0) -> CorpusManifest:
    """Write a reproducible corpus of WAV + 10 ms label files and its manifest.

    Tracks are dealt round-robin over instruments; each round forms one piece, and
    whole pieces are assigned to splits so train and test never share a piece.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    instruments = sorted(spec.f0_ranges)
    n_pieces = math.ceil(spec.n_tracks / len(instruments))
    piece_split = _assign_splits(n_pieces)
    records = []
    for i in range(spec.n_tracks):
        inst = instruments[i % len(instruments)]
        piece = i // len(instruments)
        notes = plan_notes(rng, spec.seconds, spec.f0_ranges[inst], spec.rest_prob, spec.note_seconds)
        audio = render_plan(notes, spec.seconds, spec.sample_rate, rng, spec.n_harmonics, spec.noise_std)
        stem = f"{inst}_{i:03d}"
        write_wav(Waveform(audio, spec.sample_rate), out_dir / f"{stem}.wav", 16)
        write_f0_labels(F0Track(labels_from_plan(notes, spec.seconds)), out_dir / f"{stem}.f0")
        records.append(Record(f"{stem}.wav", f"{stem}.f0", inst, f"piece{piece:03d}", piece_split[piece]))
    manifest = CorpusManifest(records, out_dir)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def _assign_splits(n_pieces: int) -> list[str]:
    if n_pieces == 1:
        return ["train"]
    if n_pieces == 2:
        return ["train", "test"]
    n_test = max(1, round(0.15 * n_pieces))
    n_dev = max(1, round(0.15 * n_pieces)) if n_pieces >= 4 else 0
    n_train = n_pieces - n_test - n_dev
    return ["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test
