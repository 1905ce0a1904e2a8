"""Objective F0 evaluation against reference labels."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import LABEL_SHIFT_S, CorpusManifest, F0Track, Waveform, parse_f0_labels, read_wav

log = logging.getLogger(__name__)

VOICING_THRESHOLD = 0.3
WINDOW_S = 0.025
F0_RANGE = (40.0, 2000.0)


@dataclass
class F0Estimate:
    f0: np.ndarray
    confidence: np.ndarray
    frame_shift_s: float = LABEL_SHIFT_S

    def __len__(self):
        return self.f0.shape[0]

    @property
    def voiced(self) -> np.ndarray:
        return self.f0 > 0


def _frame_starts(n_samples: int, sample_rate: int, shift: float, window: int) -> np.ndarray:
    n_frames = math.ceil(round(n_samples / sample_rate / shift, 9))
    centres = np.round(np.arange(n_frames) * shift * sample_rate).astype(np.int64)
    return centres - window // 2


def extract_f0(waveform: Waveform, threshold: float = VOICING_THRESHOLD, f0_range=F0_RANGE,
               window_s: float = WINDOW_S, shift_s: float = LABEL_SHIFT_S) -> F0Estimate:
    """Normalised cross-correlation pitch tracker on a 10 ms grid.

    Only interior local maxima of the correlation count as pitch candidates.
    A frame is voiced when the best candidate reaches ``threshold``. The
    shortest candidate within 90% of the best wins, which suppresses
    sub-octave picks; a parabola through the peak refines the lag.
    """
    sr = waveform.sample_rate
    if sr < 8000:
        raise ValueError(f"sample rate {sr} below 8000 Hz")
    x = waveform.samples
    win = int(round(window_s * sr))
    lag_min = max(2, int(math.floor(sr / f0_range[1])))
    lag_max = int(math.ceil(sr / f0_range[0]))
    span = win + lag_max + 1
    starts = _frame_starts(x.size, sr, shift_s, win)
    n_frames = starts.size
    f0 = np.zeros(n_frames)
    conf = np.zeros(n_frames)
    if n_frames == 0:
        return F0Estimate(f0, conf, shift_s)

    padded = np.concatenate([np.zeros(win), x, np.zeros(span + win)])
    segs = padded[(starts + win)[:, None] + np.arange(span)[None, :]]
    head = segs[:, :win]
    nfft = 1 << int(math.ceil(math.log2(span + win)))
    cross = np.fft.irfft(np.fft.rfft(segs, nfft) * np.conj(np.fft.rfft(head, nfft)), nfft)[:, :lag_max + 2]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(segs ** 2, axis=1)], axis=1)
    lags = np.arange(lag_max + 2)
    e_lag = sq[:, lags + win] - sq[:, lags]
    e0 = e_lag[:, :1]
    denom = np.sqrt(np.maximum(e0 * e_lag, 0.0))
    energy_floor = 1e-10 * win
    r = np.where(denom > energy_floor, cross / np.maximum(denom, 1e-300), 0.0)

    for i in range(n_frames):
        if e0[i, 0] <= energy_floor:
            continue
        # interior local maxima of the correlation over the search range
        seg = r[i, lag_min - 1:lag_max + 2]
        inner = seg[1:-1]
        peaks = np.flatnonzero((inner > seg[:-2]) & (inner >= seg[2:]))
        best = float(inner[peaks].max()) if peaks.size else 0.0
        if best < threshold:
            conf[i] = max(best, 0.0)
            continue
        k = int(peaks[np.argmax(inner[peaks] >= 0.9 * best)])
        j = lag_min + k
        lag = float(j)
        a, b, c = r[i, j - 1], r[i, j], r[i, j + 1]
        curv = a - 2 * b + c
        if curv < 0:
            lag += 0.5 * (a - c) / curv
        f0[i] = sr / lag
        conf[i] = min(1.0, max(0.0, float(inner[k])))
    return F0Estimate(f0, conf, shift_s)


# --------------------------------------------------------------------------
# Metrics


def _aligned(reference, estimate) -> tuple[np.ndarray, np.ndarray]:
    ref = reference.values if isinstance(reference, F0Track) else np.asarray(
        getattr(reference, "f0", reference), dtype=np.float64)
    est = estimate.f0 if isinstance(estimate, F0Estimate) else np.asarray(
        getattr(estimate, "values", estimate), dtype=np.float64)
    n = min(ref.size, est.size)
    return ref[:n], est[:n]


def pcc(reference, estimate) -> float | None:
    """Pearson correlation over frames voiced in both tracks; None when undefined."""
    ref, est = _aligned(reference, estimate)
    both = (ref > 0) & (est > 0)
    if both.sum() < 2:
        return None
    a = ref[both] - ref[both].mean()
    b = est[both] - est[both].mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return None
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def vuv_error(reference, estimate) -> float:
    """Percentage of frames whose voiced/unvoiced decisions disagree."""
    ref, est = _aligned(reference, estimate)
    if ref.size == 0:
        raise ValueError("vuv_error needs at least one frame")
    return 100.0 * float(np.mean((ref > 0) != (est > 0)))


# --------------------------------------------------------------------------
# System report


@dataclass
class ReportRow:
    system: str
    instrument: str
    pcc: float | None
    vuv_pct: float
    n_frames: int


@dataclass
class SystemReport:
    rows: list[ReportRow] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def row(self, instrument: str) -> ReportRow:
        return next(r for r in self.rows if r.instrument == instrument)

    @property
    def overall(self) -> ReportRow | None:
        return next((r for r in self.rows if r.instrument == OVERALL), None)


OVERALL = "ALL"


def evaluate_system(manifest: CorpusManifest, synth_dir, system: str = "SYS",
                    threshold: float = VOICING_THRESHOLD, threads: int = 1) -> SystemReport:
    """Score ``<synth_dir>/<stem>.wav`` against each record's reference labels.

    Frames are pooled per instrument. The overall row pools V/UV over all frames
    and takes the frame-weighted mean of the instrument PCCs.
    """
    synth_dir = Path(synth_dir)
    report = SystemReport()
    todo = []
    for r in manifest.records:
        path = synth_dir / f"{r.stem}.wav"
        if path.exists():
            todo.append((r, path))
        else:
            report.missing.append(str(path))
            log.error("missing synthesized file %s", path)

    def one(item):
        r, path = item
        ref = _read_labels(manifest, r)
        est = extract_f0(read_wav(path), threshold)
        return r.instrument, _aligned(ref, est)

    pooled: dict[str, list] = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for inst, (ref, est) in pool.map(one, todo):
            pooled.setdefault(inst, []).append((ref, est))

    weighted, weight, wrong, total = 0.0, 0, 0.0, 0
    for inst in sorted(pooled):
        ref = np.concatenate([a for a, _ in pooled[inst]])
        est = np.concatenate([b for _, b in pooled[inst]])
        if ref.size == 0:
            continue
        p = pcc(ref, est)
        v = vuv_error(ref, est)
        report.rows.append(ReportRow(system, inst, p, v, int(ref.size)))
        if p is not None:
            weighted += p * ref.size
            weight += ref.size
        wrong += v / 100.0 * ref.size
        total += ref.size
    if total:
        report.rows.append(ReportRow(system, OVERALL, weighted / weight if weight else None,
                                     100.0 * wrong / total, total))
    return report


def _read_labels(manifest, record) -> F0Track:
    return parse_f0_labels(manifest.resolve(record.f0_path))


def write_report_csv(report: SystemReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "instrument", "pcc", "vuv_pct", "n_frames"])
        for r in report.rows:
            w.writerow([r.system, r.instrument, "NA" if r.pcc is None else f"{r.pcc:.4f}",
                        f"{r.vuv_pct:.2f}", r.n_frames])


def read_report_csv(path) -> list[ReportRow]:
    with open(path, encoding="utf-8") as fh:
        return [ReportRow(d["system"], d["instrument"], None if d["pcc"] == "NA" else float(d["pcc"]),
                          float(d["vuv_pct"]), int(d["n_frames"])) for d in csv.DictReader(fh)]
