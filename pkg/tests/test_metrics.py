import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nwsynth.audio import CorpusManifest, F0Track, Waveform, write_wav
from nwsynth.metrics import (
    OVERALL, F0Estimate, evaluate_system, extract_f0, pcc, read_report_csv, vuv_error,
    write_report_csv,
)

from conftest import tone


def brute_pcc(ref, est):
    n = min(len(ref), len(est))
    xs, ys = [], []
    for i in range(n):
        if ref[i] > 0 and est[i] > 0:
            xs.append(float(ref[i]))
            ys.append(float(est[i]))
    if len(xs) < 2:
        return None
    mx, my = math.fsum(xs) / len(xs), math.fsum(ys) / len(ys)
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sxx == 0 or syy == 0:
        return None
    return sxy / math.sqrt(sxx * syy)


def brute_vuv(ref, est):
    n = min(len(ref), len(est))
    wrong = 0
    for i in range(n):
        if (ref[i] > 0) != (est[i] > 0):
            wrong += 1
    return 100.0 * wrong / n


def random_pair(rng):
    n = int(rng.integers(1, 60))
    m = n + int(rng.integers(-3, 4))
    m = max(1, m)
    ref = np.where(rng.random(n) < 0.7, rng.uniform(50, 1500, n), 0.0)
    est = np.where(rng.random(m) < 0.7, rng.uniform(50, 1500, m), 0.0)
    if rng.random() < 0.3:
        k = min(n, m)
        est[:k] = np.where(ref[:k] > 0, ref[:k] * rng.uniform(0.95, 1.05, k), est[:k])
    return ref, est


def test_metrics_match_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        ref, est = random_pair(rng)
        p, q = pcc(ref, est), brute_pcc(ref, est)
        assert (p is None) == (q is None)
        if p is not None:
            assert abs(p - q) < 1e-10
        assert abs(vuv_error(ref, est) - brute_vuv(ref, est)) < 1e-10


def test_pcc_examples():
    ref = np.array([100.0, 150.0, 210.0, 300.0])
    assert pcc(ref, ref) == pytest.approx(1.0)
    assert pcc(ref, -ref + 1000) == pytest.approx(-1.0)
    assert pcc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)


def test_pcc_undefined():
    assert pcc([100.0, 0.0], [100.0, 200.0]) is None
    assert pcc([100.0, 200.0], [150.0, 150.0]) is None
    assert pcc([], []) is None


def test_vuv_examples():
    assert vuv_error([1, 2, 0], [5, 5, 0]) == 0.0
    assert vuv_error([1, 0, 2], [0, 3, 0]) == 100.0
    assert vuv_error([1, 1, 0, 0], [1, 0, 0, 1]) == 50.0
    with pytest.raises(ValueError):
        vuv_error([], [])


tracks = st.lists(st.one_of(st.just(0.0), st.floats(20.0, 2000.0)), min_size=1, max_size=40)


@settings(max_examples=80, deadline=None)
@given(a=tracks, b=tracks, slope=st.floats(0.1, 10.0), shift=st.floats(0.0, 500.0))
def test_pcc_invariances(a, b, slope, shift):
    a, b = np.array(a), np.array(b)
    n = min(a.size, b.size)
    a, b = a[:n], b[:n]
    p = pcc(a, b)
    q = pcc(b, a)
    assert (p is None) == (q is None)
    if p is None:
        return
    assert p == pytest.approx(q, abs=1e-9)
    assert -1.0 <= p <= 1.0
    scaled = np.where(b > 0, slope * b + shift, 0.0)
    r = pcc(a, scaled)
    if r is not None:
        assert r == pytest.approx(p, abs=1e-6)
    flipped = np.where(b > 0, 30000.0 - slope * b, 0.0)
    s = pcc(a, flipped)
    if s is not None:
        assert s == pytest.approx(-p, abs=1e-6)


@given(a=tracks, b=tracks)
def test_vuv_bounds(a, b):
    assert vuv_error(a, a) == 0.0
    assert 0.0 <= vuv_error(a, b) <= 100.0


def test_extract_f0_tone():
    est = extract_f0(Waveform(tone(220.0, 1.0, 16000), 16000))
    assert isinstance(est, F0Estimate) and len(est) == 100
    interior = est.f0[3:-3]
    assert np.all(interior > 0)
    assert np.max(np.abs(interior - 220.0)) <= 2.0
    assert np.all((est.confidence >= 0) & (est.confidence <= 1))


def test_extract_f0_noise_and_silence():
    for seed in range(10):
        noise = np.random.default_rng(seed).standard_normal(16000) * 0.3
        est = extract_f0(Waveform(noise, 16000))
        assert np.mean(est.f0 == 0) >= 0.9
    assert not np.any(extract_f0(Waveform(np.zeros(8000), 8000)).f0)
    with pytest.raises(ValueError):
        extract_f0(Waveform(np.zeros(100), 4000))


@pytest.mark.parametrize("f0", [80.0, 440.0, 1500.0])
def test_extract_f0_range(f0):
    est = extract_f0(Waveform(tone(f0, 0.5, 24000), 24000))
    assert np.median(est.f0[5:-5]) == pytest.approx(f0, rel=0.01)


def test_evaluate_natural_copies(small_corpus, tmp_path):
    test = small_corpus
    for r in test.records:
        shutil.copy(test.resolve(r.audio_path), tmp_path / f"{r.stem}.wav")
    report = evaluate_system(test, tmp_path, "NAT")
    names = [r.instrument for r in report.rows]
    assert names == sorted(set(names) - {OVERALL}) + [OVERALL]
    overall = report.overall
    assert 0.9 <= overall.pcc < 1.0 and overall.vuv_pct <= 10.0
    assert overall.n_frames == sum(r.n_frames for r in report.rows[:-1])
    assert not report.missing
    out = tmp_path / "r.csv"
    write_report_csv(report, out)
    assert out.read_text().splitlines()[0] == "system,instrument,pcc,vuv_pct,n_frames"
    back = read_report_csv(out)
    assert [(r.instrument, r.n_frames) for r in back] == [(r.instrument, r.n_frames) for r in report.rows]


def test_evaluate_empty_and_missing(small_corpus, tmp_path):
    empty = evaluate_system(CorpusManifest([], small_corpus.root), tmp_path)
    assert empty.rows == [] and empty.overall is None
    report = evaluate_system(small_corpus.subset("test"), tmp_path)
    assert len(report.missing) == len(small_corpus.subset("test").records)


def test_report_csv_na(tmp_path):
    from nwsynth.metrics import ReportRow, SystemReport
    write_report_csv(SystemReport([ReportRow("S", "flute", None, 12.5, 10)]), tmp_path / "x.csv")
    assert (tmp_path / "x.csv").read_text().splitlines()[1] == "S,flute,NA,12.50,10"
    assert read_report_csv(tmp_path / "x.csv")[0].pcc is None
