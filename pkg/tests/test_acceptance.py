"""Acceptance criteria; each test records one PASS/FAIL line shown in the terminal summary."""
import filecmp
import math
import shutil

import numpy as np

from nwsynth import graph as G
from nwsynth.audio import F0Track, SynthCorpusSpec, Waveform, make_synth_corpus, render_plan
from nwsynth.checkpoint import ARCH_NAMES, CheckpointError, load_checkpoint, load_model, save_checkpoint
from nwsynth.cli import main
from nwsynth.features import (
    FT, N_CODES, TS, mel_spectrogram, mu_law_cell_edges, mu_law_decode, mu_law_encode, peak_frequency,
    rainbowgram, resample, resample_ratio, upsample_f0_replicate,
)
from nwsynth.gradcheck import check_model, check_primitives
from nwsynth.metrics import evaluate_system, pcc, vuv_error
from nwsynth.nsf import NsfModel, nsf_config, source_excitation
from nwsynth.training import (
    Example, ProfileMismatch, TrainConfig, make_example, new_model, run_scenario, train_steps,
)
from nwsynth.wavenet import WaveNetModel, receptive_field, wavenet_config

from test_metrics import brute_pcc, brute_vuv, random_pair

TOL = 1e-4


def test_criterion_1_gradient_integrity(criterion):
    with criterion(1, "gradient integrity", 120) as c:
        worst = check_primitives(range(100), TOL)
        name, err = max(worst.items(), key=lambda kv: kv[1])
        c.check("primitives", err < TOL, f"{len(worst)} ops x 100 seeds, worst {name} {err:.1e}")
        nsf = check_model("nsf", seed=0, tolerance=TOL)
        c.check("tiny_nsf", nsf.passed, f"{len(nsf.errors)} blocks, worst {nsf.max_error:.1e}")
        c.check("mvf_path", nsf.errors["mvf.conv.w"] < TOL and nsf.errors["mvf.conv.b"] < TOL,
                f"{max(nsf.errors['mvf.conv.w'], nsf.errors['mvf.conv.b']):.1e}")
        wn = check_model("wavenet", seed=0, tolerance=TOL)
        c.check("tiny_wavenet", wn.passed, f"{len(wn.errors)} blocks, worst {wn.max_error:.1e}")


def _changed_rows(a, b):
    return np.flatnonzero(np.any(a != b, axis=1))


def test_criterion_2_wavenet_structure(criterion):
    with criterion(2, "wavenet structure", 60) as c:
        cfg = wavenet_config()
        rf = receptive_field(cfg)
        c.check("rf_formula", rf == 1 + sum(2 ** ((k - 1) % 10) for k in range(1, 31)) == 3070, str(rf))

        # perturbation: code t0 reaches logits t0+1 .. t0+rf and nothing else
        n, t0 = rf + 12, 5
        exact = outside = 0
        for seed in range(20):
            model = WaveNetModel(cfg, seed=seed)
            model.astype(np.float64)
            rng = np.random.default_rng(seed)
            cond = rng.standard_normal((n, 64))
            codes = rng.integers(0, N_CODES, n)
            base = model.teacher_forced_forward(codes, cond, hop=1).data
            moved = codes.copy()
            moved[t0] = (codes[t0] + 512) % N_CODES
            rows = _changed_rows(model.teacher_forced_forward(moved, cond, hop=1).data, base)
            exact += int(rows.size > 0 and rows.min() == t0 + 1 and rows.max() == t0 + rf)
            outside += int(rows.size > 0 and (rows.min() <= t0 or rows.max() > t0 + rf))
        c.check("beyond_rf", outside == 0, f"{outside}/20 seeds changed a logit beyond distance {rf}")
        c.check("rf_edge", exact == 20, f"distance {rf} changed a logit in {exact}/20 seeds")

        model = WaveNetModel(cfg, seed=99)
        model.astype(np.float64)
        rng = np.random.default_rng(99)
        m = 400
        cond = rng.standard_normal((m, 64))
        codes = rng.integers(0, N_CODES, m)
        base = model.teacher_forced_forward(codes, cond, hop=1).data
        leaks = 0
        for _ in range(100):
            t = int(rng.integers(0, m))
            moved = codes.copy()
            moved[t] = (codes[t] + int(rng.integers(1, N_CODES))) % N_CODES
            out = model.teacher_forced_forward(moved, cond, hop=1).data
            leaks += int(not np.array_equal(out[:t + 1], base[:t + 1]))
        c.check("causality", leaks == 0, f"100 pairs, {leaks} leaks")

        zero = WaveNetModel(cfg, seed=None)
        zero.astype(np.float64)
        frames = 3
        codes = rng.integers(0, N_CODES, frames * TS.hop)
        ce = float(zero.loss(np.zeros((frames, 80)), np.full(frames, 200.0), codes).data)
        c.check("uniform_xent", abs(ce - math.log(1024)) < 1e-6, f"|{ce:.9f}-ln1024|={abs(ce - math.log(1024)):.1e}")


def test_criterion_3_nsf_pitch_fidelity(criterion):
    with criterion(3, "nsf pitch fidelity", 600) as c:
        worst = 0.0
        interior = slice(TS.fft_size // TS.hop, -(TS.fft_size // TS.hop))
        for f0 in (110.0, 300.0, 440.0, 1000.0, 3000.0):
            h, _ = source_excitation(np.full(TS.sample_rate, f0), TS.sample_rate, seed=0)
            rg = rainbowgram(Waveform(h, TS.sample_rate), TS)
            worst = max(worst, abs(peak_frequency(rg, interior) - f0))
        c.check("excitation_if", worst <= 1.0, f"max |IF-F0| {worst:.3f} Hz")

        sr, secs = TS.sample_rate, 0.1
        x = render_plan([(0.0, secs, 300.0)], secs, sr, np.random.default_rng(0), 6, 0.002)
        mel = mel_spectrogram(Waveform(x, sr), TS).matrix
        frames = mel.shape[0]
        audio = np.zeros(frames * TS.hop)
        audio[:x.size] = x
        ex = Example("tone", mel, np.full(frames, 300.0), audio)
        model = NsfModel(nsf_config("desk", TS), seed=0)
        before = float(model.loss(mel, ex.frame_f0, audio, seed=1).data)
        train_steps(model, lambda step, rng: ex, 500, 1e-3, seed=0)
        after = float(model.loss(mel, ex.frame_f0, audio, seed=1).data)
        reduction = 1.0 - after / before
        c.check("loss_reduction", reduction >= 0.9, f"{before:.3g}->{after:.3g} ({100 * reduction:.1f}%)")
        y = model.synthesize(mel, ex.frame_f0, seed=1)
        peak = peak_frequency(rainbowgram(y, TS), slice(2, -2))
        c.check("output_peak", abs(peak - 300.0) <= 3.0, f"{peak:.2f} Hz")


def test_criterion_4_scenario_semantics(criterion, tmp_path, small_corpus):
    with criterion(4, "scenario semantics", 60) as c:
        init = new_model("nsf", TS, "desk", seed=21)
        path = tmp_path / "init.ckpt"
        save_checkpoint(init, path)
        examples = [make_example(r.stem, *small_corpus.load_record(r), TS)
                    for r in small_corpus.subset("train").records[:1]]
        base = dict(arch="nsf", profile=TS, init_checkpoint=path, crop_samples=1200, seed=3)
        zs = run_scenario(TrainConfig(scenario="zero_shot", **base), examples).model
        same = all(np.array_equal(zs.params[k].data, p.data) for k, p in init.params.items())
        c.check("zero_shot_bit_equal", same)
        ft = run_scenario(TrainConfig(scenario="fine_tune", max_steps=0, **base), examples).model
        c.check("fine_tune_0_equals_zero_shot",
                all(np.array_equal(zs.params[k].data, ft.params[k].data) for k in zs.params))
        try:
            run_scenario(TrainConfig(scenario="fine_tune", max_steps=1, **{**base, "profile": FT}), examples)
            rejected = False
        except ProfileMismatch:
            rejected = True
        c.check("profile_mismatch_rejected", rejected)

        for arch in ("nsf", "wavenet"):
            m = new_model(arch, TS, "desk", seed=4)
            p = tmp_path / f"{arch}.ckpt"
            save_checkpoint(m, p)
            back = load_model(p, ARCH_NAMES[arch])
            c.check(f"{arch}_roundtrip", all(np.array_equal(back.params[k].data, v.data) for k, v in m.params.items()))
            save_checkpoint(back, tmp_path / "again.ckpt")
            c.check(f"{arch}_bytes", (tmp_path / "again.ckpt").read_bytes() == p.read_bytes())
        raw = (tmp_path / "nsf.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[:-1])
        try:
            load_checkpoint(tmp_path / "cut.ckpt")
            msg = ""
        except CheckpointError as exc:
            msg = str(exc)
        c.check("truncation", msg == "truncated tensor table", repr(msg))
        try:
            load_model(tmp_path / "nsf.ckpt", ARCH_NAMES["wavenet"])
            msg = ""
        except CheckpointError as exc:
            msg = str(exc)
        c.check("arch_mismatch", "arch mismatch" in msg)


def test_criterion_5_metric_oracles(criterion, tmp_path):
    with criterion(5, "metric oracles", 180) as c:
        rng = np.random.default_rng(5)
        worst = 0.0
        agree = True
        for _ in range(1000):
            ref, est = random_pair(rng)
            p, q = pcc(ref, est), brute_pcc(ref, est)
            agree &= (p is None) == (q is None)
            if p is not None and q is not None:
                worst = max(worst, abs(p - q))
            worst = max(worst, abs(vuv_error(ref, est) - brute_vuv(ref, est)))
        c.check("brute_force", agree and worst <= 1e-10, f"1000 pairs, max diff {worst:.1e}")
        hand = pcc([1, 2, 3], [1, 3, 2])
        c.check("hand_example", abs(hand - 0.5) < 1e-12, f"{hand:.12f}")

        corpus = make_synth_corpus(SynthCorpusSpec(), tmp_path / "corpus", seed=7)
        nat = tmp_path / "nat"
        nat.mkdir()
        for r in corpus.records:
            shutil.copy(corpus.resolve(r.audio_path), nat / f"{r.stem}.wav")
        overall = evaluate_system(corpus, nat, "NAT").overall
        c.check("nat_pcc", 0.9 <= overall.pcc < 1.0, f"{overall.pcc:.4f}")
        c.check("nat_vuv", overall.vuv_pct <= 10.0, f"{overall.vuv_pct:.2f}%")


def test_criterion_6_feature_exactness(criterion):
    with criterion(6, "feature pipeline exactness", 60) as c:
        rng = np.random.default_rng(6)
        ts = mel_spectrogram(Waveform(0.1 * rng.standard_normal(24000), 24000), TS).matrix
        ft = mel_spectrogram(Waveform(0.1 * rng.standard_normal(22050), 22050), FT).matrix
        c.check("ts_frames", ts.shape == (200, 80), str(ts.shape))
        c.check("ft_frames", ft.shape == (87, 80), str(ft.shape))
        grid = np.linspace(-1, 1, 10001)
        codes = mu_law_encode(grid)
        c.check("mu_monotone", bool(np.all(np.diff(codes) >= 0)))
        edges = mu_law_cell_edges()
        back = mu_law_decode(codes)
        inside = np.all((back >= edges[codes] - 1e-12) & (back <= edges[codes + 1] + 1e-12))
        c.check("mu_cell_roundtrip", bool(inside) and np.max(np.abs(back - grid)) <= np.max(np.diff(edges)))
        ok = all(upsample_f0_replicate(np.full(f, 200.0), hop).size == f * hop
                 for f in range(0, 60) for hop in (TS.hop, FT.hop))
        c.check("replication_length", ok)
        c.check("ratio_147_320", resample_ratio(48000, 22050) == (147, 320))
        down = resample(Waveform(np.zeros(48000), 48000), 22050)
        c.check("resample_length", len(down) == 22050, str(len(down)))


def _cli(*argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"exit {code}: {' '.join(map(str, argv))}")


def _pipeline(root):
    corpus = root / "corpus"
    m = corpus / "manifest.tsv"
    _cli("make-synth-corpus", "--out", corpus, "--seed", 7)
    _cli("features", "--manifest", m, "--split", "test", "--out-dir", root / "feats")
    _cli("train", "--arch", "nsf", "--scenario", "scratch", "--manifest", m, "--steps", 200,
         "--crop-samples", 2400, "--out", root / "model.ckpt", "--log", root / "loss.csv",
         "--plot", root / "loss.png")
    _cli("synth", "--ckpt", root / "model.ckpt", "--features", root / "feats", "--out-dir", root / "synth")
    _cli("eval", "--manifest", m, "--split", "test", "--synth-dir", root / "synth", "--system", "NSF",
         "--out", root / "report.csv", "--plot", root / "report.png")


def _tree(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_criterion_7_end_to_end(criterion, tmp_path, capsys):
    with criterion(7, "end-to-end smoke", 900) as c:
        for run in ("a", "b"):
            _pipeline(tmp_path / run)
        capsys.readouterr()
        a, b = tmp_path / "a", tmp_path / "b"
        files = _tree(a)
        c.check("completed", (a / "report.csv").exists() and len(list((a / "synth").glob("*.wav"))) > 0,
                f"{len(files)} files")
        same_set = files == _tree(b)
        _, mismatch, errors = filecmp.cmpfiles(a, b, [str(p) for p in files], shallow=False)
        c.check("byte_identical", same_set and not mismatch and not errors,
                f"{len(mismatch) + len(errors)} differing")
        header = (a / "report.csv").read_text().splitlines()[0]
        c.check("report_header", header == "system,instrument,pcc,vuv_pct,n_frames")
