"""Command-line entry point: nwsynth <subcommand> [flags]."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import audio, features, metrics
from .checkpoint import ARCH_NAMES, CheckpointError, build_model, load_checkpoint, save_checkpoint
from .training import ProfileMismatch, ScenarioError, TrainConfig, make_example, run_scenario

log = logging.getLogger("nwsynth")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.kind, self.code = kind, code


class Parser(argparse.ArgumentParser):
    """argparse with single-line, machine-parseable usage errors."""

    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _setup_logging() -> None:
    level = os.environ.get("NWS_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError("usage", f"NWS_LOG must be one of error, info, debug (got {level!r})", EXIT_USAGE)
    logging.basicConfig(stream=sys.stderr, level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def _emit_config(args) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    print("config " + json.dumps(cfg, sort_keys=True))


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------
# Subcommands


def cmd_make_synth_corpus(args) -> int:
    spec = audio.SynthCorpusSpec(n_tracks=args.tracks, seconds=args.seconds, sample_rate=args.sample_rate)
    manifest = audio.make_synth_corpus(spec, args.out, seed=args.seed)
    print("stem\tinstrument\tsplit")
    for r in manifest.records:
        print(f"{r.stem}\t{r.instrument}\t{r.split}")
    return EXIT_OK


def cmd_stats(args) -> int:
    rows = audio.corpus_stats(audio.load_manifest(args.manifest))
    if args.out:
        audio.write_stats_csv(rows, args.out)
    audio.write_stats_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_segment(args) -> int:
    wav = audio.read_wav(args.wav)
    out = _out_dir(args.out_dir)
    stem = Path(args.wav).stem
    pieces = audio.segment_track(wav, args.max_seconds)
    labels = audio.parse_f0_labels(args.f0) if args.f0 else None
    per_seg = int(round(args.max_seconds / audio.LABEL_SHIFT_S))
    print("segment\tseconds")
    for i, seg in enumerate(pieces):
        name = f"{stem}_{i:03d}"
        audio.write_wav(seg, out / f"{name}.wav", args.bit_depth)
        if labels is not None:
            part = labels.values[i * per_seg:(i + 1) * per_seg]
            audio.write_f0_labels(audio.F0Track(part, labels.frame_shift_s), out / f"{name}.f0")
        print(f"{name}\t{len(seg) / seg.sample_rate:.3f}")
    return EXIT_OK


def _feature_jobs(args):
    if args.manifest:
        manifest = audio.load_manifest(args.manifest).subset(args.split)
        return [(r.stem, lambda r=r: manifest.load_record(r)) for r in manifest.records]
    if not (args.wav and args.f0):
        raise CliError("usage", "features needs --manifest, or both --wav and --f0", EXIT_USAGE)

    def load():
        wav, f0 = audio.read_wav(args.wav), audio.parse_f0_labels(args.f0)
        audio.check_label_alignment(wav, f0, f"{args.wav}: ")
        return wav, f0
    return [(Path(args.wav).stem, load)]


def cmd_features(args) -> int:
    profile = features.get_profile(args.profile)
    out = _out_dir(args.out_dir)

    def one(job):
        stem, load = job
        wav, f0 = load()
        ex = make_example(stem, wav, f0, profile)
        features.save_mel(features.MelSpectrogram(ex.mel, profile), out / f"{stem}.mel")
        features.save_frame_f0(ex.frame_f0, out / f"{stem}.f0")
        return stem, ex.frames

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        done = list(pool.map(one, _feature_jobs(args)))
    print("stem\tframes")
    for stem, frames in done:
        print(f"{stem}\t{frames}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plots import loss_curve_png

    if args.scenario != "scratch" and not args.init_ckpt:
        raise CliError("usage", f"--scenario {args.scenario} requires --init-ckpt", EXIT_USAGE)
    config = TrainConfig(scenario=args.scenario, arch=args.arch, profile=features.get_profile(args.profile),
                         preset=args.preset, learning_rate=args.lr, crop_samples=args.crop_samples,
                         max_steps=args.steps, seed=args.seed, init_checkpoint=args.init_ckpt)
    manifest = audio.load_manifest(args.manifest)
    result = run_scenario(config, manifest, log_path=args.log, threads=args.threads)
    save_checkpoint(result.model, args.out)
    if args.plot and result.losses:
        loss_curve_png(result.losses, args.plot, f"{args.arch} {config.scenario}")
    print("step\tloss")
    for i, v in enumerate(result.losses, start=1):
        print(f"{i}\t{v:.8g}")
    return EXIT_OK


def _mel_files(path) -> list[Path]:
    p = Path(path)
    files = sorted(p.glob("*.mel")) if p.is_dir() else [p]
    if not files:
        raise CliError("io", f"no .mel files under {p}")
    return files


def cmd_synth(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = build_model(ckpt)
    out = _out_dir(args.out_dir)
    print("stem\tsamples")
    for path in _mel_files(args.features):
        mel = features.load_mel(path)
        if mel.profile.name != ckpt.profile_name:
            raise ProfileMismatch(f"{path.name} uses feature profile {mel.profile.name} but the checkpoint "
                                  f"was trained with {ckpt.profile_name}")
        f0_path = path.with_suffix(".f0")
        if not f0_path.exists():
            raise CliError("io", f"missing frame F0 file {f0_path}")
        f0 = features.load_frame_f0(f0_path)
        if model.arch_name == "NSF":
            wav = model.synthesize(mel.matrix, f0, seed=args.seed)
        else:
            wav = model.sample_autoregressive(model.condition_frames(mel.matrix, f0), seed=args.seed)
        audio.write_wav(wav, out / f"{path.stem}.wav", 16)
        print(f"{path.stem}\t{len(wav)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plots import report_png

    manifest = audio.load_manifest(args.manifest).subset(args.split)
    report = metrics.evaluate_system(manifest, args.synth_dir, args.system, args.threshold, args.threads)
    metrics.write_report_csv(report, args.out)
    if args.plot:
        report_png(report.rows, args.plot)
    with open(args.out, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    if report.missing:
        raise CliError("missing", f"{len(report.missing)} synthesized file(s) missing, first: {report.missing[0]}")
    return EXIT_OK


def cmd_rainbowgram(args) -> int:
    from .plots import rainbowgram_png

    profile = features.get_profile(args.profile)
    wav = audio.read_wav(args.wav)
    if wav.sample_rate > profile.sample_rate:
        wav = features.resample(wav, profile.sample_rate)
    rg = features.rainbowgram(wav, profile)
    if args.out_csv:
        features.write_rainbowgram_csv(rg, args.out_csv)
    if args.out_png:
        rainbowgram_png(rg, args.out_png, Path(args.wav).stem)
    print("frames\tbins\tpeak_hz")
    print(f"{rg.magnitude.shape[0]}\t{rg.magnitude.shape[1]}\t{features.peak_frequency(rg):.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_model, check_primitives

    failed = False
    print("block\trel_error\tstatus")
    if args.arch == "primitives":
        for name, err in check_primitives(range(args.seeds), args.tolerance).items():
            ok = err < args.tolerance
            failed |= not ok
            print(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
    else:
        report = check_model(args.arch, args.seed, args.tolerance)
        for line in report.lines():
            print(line)
        failed = not report.passed
    if failed:
        raise CliError("gradcheck", f"gradient check failed at tolerance {args.tolerance:g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def _global_options(defaults: bool) -> Parser:
    # Subcommands repeat the global flags with suppressed defaults, so a value
    # given before the subcommand is not overwritten.
    def d(v):
        return v if defaults else argparse.SUPPRESS

    common = Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d(0), help="seed for every random choice (default 0)")
    g.add_argument("--profile", choices=sorted(features.PROFILES), default=d("TS"),
                   help="feature profile (default TS)")
    g.add_argument("--threads", type=int, default=d(1), help="worker threads for per-track work (default 1)")
    return common


def build_parser() -> Parser:
    common = _global_options(False)
    p = Parser(prog="nwsynth", description="Neural waveform synthesis for music instruments.",
               parents=[_global_options(True)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("make-synth-corpus", parents=[common], help="write a seeded synthetic instrument corpus")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--tracks", type=int, default=6, help="number of tracks (default 6)")
    s.add_argument("--seconds", type=float, default=10.0, help="seconds per track (default 10)")
    s.add_argument("--sample-rate", type=int, default=48000, help="sample rate in Hz (default 48000)")
    s.set_defaults(func=cmd_make_synth_corpus)

    s = sub.add_parser("stats", parents=[common], help="per instrument and split corpus statistics")
    s.add_argument("--manifest", required=True, help="manifest TSV")
    s.add_argument("--out", help="CSV output path (also printed)")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("segment", parents=[common], help="cut a track at fixed boundaries")
    s.add_argument("--wav", required=True, help="input WAV")
    s.add_argument("--f0", help="optional 10 ms F0 labels to cut alongside")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--max-seconds", type=float, default=15.0, help="segment length in seconds (default 15)")
    s.add_argument("--bit-depth", type=int, choices=(16, 24), default=16, help="output PCM depth (default 16)")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("features", parents=[common], help="WAV + F0 labels to MEL0 and frame F0 files")
    s.add_argument("--manifest", help="manifest TSV (alternative to --wav/--f0)")
    s.add_argument("--split", choices=audio.SPLITS, help="only this manifest split")
    s.add_argument("--wav", help="single input WAV")
    s.add_argument("--f0", help="F0 labels for --wav")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", parents=[common], help="train a model under one scenario")
    s.add_argument("--arch", choices=sorted(ARCH_NAMES), required=True, help="model architecture")
    s.add_argument("--scenario", choices=("scratch", "zero-shot", "fine-tune"), default="scratch",
                   help="training scenario (default scratch)")
    s.add_argument("--init-ckpt", help="pretrained checkpoint; required for zero-shot and fine-tune")
    s.add_argument("--manifest", required=True, help="manifest TSV; its train split is used")
    s.add_argument("--steps", type=int, default=1000, help="optimizer steps (default 1000)")
    s.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (default 1e-4)")
    s.add_argument("--crop-samples", type=int, help="crop length in samples (default one second)")
    s.add_argument("--preset", choices=("desk", "large", "tiny"), default="desk", help="model size (default desk)")
    s.add_argument("--out", required=True, help="output checkpoint path")
    s.add_argument("--log", help="per-step loss CSV")
    s.add_argument("--plot", help="loss curve PNG")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", parents=[common], help="synthesize WAVs from MEL0 features")
    s.add_argument("--ckpt", required=True, help="model checkpoint")
    s.add_argument("--features", required=True, help=".mel file or directory; sibling .f0 files give F0")
    s.add_argument("--out-dir", required=True, help="output directory for WAVs")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", parents=[common], help="F0 PCC and V/UV error report")
    s.add_argument("--manifest", required=True, help="manifest TSV with reference labels")
    s.add_argument("--split", choices=audio.SPLITS, help="only this manifest split")
    s.add_argument("--synth-dir", required=True, help="directory of <stem>.wav files")
    s.add_argument("--system", default="SYS", help="system name for the report (default SYS)")
    s.add_argument("--threshold", type=float, default=metrics.VOICING_THRESHOLD,
                   help="voicing threshold on normalized autocorrelation (default 0.3)")
    s.add_argument("--out", required=True, help="report CSV path (also printed)")
    s.add_argument("--plot", help="report bar chart PNG")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rainbowgram", parents=[common], help="magnitude and instantaneous frequency")
    s.add_argument("--wav", required=True, help="input WAV")
    s.add_argument("--out-csv", help="CSV with frame,bin,magnitude,inst_freq_hz")
    s.add_argument("--out-png", help="PNG image")
    s.set_defaults(func=cmd_rainbowgram)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check on tiny graphs")
    s.add_argument("--arch", choices=("nsf", "wavenet", "primitives"), required=True, help="what to check")
    s.add_argument("--tolerance", type=float, default=1e-4, help="relative error bound (default 1e-4)")
    s.add_argument("--seeds", type=int, default=100, help="seeds per primitive (default 100)")
    s.set_defaults(func=cmd_gradcheck)
    return p


_ERROR_KINDS = (
    (ProfileMismatch, "profile"),
    (ScenarioError, "scenario"),
    (CheckpointError, "checkpoint"),
    (audio.WavError, "wav"),
    (audio.LabelError, "label"),
    (audio.ManifestError, "manifest"),
    (OSError, "io"),
    (ValueError, "value"),
)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        _emit_config(args)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        kind = next((k for cls, k in _ERROR_KINDS if isinstance(exc, cls)), "internal")
        log.debug("traceback", exc_info=True)
        print(f"error: {kind}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
