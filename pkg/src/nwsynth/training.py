"""Scratch / zero-shot / fine-tune training scenarios."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from .audio import CorpusManifest
from .checkpoint import ARCH_NAMES, build_model, load_checkpoint
from .features import FeatureProfile, TS, align_f0_to_frames, mel_spectrogram, mu_law_encode, resample
from .nsf import NsfModel, nsf_config
from .optim import Adam, clip_grad_norm
from .wavenet import WaveNetModel, wavenet_config

log = logging.getLogger(__name__)

SCENARIOS = ("scratch", "zero_shot", "fine_tune")


class ProfileMismatch(ValueError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass
class TrainConfig:
    scenario: str = "scratch"
    arch: str = "nsf"
    profile: FeatureProfile = TS
    preset: str = "desk"
    learning_rate: float = 1e-4
    crop_samples: int | None = None
    max_steps: int = 1000
    seed: int = 0
    init_checkpoint: str | Path | None = None
    clip_norm: float = 5.0

    def __post_init__(self):
        self.scenario = self.scenario.replace("-", "_")
        if self.scenario not in SCENARIOS:
            raise ScenarioError(f"unknown scenario {self.scenario!r}")
        if self.arch not in ARCH_NAMES:
            raise ScenarioError(f"unknown arch {self.arch!r}")
        if self.scenario != "scratch" and self.init_checkpoint is None:
            raise ScenarioError(f"scenario {self.scenario} requires an init checkpoint")

    @property
    def crop_frames(self) -> int:
        samples = self.profile.sample_rate if self.crop_samples is None else self.crop_samples
        return max(1, samples // self.profile.hop)


@dataclass
class Example:
    """One track at the profile's rate; mel and F0 are per frame, audio has frames*hop samples."""

    name: str
    mel: np.ndarray
    frame_f0: np.ndarray
    audio: np.ndarray

    @property
    def frames(self) -> int:
        return self.mel.shape[0]


def make_example(name, waveform, f0track, profile: FeatureProfile) -> Example:
    wav = resample(waveform, profile.sample_rate)
    mel = mel_spectrogram(wav, profile).matrix
    frames = mel.shape[0]
    audio = np.zeros(frames * profile.hop)
    audio[:len(wav)] = wav.samples
    return Example(name, mel, align_f0_to_frames(f0track, frames, profile), audio)


def prepare_examples(manifest: CorpusManifest, profile: FeatureProfile, split: str | None = "train",
                     threads: int = 1) -> list[Example]:
    records = manifest.subset(split).records

    def one(r):
        wav, f0 = manifest.load_record(r)
        return make_example(r.stem, wav, f0, profile)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(one, records))


def crop(example: Example, frames: int, rng: np.random.Generator, hop: int) -> Example:
    if example.frames <= frames:
        return example
    start = int(rng.integers(0, example.frames - frames + 1))
    return Example(example.name, example.mel[start:start + frames], example.frame_f0[start:start + frames],
                   example.audio[start * hop:(start + frames) * hop])


def new_model(arch: str, profile: FeatureProfile, preset: str = "desk", seed: int = 0, **overrides):
    if arch == "nsf":
        return NsfModel(nsf_config(preset, profile, **overrides), seed=seed)
    return WaveNetModel(wavenet_config(preset, profile, **overrides), seed=seed)


def example_loss(model, ex: Example, seed: int) -> G.Tensor:
    if isinstance(model, NsfModel):
        return model.loss(ex.mel, ex.frame_f0, ex.audio, seed=seed)
    return model.loss(ex.mel, ex.frame_f0, mu_law_encode(ex.audio))


def train_steps(model, batches, steps: int, lr: float, seed: int, clip_norm: float = 5.0,
                optimizer: Adam | None = None, on_step=None) -> list[float]:
    """Run ``steps`` Adam updates; ``batches(step, rng)`` yields the Example for each step."""
    params = list(model.params.values())
    opt = optimizer or Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(1, steps + 1):
        ex = batches(step, rng)
        noise_seed = int(rng.integers(0, 2 ** 31 - 1))
        loss = example_loss(model, ex, noise_seed)
        G.backward(loss, params)
        clip_grad_norm(params, clip_norm)
        opt.step()
        losses.append(float(loss.data))
        if on_step is not None:
            on_step(step, losses[-1])
    return losses


@dataclass
class ScenarioResult:
    model: object
    losses: list[float] = field(default_factory=list)


def init_for_scenario(config: TrainConfig):
    if config.scenario == "scratch":
        return new_model(config.arch, config.profile, config.preset, config.seed)
    ckpt = load_checkpoint(config.init_checkpoint)
    if ckpt.profile_name != config.profile.name:
        raise ProfileMismatch(
            f"checkpoint was trained with feature profile {ckpt.profile_name} "
            f"but the data uses {config.profile.name}")
    return build_model(ckpt, expect_arch=ARCH_NAMES[config.arch])


def run_scenario(config: TrainConfig, examples: list[Example] | CorpusManifest, log_path=None,
                 threads: int = 1) -> ScenarioResult:
    """Initialise per scenario and train; zero-shot never takes an optimizer step."""
    model = init_for_scenario(config)
    if isinstance(examples, CorpusManifest):
        examples = prepare_examples(examples, config.profile, "train", threads)
    steps = 0 if config.scenario == "zero_shot" else config.max_steps
    if steps and not examples:
        raise ScenarioError("no training examples")
    hop = config.profile.hop

    def batches(step, rng):
        ex = examples[int(rng.integers(0, len(examples)))]
        return crop(ex, config.crop_frames, rng, hop)

    def report(step, loss):
        if step == 1 or step % 50 == 0 or step == steps:
            log.info("step %d loss %.5f", step, loss)

    losses = train_steps(model, batches, steps, config.learning_rate, config.seed, config.clip_norm,
                         on_step=report)
    if log_path is not None:
        write_loss_log(losses, log_path)
    return ScenarioResult(model, losses)


def write_loss_log(losses, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, f"{v:.8g}"])


def read_loss_log(path) -> list[float]:
    with open(path, encoding="utf-8") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]
