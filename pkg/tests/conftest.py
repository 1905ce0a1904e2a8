import time

import numpy as np
import pytest

from nwsynth.audio import SynthCorpusSpec, make_synth_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Six 2 s tracks at 48 kHz over three instruments (train + test pieces)."""
    out = tmp_path_factory.mktemp("corpus")
    return make_synth_corpus(SynthCorpusSpec(n_tracks=6, seconds=2.0), out, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq, seconds=1.0, sr=24000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t + phase)


_ACCEPTANCE_LINES = []


class Criterion:
    """Collects named checks for one acceptance criterion and its runtime budget."""

    def __init__(self, cid, title, budget_s):
        self.cid, self.title, self.budget_s = cid, title, budget_s
        self.failed, self.notes = [], []

    def check(self, name, ok, detail=""):
        self.notes.append(f"{name}={detail}" if detail else name)
        if not ok:
            self.failed.append(f"{name} {detail}".strip())
        return bool(ok)

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        if exc_type is not None:
            self.failed.append(f"error {exc_type.__name__}: {exc}")
        if elapsed >= self.budget_s:
            self.failed.append(f"runtime {elapsed:.1f}s over {self.budget_s}s")
        status = "FAIL" if self.failed else "PASS"
        detail = "; ".join(self.failed) if self.failed else ", ".join(self.notes)
        _ACCEPTANCE_LINES.append(f"criterion {self.cid} {self.title}: {status} ({elapsed:.1f}s) {detail}")
        if exc_type is None and self.failed:
            raise AssertionError("; ".join(self.failed))
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
