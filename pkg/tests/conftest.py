import numpy as np
import pytest

from swrisk.synth import SynthConfig, generate

# (criterion, passed, detail) tuples filled in by tests/test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """80 subjects, 32-d embeddings, 1 s WAVs: enough for pipeline tests."""
    root = tmp_path_factory.mktemp("small_corpus")
    cfg = SynthConfig(n_subjects=80, split=(40, 20, 20), audio_dim=32, text_dim=32,
                      class_separation=3.0, wav_seconds=1.0, seed=7)
    return generate(cfg, root)
