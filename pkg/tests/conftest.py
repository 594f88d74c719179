import numpy as np
import pytest

from spkbackdoor import corpus, recognizer


@pytest.fixture(scope="session")
def small_corpus():
    c = corpus.generate_synthetic(1, 8, 10, 1.0, 16000)
    return corpus.split(c, 0.1, 0.2, seed=1)


@pytest.fixture(scope="session")
def clean_model(small_corpus):
    """A small clean recognizer trained on the fixture corpus."""
    tr, va = small_corpus.by_split("train"), small_corpus.by_split("val")
    X = recognizer.featurize([s.wave for s in tr])
    y = np.array([s.speaker_id for s in tr])
    Xv = recognizer.featurize([s.wave for s in va])
    yv = np.array([s.speaker_id for s in va])
    cfg = recognizer.TrainConfig(epochs=60, patience=60, seed=3)
    return recognizer.train((X, y), (Xv, yv), cfg, small_corpus.n_speakers)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
