import numpy as np
import pytest

from ecgdenoise.dataset import Corpus, generate_synthetic_corpus, make_split
from ecgdenoise.noise_synth import NOISE_TYPES, NoiseSegment
from ecgdenoise.wfdb_ingest import EcgSegment, RhythmTag


@pytest.fixture(scope="session")
def small_corpus() -> Corpus:
    clean, noise = generate_synthetic_corpus(10, 2, 10, seed=5, fs=360.0, shockable_fraction=0.3)
    return Corpus(clean, noise)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return make_split(small_corpus.subjects(), small_corpus.noise_counts(), 5, (0.6, 0.2, 0.2),
                      small_corpus.segments_per_subject())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus() -> Corpus:
    """40-sample segments sized for the tiny model preset."""
    rng = np.random.default_rng(0)
    t = np.arange(40)
    tags = [RhythmTag.NSR, RhythmTag.CoarseVF]
    clean = [EcgSegment(np.sin(2 * np.pi * t / 10 + s + i) + 0.1 * rng.normal(size=40), 360.0, f"T{s}", i,
                        tags[(s + i) % 2])
             for s in range(6) for i in range(2)]
    noise = [NoiseSegment(rng.normal(size=40), ty, k) for ty in NOISE_TYPES for k in range(6)]
    return Corpus(clean, noise)


def pytest_terminal_summary(terminalreporter):
    from _report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
