import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vtinv.dataset import prepare_corpus
from vtinv.synth import SynthSpec, generate_corpus

settings.register_profile("vtinv", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("vtinv")


@pytest.fixture(scope="session")
def small_raw():
    """Ten acquisitions of two short utterances each."""
    raw, mapping = generate_corpus(SynthSpec(n_acquisitions=10, utterances_per_acquisition=2,
                                             frames_per_utterance=80, seed=7))
    return raw


@pytest.fixture()
def small_prepared(small_raw):
    return prepare_corpus(small_raw, seed=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def _golden_errors(shift):
    from vtinv.corpus import ARTICULATORS

    t = np.arange(40)
    out = {}
    for i, a in enumerate(ARTICULATORS):
        base = 1.0 + 0.15 * i + 0.4 * np.abs(np.sin(0.7 * t + i))
        # odd articulators differ by a consistent margin, even ones only by noise
        out[a] = base + (shift if i % 2 else shift * np.cos(1.3 * t + i))
    return out


@pytest.fixture
def golden_runs():
    """Two fixed runs used for the golden comparison table."""
    from vtinv.metrics import aggregate_arrays
    from vtinv.report import Run

    return [
        Run("ABA ST-5", aggregate_arrays(_golden_errors(0.0), "ABA", "ST-5")),
        Run("AAT ST-5", aggregate_arrays(_golden_errors(0.2), "AAT", "ST-5")),
    ]
