import numpy as np
import pytest

from langid.audio import SynthCorpusSpec, synth_corpus
from langid.nn import init_params, preset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """20 short synthetic utterances (10 per language) on disk."""
    out = tmp_path_factory.mktemp("small_corpus")
    records = synth_corpus(SynthCorpusSpec(n_per_class=10, duration_range=(0.6, 1.0), seed=11), out)
    return out, records


@pytest.fixture(scope="session")
def tiny_cfg():
    return preset("tiny")


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=5)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.RESULTS):
            terminalreporter.write_line(line)
