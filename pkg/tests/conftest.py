import numpy as np
import pytest

from codecsep.codec import Codec, CodecConfig
from codecsep.signal import SynthSpec, synth_example

ACCEPTANCE_LINES: list[str] = []

TINY_CODEC = CodecConfig(strides=(2, 4), channels=(4, 8), embedding_dim=8, num_codebooks=3, codebook_size=16,
                         kernel_size=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_codec():
    return Codec(TINY_CODEC, seed=0)


@pytest.fixture(scope="session")
def short_examples():
    spec = SynthSpec(num_examples=6, duration_s=0.25, seed=7)
    return [synth_example(spec, i) for i in range(spec.num_examples)]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
