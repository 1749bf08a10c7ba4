import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# lines recorded by test_acceptance, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# 200-epoch width-256 heads on the default planted preset, one per seed
PLANTED_EPOCHS = 200
PLANTED_WIDTH = 256


@pytest.fixture(scope="session")
def planted():
    from repunc.synth import SynthSpec, generate
    from repunc.unchead import HeadConfig, train_head

    cache = {}

    def get(seed: int = 0, shuffle: bool = False):
        key = (seed, shuffle)
        if key not in cache:
            data = generate(SynthSpec(seed=seed))
            L = data.losses
            if shuffle:
                from repunc.datamodel import LossVector

                L = LossVector(np.random.default_rng(1000 + seed).permutation(L.values))
            cfg = HeadConfig(unc_width=PLANTED_WIDTH, epochs=PLANTED_EPOCHS, seed=seed)
            params, log = train_head(data.embeddings, L, cfg)
            cache[key] = (data, params, log, cfg)
        return cache[key]

    return get
