import numpy as np
import pytest

from seattack.data import TrainConfig, build_pairs, make_corpus, train_predictive
from seattack.models import make_se
from seattack.spectral import StftConfig

_LINES = []


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        _LINES.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def stft_cfg():
    return StftConfig()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return make_corpus(11, 6, durations=(1.0, 1.0))


@pytest.fixture(scope="session")
def direct_se(small_corpus, stft_cfg):
    res = train_predictive(small_corpus, "direct", TrainConfig(epochs=3, seed=0), stft_cfg)
    return make_se(res.params)


@pytest.fixture(scope="session")
def short_pairs(small_corpus, stft_cfg):
    return build_pairs(small_corpus, 3, 0, stft_cfg, max_samples=2048)
