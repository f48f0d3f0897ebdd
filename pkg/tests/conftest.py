import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from difflm_asr.denoiser import BigramModel, random_bigram  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_bigram():
    return random_bigram(4, 0.7, np.random.default_rng(7))


def deterministic_chain(sentence, n_vocab, eps=1e-9):
    """Bigram that (almost) surely emits ``sentence``."""
    init = np.full(n_vocab, eps)
    init[sentence[0]] = 1.0
    trans = np.full((n_vocab, n_vocab), eps)
    for a, b in zip(sentence[:-1], sentence[1:]):
        trans[a] = eps
        trans[a, b] = 1.0
    return BigramModel.from_probs(init, trans)


# one line per acceptance criterion, shown at the end of the run
ACCEPTANCE: dict[str, str] = {}


def report_criterion(key: str, passed: bool, detail: str) -> None:
    line = f"criterion {key}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
