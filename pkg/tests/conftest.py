import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from chemlm import nncore as nn  # noqa: E402
from chemlm.model import EncoderConfig, init_state  # noqa: E402
from chemlm.synthetic import toy_corpus  # noqa: E402
from chemlm.tokenizer import build_vocabulary  # noqa: E402


@pytest.fixture(autouse=True)
def _unchecked():
    nn.set_checked(False)
    yield
    nn.set_checked(False)


@pytest.fixture(scope="session")
def corpus():
    return toy_corpus(64, seed=3)


@pytest.fixture(scope="session")
def vocab(corpus):
    return build_vocabulary(corpus)


@pytest.fixture
def tiny_state(vocab):
    def make(variant="linear_rotary_modified", dtype="float64", **kw):
        cfg = EncoderConfig(layers=2, heads=2, hidden=16, ffn=32, features=8, dropout=0.0,
                            vocab_size=len(vocab), variant=variant, dtype=dtype, seed=kw.pop("seed", 0), **kw)
        return init_state(cfg)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
