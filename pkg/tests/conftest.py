import os

# single-threaded BLAS keeps float results identical across runs and machines
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from lowres_nmt.model import ModelConfig, init_model  # noqa: E402
from lowres_nmt.toy import TargetGrammar  # noqa: E402

DATA = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=11, num_layers=1, hidden_size=8, num_heads=2, ffn_size=16,
                       max_positions=16, dropout_rate=0.0, seed=3)


@pytest.fixture
def tiny_model64(tiny_config):
    return init_model(tiny_config, dtype=np.float64)


@pytest.fixture(scope="session")
def toy_sentences():
    return TargetGrammar.generate(5).sentences(120, 9)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one pass/fail summary line; all lines are printed at the end of the run."""
    def record(criterion: int, passed: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
