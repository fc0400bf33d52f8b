import sys

import numpy as np
import pytest

from vbmtl.config import build_config
from vbmtl.data import Dataset, generate_synthetic

# small enough that a full epoch runs in well under a second
TINY = [
    "backbone.input_len=512", "backbone.conv_channels=8", "backbone.d_model=16",
    "backbone.n_layers=2", "backbone.n_heads=2", "heads.hidden=16", "branch_heads=2",
    "epochs=2", "batch_size=8", "n_samples=64",
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    def make(*overrides):
        return build_config(overrides=TINY + list(overrides))
    return make


@pytest.fixture(scope="session")
def tiny_dataset():
    manifest, signals = generate_synthetic(64, seed=5, target_len=512)
    return Dataset(manifest, signals, 512)


def pytest_terminal_summary(terminalreporter):
    # pytest imports the file by basename, so look it up rather than re-importing it
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(results, key=lambda k: int(k.split()[0])):
        status, detail = results[criterion]
        terminalreporter.write_line(f"{status} {criterion}: {detail}")
