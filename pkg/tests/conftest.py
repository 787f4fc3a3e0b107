import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_DIR = os.path.join(REPO, "data", "mnist")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_mnist_dir(tmp_path_factory):
    """Synthetic IDX directory: 64 train / 32 test images of 28x28 blobs."""
    from fpd.data import write_idx

    d = tmp_path_factory.mktemp("tiny_mnist")
    g = np.random.default_rng(7)
    for prefix, n in (("train", 64), ("t10k", 32)):
        labels = np.arange(n) % 10
        imgs = np.zeros((n, 28, 28), dtype=np.uint8)
        for i, y in enumerate(labels):
            r, c = 4 + 2 * (y % 5), 4 + 8 * (y // 5)
            imgs[i, r:r + 8, c:c + 6] = 200 + g.integers(0, 56)
        write_idx(imgs, labels, d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte")
    return d


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
