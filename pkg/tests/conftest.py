import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stripeprune.data import write_idx  # noqa: E402


def synthetic_digits(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """28x28 images whose class is the position of a bright 8x8 block, plus noise."""
    labels = rng.integers(0, 10, n).astype(np.uint8)
    imgs = rng.integers(0, 60, size=(n, 28, 28)).astype(np.uint8)
    for img, y in zip(imgs, labels):
        r, c = divmod(int(y), 5)
        img[2 + 12 * r:10 + 12 * r, 1 + 5 * c:9 + 5 * c] = 230
    return imgs, labels


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    xs, ys = synthetic_digits(256, rng)
    xt, yt = synthetic_digits(100, rng)
    write_idx(d / "train-images-idx3-ubyte", xs)
    write_idx(d / "train-labels-idx1-ubyte", ys)
    write_idx(d / "t10k-images-idx3-ubyte", xt)
    write_idx(d / "t10k-labels-idx1-ubyte", yt)
    return d


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
