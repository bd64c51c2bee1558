import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from lstm_stn.dataset import DigitPool, load_mnist

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("MNIST_DIR", ROOT / "data" / "mnist"))


def synthetic_pool(n=40, seed=0):
    """Blobby fake digits: a random stroke inside the 20x20 core."""
    rng = np.random.default_rng(seed)
    imgs = np.zeros((n, 28, 28))
    for k in range(n):
        r, c = rng.integers(6, 18, size=2)
        imgs[k, r:r + rng.integers(4, 8), 6:22] = rng.uniform(0.5, 1.0)
        imgs[k, 6:22, c:c + 3] = 1.0
    return DigitPool(imgs, np.arange(n) % 10)


@pytest.fixture(scope="session")
def fake_pool():
    return synthetic_pool()


@pytest.fixture(scope="session")
def mnist_pool():
    try:
        return load_mnist(MNIST_DIR, "train")
    except FileNotFoundError:
        pytest.skip(f"no MNIST files in {MNIST_DIR}")


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """Desk-scale train/val/test SQMN files rendered from the local MNIST files."""
    from lstm_stn.train import TrainConfig, gen_data
    if not MNIST_DIR.exists():
        pytest.skip(f"no MNIST files in {MNIST_DIR}")
    out = tmp_path_factory.mktemp("desk")
    gen_data(TrainConfig(mnist_dir=str(MNIST_DIR), data_dir=str(out), seed=0), log_fn=lambda m: None)
    return out


TINY = dict(hidden=8, loc_filters=2, cls_filters=2, cnn_filters=2, fc=6)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        if n in mod.VERDICTS:
            ok, detail = mod.VERDICTS[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN (deselected or errored before a verdict)")
