import numpy as np
import pytest

from pccodec import data, synthetic
from pccodec.codec import Codec, get_config


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return synthetic.write_corpus(root, n_train=12, n_test=4, seed=7)


@pytest.fixture(scope="session")
def small_dataset(corpus_dir):
    return data.ingest(corpus_dir, 64, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def trained_like(name, points=64, seed=0, steps=3):
    """A codec with a few training steps so batch-norm stats and weights are non-trivial."""
    model = Codec(get_config(name, points), seed=seed)
    r = np.random.default_rng(seed)
    from pccodec.nn import adam_step

    for _ in range(steps):
        x = r.standard_normal((8, points, 3)).astype(np.float32)
        model.train_step_grads(x, r.integers(0, 40, 8), 100.0)
        adam_step(model.store, 1e-2)
    model.eval()
    model.update_tables()
    return model


@pytest.fixture(scope="session")
def micro_model():
    return trained_like("micro")


@pytest.fixture(scope="session")
def lite_model():
    return trained_like("lite")


@pytest.fixture(scope="session")
def full_model():
    return trained_like("full", steps=1)


def pytest_terminal_summary(terminalreporter):
    from _report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS, key=str):
            terminalreporter.write_line(RESULTS[k])
