"""Shared fixtures; puts src/ on the import path the way the smoke test does."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import dcml_tensor as T  # noqa: E402
from dcml_shared import FLAGS  # noqa: E402
from dcml_config import preset  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision('float64'):
        yield


@pytest.fixture(autouse=True)
def clean_state():
    FLAGS.reset()
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv('DCML_DATA_DIR', str(tmp_path / "dcml_home"))
    for var in ('DCML_SEED', 'DCML_OUT_DIR', 'DCML_PRECISION'):
        monkeypatch.delenv(var, raising=False)
    return tmp_path / "dcml_home"


@pytest.fixture
def tiny_cfg(data_dir, tmp_path):
    cfg = preset('tiny')
    cfg.paths.out_dir = str(tmp_path / "run")
    return cfg
