import argparse
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch

from sbiflow import cli

torch.set_num_threads(1)

_CACHE = {}
# (criterion number, title, passed, detail) recorded by the acceptance suite
CRITERIA = []


def run_cached(name, seed=0):
    """Run a named study once per session through ``sbiflow experiment``.

    Module tests and the acceptance suite share the result; the manifest
    path is kept so the determinism check can replay it.
    """
    key = (name, seed)
    if key not in _CACHE:
        out = Path(tempfile.mkdtemp(prefix=f"sbiflow-{name}-"))
        manifest = cli.execute("experiment", argparse.Namespace(name=name, seed=seed, out=str(out)))
        _CACHE[key] = (manifest["results"], manifest["timing"], out / "manifest.toml")
    return _CACHE[key]


@pytest.fixture(scope="session")
def study():
    return lambda name, seed=0: run_cached(name, seed)[:2]


@pytest.fixture(scope="session")
def study_manifest():
    return lambda name, seed=0: run_cached(name, seed)[2]


@pytest.fixture(scope="session")
def record_criterion():
    def record(number, title, passed, detail):
        CRITERIA.append((number, title, bool(passed), detail))
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
