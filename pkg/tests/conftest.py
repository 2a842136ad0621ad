from __future__ import annotations

import numpy as np
import pytest

from cervia import dataset as ds
from cervia import synth


@pytest.fixture(scope="session")
def synth_data(tmp_path_factory):
    """Small patient-grouped synthetic dataset shared across test modules."""
    root = tmp_path_factory.mktemp("synthdata")
    generated = synth.generate_dataset(root, n_patients=24, seed=42, size=96)
    return generated


@pytest.fixture(scope="session")
def synth_index(synth_data) -> ds.DatasetIndex:
    return ds.ingest(synth_data.manifest_path)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    status = "PASS" if report.passed else "FAIL"
    name = report.nodeid.split("::")[-1]
    print(f"\n[{status}] {name} ({report.duration:.1f}s)")
