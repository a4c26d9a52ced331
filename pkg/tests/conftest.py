import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from fedstream.featurizer import LogRecord, numeric_schema  # noqa: E402
from fedstream.model_core import ClassLabel  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def schema5():
    return numeric_schema(5, 0.0, 10.0, 5, prefix="s5_")


@pytest.fixture
def schema81():
    return numeric_schema(81)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def labeled_data(rng, n, d, lo=0.0, hi=1.0):
    X = rng.uniform(lo, hi, size=(n, d))
    y = rng.integers(0, 2, size=n)
    return X, [ClassLabel(int(v)) for v in y]


def numeric_records(schema, X, labels=None, prefix="r"):
    names = [f.source_field for f in schema.features]
    out = []
    for i, row in enumerate(X):
        lbl = labels[i] if labels is not None else None
        out.append(LogRecord(f"{prefix}{i}", 1000 + i, {n: repr(float(v)) for n, v in zip(names, row)}, lbl))
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
