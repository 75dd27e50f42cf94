import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cellfl.config import DatasetConfig, ExperimentConfig  # noqa: E402
from cellfl.nn import Batch, mlp  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_spec():
    return mlp(4, (6,), 3)


@pytest.fixture
def separable_batch():
    """Two linearly separable classes along the first coordinate."""
    r = np.random.default_rng(0)
    x = r.standard_normal((40, 4)) * 0.3
    y = np.repeat([0, 1], 20)
    x[:20, 0] -= 2.0
    x[20:, 0] += 2.0
    return Batch(x, y)


def small_config(protocol: str, **overrides) -> ExperimentConfig:
    """A fast synthetic setup: few users, few rounds, one local epoch."""
    base = dict(
        protocol=protocol,
        num_users=6,
        C=1.0,
        samples_per_user=40,
        labels_per_user=3,
        local_epochs=2,
        batch_size=16,
        lr=0.05,
        rounds=5,
        dataset=DatasetConfig(num_classes=5, dim=8, per_class_train=200, per_class_test=30, cluster_sep=3.0),
    )
    base.update(overrides)
    return ExperimentConfig(**base).validate()


@pytest.fixture
def make_config():
    return small_config


# (criterion number, passed, title, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, title, info in sorted(ACCEPTANCE):
        verdict = "PASS" if passed else "FAIL"
        suffix = f" [{info}]" if info else ""
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}{suffix}")
