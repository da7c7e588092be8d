from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spwsd.data import SyntheticConfig, generate_splits, mirror
from spwsd.detector import DetectorModel

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# acceptance criteria report here; printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(autouse=True)
def _quiet_sampler_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="spwsd.sampling")


SMALL = SyntheticConfig(
    num_images=24, num_test_images=12, num_classes=4, feature_dim=8, proposals_per_image=20,
    fg_proposals_per_object=5, signal=8.0, noise=1.0, seed=3,
)


@pytest.fixture(scope="session")
def small_splits():
    train, test = generate_splits(SMALL)
    return mirror(train), test


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(num_classes, feature_dim, rng, scale=1.0, **hyper) -> DetectorModel:
    model = DetectorModel.zeros(num_classes, feature_dim, **hyper)
    model.w_cls[:] = rng.normal(0.0, scale, model.w_cls.shape)
    model.w_reg[:] = rng.normal(0.0, 0.1 * scale, model.w_reg.shape)
    return model
