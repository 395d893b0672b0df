"""Shared fixtures."""

import numpy as np
import pytest

from pournet.models.config import CascadeConfig, OurNetConfig, PhantomSpec, TrainingConfig
from pournet.services.volume import Volume3D, VolumeKind
from pournet.telemetry import get_phase_timer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net_config():
    """Smallest network that still exercises every block."""
    return OurNetConfig(base_channels=2, frb_rseb_count=1, se_reduction=2)


@pytest.fixture
def small_spec():
    return PhantomSpec(size=16, seed=3)


@pytest.fixture
def tiny_cascade_config(tiny_net_config):
    return CascadeConfig(
        n_cascades=2,
        ournet=tiny_net_config,
        training=TrainingConfig(steps=3, batch_size=2, patches_per_volume=2, patch_size=8,
                                log_interval=1),
    )


@pytest.fixture
def make_volume():
    def _make(data, kind=VolumeKind.MU_NORMALIZED, spacing=(2.0, 2.0, 2.0)):
        return Volume3D(np.asarray(data, dtype=np.float32), spacing, kind)

    return _make


@pytest.fixture(autouse=True)
def _reset_timer():
    get_phase_timer().reset()
    yield
    get_phase_timer().reset()
