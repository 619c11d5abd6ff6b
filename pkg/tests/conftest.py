import numpy as np
import pytest
import torch

from no2dense.datamodel import N_CHANNELS, NormStats, generate_synthetic
from no2dense.model import BackboneConfig, Checkpoint, DenseEstimator

TINY = dict(encoder_channels=[4, 8, 8, 8], bottleneck_channels=8, out_channels=64)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Twelve synthetic scenes shared by read-only tests."""
    out = tmp_path_factory.mktemp("synth")
    manifest = generate_synthetic(12, seed=5, out_dir=out)
    return out, manifest


@pytest.fixture
def unit_stats():
    return NormStats(np.zeros(N_CHANNELS), np.ones(N_CHANNELS), 0.0, 1.0)


def tiny_model(kind="autoencoder", seed=0):
    torch.manual_seed(seed)
    model = DenseEstimator(BackboneConfig(kind, **TINY))
    model.eval()
    return model


def tiny_checkpoint(stats, P=8, kind="autoencoder", seed=0):
    return Checkpoint(tiny_model(kind, seed), stats, P, {"seed": seed})


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
