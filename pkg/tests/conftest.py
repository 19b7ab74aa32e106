import logging

import pytest
import torch

from mtrcnet.model import ArchConfig, init_parameters


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="mtrcnet")


@pytest.fixture
def tiny_arch():
    return ArchConfig(frame_size=8, encoder_channels=(4,), feature_dim=6, phase_feature_dim=5, clip_len=3)


@pytest.fixture
def tiny_model(tiny_arch):
    return init_parameters(tiny_arch, seed=0)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


# criterion name -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
