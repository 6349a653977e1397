import pytest
import torch

from mvpersona.backbone import build_backbone, clone_state
from mvpersona.config import BackboneConfig

torch.set_num_threads(1)


def pytest_configure(config):
    # release-criterion tests append one [PASS]/[FAIL] line each; printed
    # as a summary section so the lines survive output capture
    config._criterion_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("release criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def pretrained_backbone():
    """The default backbone, fully pretrained. Built once per session and
    shared; tests that train must clone_state() first."""
    return build_backbone(seed=0)


@pytest.fixture(scope="session")
def small_backbone():
    """A briefly pretrained backbone: conditioning pathways are live but
    the build stays cheap. Shared; clone before training."""
    return build_backbone(BackboneConfig(pretrain_steps=60), seed=0)


@pytest.fixture()
def raw_backbone():
    """Unpretrained (residual-closing layers still zero, so the predictor
    outputs exactly zero). Fresh copy per test; safe to mutate."""
    return clone_state(build_backbone(BackboneConfig(pretrain_steps=0), seed=0))
