from fractions import Fraction

import numpy as np
import pytest
import torch

from denrescov.fusion import FusionModelConfig, build_fusion_model

TINY = dict(backbone_scale=Fraction(1, 8), input_size=64)


@pytest.fixture
def tiny_config():
    return FusionModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return build_fusion_model(tiny_config).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------- acceptance summary lines

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or rep.outcome != "passed":
        status = "SKIP" if rep.skipped else "PASS" if rep.passed else "FAIL"
        if rep.when != "teardown" or status == "FAIL":
            _CRITERIA[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
