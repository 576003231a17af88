import pytest

from isegmenter.calib import calibrate
from isegmenter.model import TOY_CONFIGS
from isegmenter.synth import structured_checkpoint, synth_dataset


@pytest.fixture(scope="session")
def config():
    return TOY_CONFIGS["d32-l2-k2"]


@pytest.fixture(scope="session")
def pairs(config):
    return synth_dataset(6, config.K, config.image_h, seed=3)


@pytest.fixture(scope="session")
def fp32_ckpt(config, pairs):
    return structured_checkpoint(config, pairs[:4], seed=3)


@pytest.fixture(scope="session")
def int_ckpt(fp32_ckpt, pairs):
    return calibrate(fp32_ckpt, [pairs[0][0]])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
