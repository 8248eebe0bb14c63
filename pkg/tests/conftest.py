import numpy as np
import pytest

from bftrans.backbone import BackboneConfig
from bftrans.model import ModelConfig


def randomize(params, seed=0, scale=0.3):
    """Overwrite every parameter with small random values (alpha included)."""
    rng = np.random.default_rng(seed)
    for _, t in params.items():
        t.data[...] = rng.normal(0.0, scale, t.shape).astype(t.data.dtype)
    return params


def tiny_model_config(variant="full", **kw):
    bb = BackboneConfig(d=4, stage_channels=(2, 3, 4, 4), strides=(1, 1, 2, 2), template_size=8, search_size=16)
    return ModelConfig(backbone=bb, variant=variant, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
