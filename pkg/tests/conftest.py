import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bilinear_ssm.ssm_core import ModelDims, param_shapes

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_params(variant, dims: ModelDims, seed: int = 0, scale: float = 0.5, mode: str = "full-block") -> dict:
    """Every learnable array drawn from N(0, scale^2); A_log and dt_bias kept moderate."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(variant, dims, mode).items():
        if name == "A_log":
            out[name] = rng.uniform(-1.0, 1.0, shape)
        elif name == "dt_bias":
            out[name] = rng.uniform(-3.0, 0.0, shape)
        else:
            out[name] = rng.normal(0.0, scale, shape)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
