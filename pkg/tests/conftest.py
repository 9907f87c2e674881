import numpy as np
import pytest

from halftune.model import ModelConfig, build_model

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=64, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=16, dtype="f64")


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, 0)


def perturbed(model, seed=1, scale=0.05):
    """Copy of ``model.registry`` with seeded noise added to every tensor."""
    rng = np.random.default_rng(seed)
    reg = model.registry.copy()
    for name in reg.names():
        a = reg.array(name)
        reg.set(name, (a + scale * rng.standard_normal(a.shape)).astype(a.dtype))
    return reg


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
