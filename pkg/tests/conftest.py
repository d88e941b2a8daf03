import numpy as np
import pytest

from scn.model import EncoderConfig, PairBatch, ScnModel

TINY = EncoderConfig(conv_layers=[(4, 4, 2, 1), (6, 4, 2, 1)], fc_dims=[16, 8], input_size=8, channels=1)


@pytest.fixture
def tiny_config():
    return EncoderConfig(**TINY.to_dict())


@pytest.fixture
def tiny_model(tiny_config):
    return ScnModel.fresh(tiny_config, seed=5, offset_scale=0.125)


def random_batch(model, n, seed):
    rng = np.random.default_rng(seed)
    cfg = model.config
    ctx = rng.uniform(0, 1, size=(n, cfg.channels, cfg.input_size, cfg.input_size)).astype(np.float32)
    tgt = rng.uniform(0, 1, size=(n, cfg.channels, cfg.input_size, cfg.input_size)).astype(np.float32)
    off = rng.normal(scale=10.0, size=(n, 8))
    from scn.model import targets_for

    return PairBatch(ctx, off, targets_for(model, tgt))


@pytest.fixture
def tiny_data(tiny_model):
    return random_batch(tiny_model, 40, 1), random_batch(tiny_model, 16, 2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
