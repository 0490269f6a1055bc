import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from simplex_alloc.constraints import AssetUniverse, ConstraintConfig, generate_random_config
from simplex_alloc.decomposition import build_decomposition
from simplex_alloc.policy import EncoderConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_NET = EncoderConfig(hidden_sizes=(32, 16), embedding_size=8, branch_sizes=(16, 8))


@pytest.fixture
def worked_config():
    """Five assets, ``x1 + x3 >= 0.3`` and ``x2 + x4 >= 0.5``."""
    return ConstraintConfig.build(5, (1, 3), 0.3, (2, 4), 0.5)


@pytest.fixture
def overlap_config():
    """Three assets, ``x0 + x1 >= 0.5`` and ``x1 + x2 >= 0.7``."""
    return ConstraintConfig.build(3, (0, 1), 0.5, (1, 2), 0.7, cash=False)


@st.composite
def random_configs(draw, min_n=3, max_n=8):
    n = draw(st.integers(min_n, max_n))
    seed = draw(st.integers(0, 2**31 - 1))
    return generate_random_config(AssetUniverse.default(n), seed)


def dirichlet_subs(cfg, rng, batch=None, alpha=1.0):
    """Random valid sub-action stack ``(4, N)`` or ``(batch, 4, N)``."""
    dec = build_decomposition(cfg)
    shape = () if batch is None else (batch,)
    subs = np.zeros((*shape, 4, cfg.n_assets))
    for j, spec in enumerate(dec.specs):
        k = list(spec.index_set)
        if not k:
            continue
        subs[..., j, k] = rng.dirichlet(np.full(len(k), alpha), size=shape or None)
    return subs


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
