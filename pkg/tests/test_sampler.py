import numpy as np
import pytest
from hypothesis import given, strategies as st

from simplex_alloc.constraints import ConstraintConfig
from simplex_alloc.decomposition import membership
from simplex_alloc.errors import InfeasibleConfigError
from simplex_alloc.sampler import UniformPolicy, init_sampler, sample

from conftest import random_configs


def test_worked_start_is_interior(worked_config):
    state = init_sampler(worked_config, 0)
    x = state.current_point
    assert membership(worked_config, x)
    assert np.all(x > 1e-3)
    assert x[1] + x[3] > 0.3 + 1e-3 and x[2] + x[4] > 0.5 + 1e-3


def test_full_simplex_start_is_barycenter():
    state = init_sampler(ConstraintConfig.unconstrained(3, cash=False), 0)
    assert state.current_point == pytest.approx(np.full(3, 1 / 3), abs=1e-8)


def test_infeasible_and_degenerate_rejected():
    with pytest.raises(InfeasibleConfigError, match="infeasible"):
        init_sampler(ConstraintConfig.build(4, (0, 1), 0.6, (2, 3), 0.7), 0)
    with pytest.raises(InfeasibleConfigError, match="degenerate"):
        init_sampler(ConstraintConfig.build(3, (0,), 0.5, (1, 2), 0.5), 0)


def test_bad_chain_parameters(worked_config):
    with pytest.raises(ValueError):
        init_sampler(worked_config, 0, thinning=0)


def test_full_simplex_means():
    pts = sample(init_sampler(ConstraintConfig.unconstrained(3, cash=False), 1), 100_000)
    assert pts.shape == (100_000, 3)
    assert np.all(np.abs(pts.mean(axis=0) - 1 / 3) < 0.01)


def test_segment_mean():
    cfg = ConstraintConfig.build(2, (0,), 0.5, (0,), 0.0, cash=False)
    pts = sample(init_sampler(cfg, 2), 20_000)
    assert pts[:, 0].min() >= 0.5 - 1e-9
    assert abs(pts[:, 0].mean() - 0.75) < 0.01


def test_cut_simplex_matches_rejection_oracle():
    cfg = ConstraintConfig.build(3, (0,), 0.4, (0,), 0.0, cash=False)
    pts = sample(init_sampler(cfg, 3), 50_000)
    rng = np.random.default_rng(99)
    d = rng.dirichlet(np.ones(3), size=400_000)
    kept = d[d[:, 0] >= 0.4]
    assert abs(pts[:, 0].mean() - kept[:, 0].mean()) < 0.02


def test_deterministic_stream(worked_config):
    a = sample(init_sampler(worked_config, 5), 50)
    b = sample(init_sampler(worked_config, 5), 50)
    assert np.array_equal(a, b)
    c = sample(init_sampler(worked_config, 6), 50)
    assert not np.array_equal(a, c)


def test_burn_in_paid_once(worked_config):
    s1 = init_sampler(worked_config, 0, burn_in=100, thinning=2)
    joined = np.vstack([sample(s1, 10), sample(s1, 10)])
    s2 = init_sampler(worked_config, 0, burn_in=100, thinning=2)
    # different RNG chunking, same chain law: only check membership and that the chain moves
    assert np.all(membership(worked_config, joined))
    assert len({tuple(r) for r in joined}) == 20
    assert sample(s2, 0).shape == (0, 5)


@given(random_configs(3, 13), st.integers(0, 1000))
def test_samples_are_members(cfg, seed):
    pts = sample(init_sampler(cfg, seed, burn_in=50, thinning=2), 200)
    assert np.all(membership(cfg, pts, tol=1e-9))


def test_uniform_policy_batches(worked_config):
    pol = UniformPolicy(worked_config, 0, block=7)
    out = pol(np.zeros((16, 11)))
    assert out.shape == (16, 5) and np.all(membership(worked_config, out))
    assert pol.draw(3).shape == (3, 5)
