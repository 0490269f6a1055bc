"""Hit-and-run sampling of the constrained allocation polytope.

The chain lives in the affine slice ``sum(x) = 1``: directions are isotropic
Gaussians projected onto the sum-zero tangent space, and the chord through the
current point is cut exactly by the inequality rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .constraints import ConstraintConfig, HPolytope, is_feasible, to_h_polytope
from .errors import InfeasibleConfigError

DEFAULT_BURN_IN = 1000
DEFAULT_THINNING = 10


@dataclass
class SamplerState:
    current_point: np.ndarray
    rng_seed: int
    burn_in: int
    thinning: int
    polytope: HPolytope = field(repr=False)
    rng: np.random.Generator = field(repr=False)
    burned: bool = False


def init_sampler(
    cfg: ConstraintConfig,
    seed: int,
    burn_in: int = DEFAULT_BURN_IN,
    thinning: int = DEFAULT_THINNING,
) -> SamplerState:
    feas = is_feasible(cfg)
    if not feas:
        raise InfeasibleConfigError("infeasible configuration")
    if feas.degenerate:
        raise InfeasibleConfigError("degenerate polytope; sampler unsupported")
    if burn_in < 0 or thinning < 1:
        raise ValueError("burn_in must be >= 0 and thinning >= 1")
    return SamplerState(
        current_point=feas.point.copy(),
        rng_seed=int(seed),
        burn_in=int(burn_in),
        thinning=int(thinning),
        polytope=to_h_polytope(cfg),
        rng=np.random.default_rng(seed),
    )


def sample(state: SamplerState, count: int) -> np.ndarray:
    """Advance the chain and return ``count`` thinned points as a ``(count, N)`` array.

    Burn-in is paid once, on the first call.
    """
    if count <= 0:
        return np.empty((0, state.current_point.size))
    burn = 0 if state.burned else state.burn_in
    steps = burn + state.thinning * count
    n = state.current_point.size
    normals = state.rng.standard_normal((steps, n))
    uniforms = state.rng.random(steps)
    poly = state.polytope
    out, x = kernels.hit_and_run(
        poly.a_matrix, poly.b_vector, state.current_point, normals, uniforms, burn, state.thinning, count
    )
    state.current_point = x
    state.burned = True
    return out


class UniformPolicy:
    """Random baseline: every step draws a fresh allocation from the polytope."""

    def __init__(self, cfg: ConstraintConfig, seed: int, burn_in=DEFAULT_BURN_IN, thinning=DEFAULT_THINNING,
                 block: int = 256):
        self.state = init_sampler(cfg, seed, burn_in, thinning)
        self._buffer = np.empty((0, cfg.n_assets))
        self._block = block

    def draw(self, k: int) -> np.ndarray:
        while self._buffer.shape[0] < k:
            self._buffer = np.vstack([self._buffer, sample(self.state, max(self._block, k))])
        out, self._buffer = self._buffer[:k], self._buffer[k:]
        return out

    def __call__(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        return self.draw(features.shape[0])
