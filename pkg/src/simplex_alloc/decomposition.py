"""Four-simplex decomposition of the two-constraint allocation polytope.

An allocation is assembled from four sub-allocations, each living on a padded
standard simplex over ``K1 = V1 & V2``, ``K2 = V1``, ``K3 = V2`` and
``K4 = I``, mixed with weights ``z``. ``z1`` and ``z2`` are constants of the
task; ``z3`` depends on how much of the second sub-allocation already landed
in ``V1 & V2``; ``z4`` takes the remainder.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .constraints import ConstraintConfig, feasible_exact, to_h_polytope
from .errors import InfeasibleConfigError, InvalidInputError, NumericalError

CLAMP_BELOW = 1e-15
SUB_ACTION_TOL = 1e-9


@dataclass(frozen=True)
class PaddedSimplexSpec:
    index_set: tuple[int, ...]
    dimension: int

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.dimension, dtype=bool)
        m[list(self.index_set)] = True
        return m

    @property
    def size(self) -> int:
        return len(self.index_set)

    def uniform(self) -> np.ndarray:
        """Barycenter; the zero vector when the index set is empty."""
        v = np.zeros(self.dimension)
        if self.index_set:
            v[list(self.index_set)] = 1.0 / len(self.index_set)
        return v

    def contains(self, values, tol: float = SUB_ACTION_TOL) -> bool:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.dimension,) or np.any(values < -tol):
            return False
        if np.any(np.abs(values[~self.mask]) > tol):
            return False
        target = 1.0 if self.index_set else 0.0
        return abs(values.sum() - target) <= tol


@dataclass(frozen=True)
class SubAction:
    values: np.ndarray
    spec: PaddedSimplexSpec

    def __post_init__(self):
        if not self.spec.contains(self.values):
            raise InvalidInputError("invalid sub-action")


@dataclass(frozen=True)
class WeightVector:
    z1: float
    z2: float
    z3: float
    z4: float

    def as_array(self) -> np.ndarray:
        return np.array([self.z1, self.z2, self.z3, self.z4])


@dataclass(frozen=True)
class Decomposition:
    specs: tuple[PaddedSimplexSpec, PaddedSimplexSpec, PaddedSimplexSpec, PaddedSimplexSpec]
    config: ConstraintConfig

    @property
    def masks(self) -> np.ndarray:
        """Boolean ``(4, N)`` support masks of the four padded simplices."""
        return np.stack([s.mask for s in self.specs])

    @property
    def intersection(self) -> tuple[int, ...]:
        return self.specs[0].index_set

    @property
    def z1(self) -> float:
        c1, c2 = self.config.thresholds
        return max(0.0, math.fsum([c1, c2, -1.0]))

    @property
    def z2(self) -> float:
        return max(0.0, math.fsum([self.config.c1.threshold, -self.z1]))


@functools.lru_cache(maxsize=256)
def build_decomposition(cfg: ConstraintConfig) -> Decomposition:
    if not feasible_exact(cfg):
        raise InfeasibleConfigError("infeasible configuration")
    n = cfg.n_assets
    v1, v2 = set(cfg.v1), set(cfg.v2)
    sets = (sorted(v1 & v2), sorted(v1), sorted(v2), list(range(n)))
    specs = tuple(PaddedSimplexSpec(tuple(k), n) for k in sets)
    return Decomposition(specs, cfg)


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _remainder(z1, z2, z3):
    """``1 - z1 - z2 - z3`` with the partial sums tracked exactly."""
    s, e = _two_sum(z2, z3)
    s2, e2 = _two_sum(s, z1)
    return (1.0 - s2) - (e + e2)


def compute_weights(cfg: ConstraintConfig, sub1, sub2) -> WeightVector:
    """Adaptive mixing weights for one realized pair of leading sub-actions.

    ``z3`` only needs to cover what of ``c2`` is still missing after the first
    two sub-allocations put mass on ``V1 & V2``.
    """
    dec = build_decomposition(cfg)
    inter = list(dec.intersection)
    sub1 = np.asarray(getattr(sub1, "values", sub1), dtype=np.float64)
    sub2 = np.asarray(getattr(sub2, "values", sub2), dtype=np.float64)
    z1, z2 = dec.z1, dec.z2
    shared = z1 * math.fsum(sub1[inter]) + z2 * math.fsum(sub2[inter])
    z3 = max(0.0, math.fsum([cfg.c2.threshold, -shared]))
    z4 = max(0.0, math.fsum([1.0, -z1, -z2, -z3]))
    return WeightVector(z1, z2, z3, z4)


def clean_sub_actions(dec: Decomposition, subs) -> np.ndarray:
    """Validate and tidy a ``(..., 4, N)`` stack of sub-actions.

    Entries below ``CLAMP_BELOW`` are zeroed and each row renormalized.
    """
    subs = np.array(subs, dtype=np.float64)
    masks = dec.masks
    n = dec.config.n_assets
    if subs.shape[-2:] != (4, n):
        raise InvalidInputError("invalid sub-action")
    if not np.all(np.isfinite(subs)) or np.any(subs < -SUB_ACTION_TOL):
        raise InvalidInputError("invalid sub-action")
    if np.any(np.abs(np.where(masks, 0.0, subs)) > SUB_ACTION_TOL):
        raise InvalidInputError("invalid sub-action")
    target = masks.any(axis=1).astype(np.float64)
    if np.any(np.abs(subs.sum(axis=-1) - target) > SUB_ACTION_TOL):
        raise InvalidInputError("invalid sub-action")
    subs = np.where(masks & (subs >= CLAMP_BELOW), subs, 0.0)
    sums = subs.sum(axis=-1, keepdims=True)
    return np.divide(subs, sums, out=np.zeros_like(subs), where=sums > 0)


def weights_batch(dec: Decomposition, subs: np.ndarray) -> np.ndarray:
    """Weights ``(..., 4)`` for a ``(..., 4, N)`` stack, computed branch by branch in sampling order."""
    inter = list(dec.intersection)
    c2 = dec.config.c2.threshold
    z1 = dec.z1
    shared = z1 * subs[..., 0, inter].sum(axis=-1)
    z2 = dec.z2
    shared = shared + z2 * subs[..., 1, inter].sum(axis=-1)
    z3 = np.maximum(0.0, c2 - shared)
    z4 = np.maximum(0.0, _remainder(z1, z2, z3))
    shape = subs.shape[:-2]
    return np.stack(
        [np.full(shape, z1), np.full(shape, z2), np.asarray(z3, dtype=np.float64), z4], axis=-1
    )


def compose(cfg: ConstraintConfig, subs, validate: bool = True) -> np.ndarray:
    """Mix four sub-actions into one allocation.

    ``subs`` is a sequence of four length-N vectors (or :class:`SubAction`),
    or an array of shape ``(..., 4, N)`` for a batch. The result has shape
    ``(..., N)`` and always satisfies both constraints.
    """
    dec = build_decomposition(cfg)
    if not isinstance(subs, np.ndarray):
        subs = np.stack([np.asarray(getattr(s, "values", s), dtype=np.float64) for s in subs])
    subs = clean_sub_actions(dec, subs) if validate else subs
    z = weights_batch(dec, subs)
    return np.einsum("...j,...jn->...n", z, subs)


def membership(cfg: ConstraintConfig, a, tol: float = 1e-9):
    """Row-by-row H-representation check. Vectorized over leading axes."""
    poly = to_h_polytope(cfg)
    a = np.asarray(a, dtype=np.float64)
    rows = np.all(a @ poly.a_matrix.T >= poly.b_vector - tol, axis=-1)
    ok = rows & (np.abs(a @ poly.eq_row - 1.0) <= tol)
    return bool(ok) if ok.ndim == 0 else ok


def _decompose_lp(dec: Decomposition, a: np.ndarray, z3_active: bool):
    """Feasibility LP for one branch of ``z3 = max(0, c2 - z1 - z_{2,cap})``.

    Variables are the four *weighted* sub-allocations restricted to their
    supports, stacked as ``[y1 | y2 | y3 | y4]``.
    """
    n = a.size
    supports = [list(s.index_set) for s in dec.specs]
    if not z3_active:
        supports[2] = []
    sizes = [len(s) for s in supports]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    nv = int(offsets[-1])
    z1, z2 = dec.z1, dec.z2
    c2 = dec.config.c2.threshold
    inter = set(dec.intersection)
    eq_rows, eq_rhs = [], []
    # sum of pieces reproduces a
    for i in range(n):
        row = np.zeros(nv)
        for j, sup in enumerate(supports):
            if i in sup:
                row[offsets[j] + sup.index(i)] = 1.0
        eq_rows.append(row)
        eq_rhs.append(a[i])

    def block_sum(j, coef=1.0, only=None):
        row = np.zeros(nv)
        for k, i in enumerate(supports[j]):
            if only is None or i in only:
                row[offsets[j] + k] = coef
        return row

    if supports[0]:
        eq_rows.append(block_sum(0))
        eq_rhs.append(z1)
    if supports[1]:
        eq_rows.append(block_sum(1))
        eq_rhs.append(z2)
    ub_rows, ub_rhs = [], []
    shared_const = z1 if supports[0] else 0.0
    if z3_active:
        # sum(y3) + sum_{cap}(y2) = c2 - z1, and that target stays >= 0
        eq_rows.append(block_sum(2) + block_sum(1, only=inter))
        eq_rhs.append(c2 - shared_const)
        ub_rows.append(block_sum(1, only=inter))
        ub_rhs.append(c2 - shared_const)
        # sum(y4) = 1 - z2 - c2 + sum_{cap}(y2)
        eq_rows.append(block_sum(3) - block_sum(1, only=inter))
        eq_rhs.append(1.0 - z2 - c2 + (shared_const - z1))
    else:
        # sum_{cap}(y2) >= c2 - z1
        ub_rows.append(-block_sum(1, only=inter))
        ub_rhs.append(-(c2 - shared_const))
        eq_rows.append(block_sum(3))
        eq_rhs.append(1.0 - z1 - z2)
    res = linprog(
        np.zeros(nv),
        A_ub=np.array(ub_rows) if ub_rows else None,
        b_ub=np.array(ub_rhs) if ub_rhs else None,
        A_eq=np.array(eq_rows),
        b_eq=np.array(eq_rhs),
        bounds=[(0.0, None)] * nv,
        method="highs",
    )
    if res.status != 0:
        return None
    pieces = np.zeros((4, n))
    for j, sup in enumerate(supports):
        pieces[j, sup] = np.maximum(res.x[offsets[j] : offsets[j + 1]], 0.0)
    return pieces


def decompose(cfg: ConstraintConfig, a) -> tuple[np.ndarray, WeightVector]:
    """Find sub-actions that compose back to ``a``.

    The preimage is not unique; any valid one is returned. Output is the
    ``(4, N)`` sub-action stack and the weights it induces.
    """
    dec = build_decomposition(cfg)
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (cfg.n_assets,) or not membership(cfg, a):
        raise InvalidInputError("point not in action space")
    a = np.maximum(a, 0.0)
    a = a / a.sum()
    for z3_active in (False, True):
        pieces = _decompose_lp(dec, a, z3_active)
        if pieces is None:
            continue
        subs = np.empty_like(pieces)
        for j, spec in enumerate(dec.specs):
            mass = pieces[j].sum()
            subs[j] = pieces[j] / mass if mass > 1e-12 else spec.uniform()
        subs = clean_sub_actions(dec, subs)
        recon = compose(cfg, subs, validate=False)
        if np.max(np.abs(recon - a)) <= 1e-6:
            return subs, WeightVector(*weights_batch(dec, subs).tolist())
    raise NumericalError("decomposition LP found no preimage")
