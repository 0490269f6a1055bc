"""Two-constraint allocation tasks over an N-asset simplex."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .errors import InfeasibleConfigError, InvalidInputError

DEGENERATE_RADIUS = 1e-9


class Direction(enum.Enum):
    GREATER_EQUAL = "ge"
    LESS_EQUAL = "le"


@dataclass(frozen=True)
class AssetUniverse:
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise InvalidInputError("asset universe needs at least 2 assets")
        if len(set(labels)) != len(labels):
            raise InvalidInputError("asset labels must be unique")

    @property
    def n_assets(self) -> int:
        return len(self.labels)

    @property
    def indices(self) -> frozenset[int]:
        return frozenset(range(self.n_assets))

    @classmethod
    def default(cls, n_assets: int, cash: bool = True) -> "AssetUniverse":
        if cash:
            return cls(("CASH",) + tuple(f"A{i}" for i in range(1, n_assets)))
        return cls(tuple(f"A{i}" for i in range(n_assets)))


@dataclass(frozen=True)
class AllocationConstraint:
    """``sum(x[assets]) >= threshold`` (or ``<=`` for LESS_EQUAL)."""

    assets: tuple[int, ...]
    threshold: float
    direction: Direction = Direction.GREATER_EQUAL

    def __post_init__(self):
        assets = tuple(sorted({int(i) for i in self.assets}))
        object.__setattr__(self, "assets", assets)
        object.__setattr__(self, "threshold", float(self.threshold))
        if not 0.0 <= self.threshold <= 1.0:
            raise InvalidInputError(f"threshold {self.threshold} outside [0, 1]")


def normalize_constraint(c: AllocationConstraint, universe: AssetUniverse) -> AllocationConstraint:
    """Rewrite a less-equal constraint as greater-equal on the complement set.

    ``sum(x[V]) <= c`` on the simplex is the same set as ``sum(x[I \\ V]) >= 1 - c``.
    """
    idx = universe.indices
    if not set(c.assets) <= idx:
        raise InvalidInputError(f"constraint assets {c.assets} not in universe of size {universe.n_assets}")
    if c.direction is Direction.GREATER_EQUAL:
        return c
    complement = idx - set(c.assets)
    if not complement:
        raise InvalidInputError("degenerate complement")
    return AllocationConstraint(tuple(complement), 1.0 - c.threshold, Direction.GREATER_EQUAL)


@dataclass(frozen=True)
class ConstraintConfig:
    universe: AssetUniverse
    c1: AllocationConstraint
    c2: AllocationConstraint
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "c1", normalize_constraint(self.c1, self.universe))
        object.__setattr__(self, "c2", normalize_constraint(self.c2, self.universe))

    @classmethod
    def build(cls, n_assets: int, v1, c1: float, v2, c2: float, seed: int = 0, cash: bool = True):
        """Shorthand for two greater-equal constraints on a default universe."""
        return cls(
            AssetUniverse.default(n_assets, cash=cash),
            AllocationConstraint(tuple(v1), c1),
            AllocationConstraint(tuple(v2), c2),
            seed,
        )

    @classmethod
    def unconstrained(cls, n_assets: int, cash: bool = True) -> "ConstraintConfig":
        return cls.build(n_assets, (0,), 0.0, (0,), 0.0, cash=cash)

    @property
    def n_assets(self) -> int:
        return self.universe.n_assets

    @property
    def v1(self) -> tuple[int, ...]:
        return self.c1.assets

    @property
    def v2(self) -> tuple[int, ...]:
        return self.c2.assets

    @property
    def thresholds(self) -> tuple[float, float]:
        return self.c1.threshold, self.c2.threshold

    def to_dict(self) -> dict:
        return {
            "universe": list(self.universe.labels),
            "v1": list(self.v1),
            "c1": self.c1.threshold,
            "v2": list(self.v2),
            "c2": self.c2.threshold,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintConfig":
        try:
            return cls(
                AssetUniverse(tuple(d["universe"])),
                AllocationConstraint(tuple(d["v1"]), d["c1"]),
                AllocationConstraint(tuple(d["v2"]), d["c2"]),
                int(d.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed config document: {exc}") from exc


def save_configs(configs, path) -> None:
    configs = list(configs)
    doc = configs[0].to_dict() if len(configs) == 1 else [c.to_dict() for c in configs]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_configs(path) -> list[ConstraintConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
    if isinstance(doc, dict):
        doc = [doc]
    return [ConstraintConfig.from_dict(d) for d in doc]


@dataclass(frozen=True)
class HPolytope:
    """Rows ``a_matrix @ x >= b_vector`` together with ``eq_row @ x == 1``."""

    a_matrix: np.ndarray
    b_vector: np.ndarray
    eq_row: np.ndarray = field(repr=False)

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(
            np.all(self.a_matrix @ x >= self.b_vector - tol) and abs(self.eq_row @ x - 1.0) <= tol
        )


def to_h_polytope(cfg: ConstraintConfig) -> HPolytope:
    n = cfg.n_assets
    rows = [np.eye(n)]
    b = [np.zeros(n)]
    for con in (cfg.c1, cfg.c2):
        row = np.zeros(n)
        row[list(con.assets)] = 1.0
        rows.append(row[None, :])
        b.append(np.array([con.threshold]))
    return HPolytope(np.vstack(rows), np.concatenate(b), np.ones(n))


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    point: np.ndarray | None
    radius: float

    def __bool__(self) -> bool:
        return self.feasible

    @property
    def degenerate(self) -> bool:
        """Feasible but with no interior inside the ``sum(x) = 1`` slice."""
        return self.feasible and self.radius <= DEGENERATE_RADIUS


def chebyshev_center(poly: HPolytope) -> Feasibility:
    """Largest ball inside the polytope, measured within the affine slice ``sum(x) = 1``."""
    a, b = poly.a_matrix, poly.b_vector
    m, n = a.shape
    # row norms of the projection onto the sum-zero tangent space
    proj = a - a.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(proj, axis=1)
    norms[norms < 1e-12] = 0.0
    # variables (x, r); maximize r  <=>  minimize -r
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    a_ub = np.hstack([-a, norms[:, None]])
    b_ub = -b
    a_eq = np.hstack([poly.eq_row, [0.0]])[None, :]
    bounds = [(None, None)] * n + [(0.0, 1.0)]
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0], bounds=bounds, method="highs")
    if res.status == 2:
        return Feasibility(False, None, 0.0)
    if res.status != 0:
        raise InfeasibleConfigError(f"feasibility LP failed: {res.message}")
    x = np.maximum(res.x[:n], 0.0)
    x /= x.sum()
    return Feasibility(True, x, float(max(res.x[-1], 0.0)))


def feasible_exact(cfg: ConstraintConfig, tol: float = 1e-12) -> bool:
    """Closed-form nonemptiness test, no LP.

    Mass ``p`` on ``V1 & V2``, ``q`` on ``V1 - V2`` and ``r`` on ``V2 - V1``
    must satisfy ``p + q >= c1``, ``p + r >= c2`` and ``p + q + r <= 1``. The
    least total mass is convex piecewise linear in ``p``, so checking the
    kinks is enough.
    """
    v1, v2 = set(cfg.v1), set(cfg.v2)
    c1, c2 = cfg.thresholds
    if c1 > 1.0 + tol or c2 > 1.0 + tol:
        return False
    p_lo = max(0.0, c1 if not v1 - v2 else 0.0, c2 if not v2 - v1 else 0.0)
    p_hi = 1.0 if v1 & v2 else 0.0
    if p_lo > p_hi + tol:
        return False
    candidates = {p_lo, min(max(p_lo, min(c1, c2)), p_hi), min(max(p_lo, max(c1, c2)), p_hi)}
    least = min(math.fsum([p, max(0.0, c1 - p), max(0.0, c2 - p)]) for p in candidates)
    return least <= 1.0 + tol


def is_feasible(cfg: ConstraintConfig) -> Feasibility:
    """Nonemptiness of the constrained polytope via the Chebyshev-center LP.

    Returns a truthy :class:`Feasibility` whose ``point`` is the Chebyshev
    center; ``degenerate`` flags polytopes with zero radius.
    """
    return chebyshev_center(to_h_polytope(cfg))


def generate_random_config(
    universe: AssetUniverse | int, seed: int, max_attempts: int = 1000
) -> ConstraintConfig:
    """Draw a feasible two-constraint task.

    Per constraint: subset size uniform on ``1..N-1``, members drawn without
    replacement, threshold uniform on ``[0, 1]``. The whole configuration is
    redrawn until the polytope is nonempty.
    """
    if isinstance(universe, int):
        universe = AssetUniverse.default(universe)
    n = universe.n_assets
    if n < 3:
        raise InvalidInputError("random configs need at least 3 assets")
    if max_attempts < 1:
        raise InvalidInputError("max_attempts must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        cons = []
        for _j in range(2):
            k = int(rng.integers(1, n))
            members = rng.choice(n, size=k, replace=False)
            threshold = float(rng.uniform(0.0, 1.0))
            cons.append(AllocationConstraint(tuple(int(i) for i in members), threshold))
        cfg = ConstraintConfig(universe, cons[0], cons[1], int(seed))
        if is_feasible(cfg):
            return cfg
    raise InfeasibleConfigError("no feasible configuration found")
