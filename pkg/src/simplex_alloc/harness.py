"""Experiment orchestration and evaluation metrics.

Per experiment and environment (``sim`` or ``bt``) each approach gets a mean
episode return with a confidence interval across trajectories, plus its
difference to the random baseline. Across experiments these are averaged into
the summary tables, with confidence intervals across experiments.
"""
from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .constraints import ConstraintConfig
from .errors import InvalidInputError
from .market import DEFAULT_KAPPA, HORIZON, MarketModel, run_backtest, simulate_nu
from .policy import DecompositionPolicy
from .sampler import UniformPolicy
from .trainer import Z95, TrainConfig, train

log = logging.getLogger(__name__)

POLICY = "CAOSD"
RANDOM = "RANDOM"
EXTERNAL_PREFIX = "EXTERNAL:"
ENVS = ("sim", "bt")


@dataclass
class ExperimentSpec:
    config: ConstraintConfig
    market: MarketModel
    approaches: tuple[str, ...] = (POLICY, RANDOM)
    eval_episodes: int = 1000
    bt_random_episodes: int = 1000
    seed: int = 0
    backtest_returns: np.ndarray | None = None
    external: dict = field(default_factory=dict)
    horizon: int = HORIZON
    kappa: float = DEFAULT_KAPPA
    strict: bool = True
    name: str = ""

    def __post_init__(self):
        if self.eval_episodes < 2:
            raise InvalidInputError("eval_episodes must be >= 2")
        for a in self.approaches:
            if a not in (POLICY, RANDOM) and not a.startswith(EXTERNAL_PREFIX):
                raise InvalidInputError(f"unknown approach {a!r}")

    @property
    def envs(self) -> tuple[str, ...]:
        return ENVS if self.backtest_returns is not None else ("sim",)


@dataclass(frozen=True)
class MetricsReport:
    approach: str
    env: str
    n: int
    mean: float
    ci_lo: float
    ci_hi: float
    delta: float
    delta_ci_lo: float
    delta_ci_hi: float
    ci_scope: str = "trajectories"


def read_nu_csv(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    if not rows or "nu" not in rows[0]:
        raise InvalidInputError(f"{path} needs a 'nu' column")
    return np.array([float(r["nu"]) for r in rows])


def write_nu_csv(path, nus) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "nu"])
        for i, v in enumerate(nus):
            w.writerow([i, repr(float(v))])


def evaluate_approach(approach: str, spec: ExperimentSpec, env: str = "sim",
                      policy: DecompositionPolicy | None = None) -> np.ndarray:
    """Episode returns for one approach.

    The trained policy acts deterministically: ``eval_episodes`` simulated
    episodes, or the single historical path in backtest. The random baseline
    is stochastic in both environments and always gets many rollouts.
    """
    cfg = spec.config
    if env not in ENVS:
        raise InvalidInputError(f"unknown environment {env!r}")
    if env == "bt" and spec.backtest_returns is None:
        raise InvalidInputError("no backtest returns for this experiment")
    if approach == POLICY:
        if policy is None:
            raise InvalidInputError("missing checkpoint for the trained policy")
        if env == "sim":
            return simulate_nu(spec.market, cfg, policy.deterministic_action, spec.eval_episodes,
                               spec.seed + 101, spec.horizon, spec.kappa, strict=spec.strict)
        rec = run_backtest(spec.backtest_returns, policy.deterministic_action, cfg, spec.horizon,
                           spec.kappa, strict=spec.strict, cash_index=spec.market.cash_index)
        return np.array([rec.nu])
    if approach == RANDOM:
        sampler = UniformPolicy(cfg, spec.seed + 202)
        if env == "sim":
            return simulate_nu(spec.market, cfg, sampler, spec.eval_episodes, spec.seed + 101,
                               spec.horizon, spec.kappa, strict=spec.strict)
        return np.array([
            run_backtest(spec.backtest_returns, sampler, cfg, spec.horizon, spec.kappa,
                         strict=spec.strict, cash_index=spec.market.cash_index).nu
            for _ in range(spec.bt_random_episodes)
        ])
    if approach.startswith(EXTERNAL_PREFIX):
        name = approach[len(EXTERNAL_PREFIX):]
        src = spec.external.get(name)
        if isinstance(src, dict):
            src = src.get(env)
        if src is None:
            raise InvalidInputError(f"missing result CSV for external approach {name!r} ({env})")
        return read_nu_csv(src)
    raise InvalidInputError(f"unknown approach {approach!r}")


def _half_width(values, z=Z95):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return z * float(values.std(ddof=1)) / float(np.sqrt(values.size))


def bootstrap_ci(values, rng: np.random.Generator, n_boot: int = 10_000, level: float = 0.95):
    values = np.asarray(values, dtype=np.float64)
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(min(lo, values.mean())), float(max(hi, values.mean()))


def experiment_metrics(nus: dict[str, np.ndarray], env: str) -> dict[str, MetricsReport]:
    """Mean, trajectory-level CI and delta to the random baseline for each approach."""
    base = nus.get(RANDOM)
    out = {}
    for app, vals in nus.items():
        vals = np.asarray(vals, dtype=np.float64)
        mean = float(vals.mean())
        h = _half_width(vals)
        if base is not None:
            delta = mean - float(np.mean(base))
            var = (vals.var(ddof=1) / vals.size if vals.size > 1 else 0.0) + (
                np.var(base, ddof=1) / len(base) if len(base) > 1 else 0.0
            )
            dh = Z95 * float(np.sqrt(var)) if app != RANDOM else 0.0
        else:
            delta, dh = float("nan"), float("nan")
        out[app] = MetricsReport(app, env, int(vals.size), mean, mean - h, mean + h, delta, delta - dh, delta + dh)
    return out


def aggregate(reports: dict[str, list[MetricsReport]], ci: str = "normal", seed: int = 0) -> list[dict]:
    """Cross-experiment summary rows ``theta`` (mean of means) and ``delta`` with 95% CIs.

    ``reports`` maps an experiment id to its list of :class:`MetricsReport`.
    Every experiment must cover the same (env, approach) pairs.
    """
    if not reports:
        raise InvalidInputError("nothing to aggregate")
    keysets = {eid: {(r.env, r.approach) for r in reps} for eid, reps in reports.items()}
    first = next(iter(keysets.values()))
    if any(k != first for k in keysets.values()):
        raise InvalidInputError("mismatched experiment sets across approaches")
    rng = np.random.default_rng(seed)
    rows = []
    for env, app in sorted(first, key=lambda k: (ENVS.index(k[0]) if k[0] in ENVS else 9, k[1])):
        picked = [next(r for r in reps if r.env == env and r.approach == app) for reps in reports.values()]
        means = np.array([r.mean for r in picked])
        deltas = np.array([r.delta for r in picked])
        row = {"env": env, "approach": app, "n_experiments": len(picked)}
        for key, vals in (("theta", means), ("delta", deltas)):
            m = float(vals.mean())
            if ci == "bootstrap" and vals.size > 1 and np.all(np.isfinite(vals)):
                lo, hi = bootstrap_ci(vals, rng)
            else:
                h = _half_width(vals)
                lo, hi = m - h, m + h
            row[key], row[f"{key}_ci_lo"], row[f"{key}_ci_hi"] = m, lo, hi
        row["ci_scope"] = "experiments"
        rows.append(row)
    return rows


def _write_metrics(path, reports: list[MetricsReport]) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in reports], indent=2) + "\n")


def _read_metrics(path) -> list[MetricsReport]:
    return [MetricsReport(**d) for d in json.loads(Path(path).read_text())]


def run_experiment(spec: ExperimentSpec, tconf: TrainConfig, out_dir) -> list[MetricsReport]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(spec.config.to_dict(), indent=2) + "\n")
    policy = None
    if POLICY in spec.approaches:
        policy = train(spec.config, spec.market, tconf, out_dir=out).policy
    reports = []
    for env in spec.envs:
        nus = {}
        for app in spec.approaches:
            nus[app] = evaluate_approach(app, spec, env, policy)
            write_nu_csv(out / f"nu_{env}_{app.replace(':', '_')}.csv", nus[app])
        reports.extend(experiment_metrics(nus, env).values())
    _write_metrics(out / "metrics.json", reports)
    return reports


def run_experiment_matrix(specs: list[ExperimentSpec], tconf: TrainConfig, out_dir, ci: str = "normal") -> Path:
    """One subdirectory per experiment plus summary tables; failures are logged and skipped."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, spec in enumerate(specs):
        sub = out / (spec.name or f"exp_{i:03d}")
        exp_tconf = TrainConfig.from_dict({**tconf.to_dict(), "seed": tconf.seed + spec.seed})
        try:
            run_experiment(spec, exp_tconf, sub)
        except Exception as exc:  # noqa: BLE001 - the matrix keeps going
            log.error("experiment %s failed: %s", sub.name, exc)
            sub.mkdir(parents=True, exist_ok=True)
            (sub / "error.txt").write_text(traceback.format_exc())
    summarize(out, ci=ci)
    return out


def summarize(result_dir, ci: str = "normal") -> list[dict]:
    """Rebuild the summary tables from the per-experiment ``metrics.json`` files."""
    root = Path(result_dir)
    reports = {p.parent.name: _read_metrics(p) for p in sorted(root.glob("*/metrics.json"))}
    if not reports:
        raise InvalidInputError(f"no metrics.json files under {root}")
    rows = aggregate(reports, ci=ci)
    with open(root / "summary_theta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env", "approach", "theta", "upper_95_ci", "lower_95_ci", "n_experiments"])
        for r in rows:
            w.writerow([r["env"], r["approach"], repr(r["theta"]), repr(r["theta_ci_hi"]),
                        repr(r["theta_ci_lo"]), r["n_experiments"]])
    with open(root / "summary_delta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env", "approach", "delta", "upper_95_ci", "lower_95_ci", "n_experiments"])
        for r in rows:
            if r["approach"] == RANDOM:
                continue
            w.writerow([r["env"], r["approach"], repr(r["delta"]), repr(r["delta_ci_hi"]),
                        repr(r["delta_ci_lo"]), r["n_experiments"]])
    (root / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows
