"""Monthly price ingestion, Gaussian HMM return model and portfolio environments."""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .constraints import ConstraintConfig
from .decomposition import membership
from .errors import InvalidInputError, NumericalError

log = logging.getLogger(__name__)

HORIZON = 12
DEFAULT_KAPPA = 1e-3
MIN_RETURN = -0.99
_COLLAPSE_VAR = 1e-10
_RIDGE = 1e-6


# ------------------------------------------------------------------ price data


@dataclass(frozen=True)
class PriceTable:
    dates: tuple[dt.date, ...]
    prices: np.ndarray
    labels: tuple[str, ...]

    @property
    def n_rows(self) -> int:
        return len(self.dates)


def ingest_prices(csv_source) -> PriceTable:
    """Read ``date,LABEL1,...`` CSV (path, file object or CSV text).

    Rows are returned sorted; the input itself must already be in date order.
    """
    if hasattr(csv_source, "read"):
        text = csv_source.read()
    elif isinstance(csv_source, Path) or (isinstance(csv_source, str) and "\n" not in csv_source):
        try:
            text = Path(csv_source).read_text()
        except OSError as exc:
            raise InvalidInputError(f"cannot read {csv_source}: {exc}") from exc
    else:
        text = csv_source
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if len(rows) < 2:
        raise InvalidInputError("price file needs a header and at least one row")
    header = [h.strip() for h in rows[0]]
    if header[0].lower() != "date" or len(header) < 2:
        raise InvalidInputError("header must be 'date,LABEL1,...'")
    labels = tuple(header[1:])
    dates, prices = [], []
    for r in rows[1:]:
        if len(r) != len(header) or any(c.strip() == "" for c in r):
            raise InvalidInputError("incomplete series")
        try:
            dates.append(dt.date.fromisoformat(r[0].strip()))
            vals = [float(c) for c in r[1:]]
        except ValueError as exc:
            raise InvalidInputError(f"unparseable row {r}: {exc}") from exc
        if any(not np.isfinite(v) or v <= 0 for v in vals):
            raise InvalidInputError("invalid price")
        prices.append(vals)
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise InvalidInputError("unsorted input")
    return PriceTable(tuple(dates), np.array(prices, dtype=np.float64), labels)


def write_prices(table: PriceTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *table.labels])
        for d, row in zip(table.dates, table.prices):
            w.writerow([d.isoformat(), *(repr(float(x)) for x in row)])


def to_returns(table: PriceTable) -> np.ndarray:
    """Simple returns ``p[t+1] / p[t] - 1``, shape ``(T - 1, n_labels)``."""
    if table.n_rows < 2:
        raise InvalidInputError("need at least 2 price rows")
    p = table.prices
    return p[1:] / p[:-1] - 1.0


def with_cash(returns: np.ndarray) -> np.ndarray:
    """Prepend the zero-return cash column at index 0."""
    returns = np.atleast_2d(returns)
    return np.hstack([np.zeros((returns.shape[0], 1)), returns])


# ----------------------------------------------------------------- HMM model


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class MarketModel:
    transition: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    initial_dist: np.ndarray
    labels: tuple[str, ...] = ()
    cash_index: int | None = 0
    log_likelihood: float = float("nan")
    _factors: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("transition", "means", "covariances", "initial_dist"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h = self.transition.shape[0]
        n = self.means.shape[1]
        if self.transition.shape != (h, h) or self.means.shape[0] != h:
            raise InvalidInputError("inconsistent HMM shapes")
        if self.covariances.shape != (h, n, n) or self.initial_dist.shape != (h,):
            raise InvalidInputError("inconsistent HMM shapes")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-10):
            raise InvalidInputError("transition rows must be stochastic")
        if not np.allclose(self.covariances, np.swapaxes(self.covariances, 1, 2), atol=1e-12):
            raise InvalidInputError("covariances must be symmetric")
        if np.min(np.linalg.eigvalsh(self.covariances)) < -1e-10:
            raise InvalidInputError("covariances must be positive semidefinite")
        if self.cash_index is not None:
            c = self.cash_index
            if np.any(self.means[:, c] != 0) or np.any(self.covariances[:, c, :] != 0):
                raise InvalidInputError("cash asset must have zero mean and variance")
        object.__setattr__(self, "_factors", np.stack([_psd_factor(c) for c in self.covariances]))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_assets(self) -> int:
        return self.means.shape[1]

    def stationary(self) -> np.ndarray:
        w, v = np.linalg.eig(self.transition.T)
        pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        return pi / pi.sum()

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "transition": self.transition.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "labels": list(self.labels),
            "cash_index": self.cash_index,
            "log_likelihood": self.log_likelihood,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarketModel":
        try:
            return cls(
                d["transition"], d["means"], d["covariances"], d["initial_dist"],
                tuple(d.get("labels", ())), d.get("cash_index", 0),
                float(d.get("log_likelihood", float("nan"))),
            )
        except KeyError as exc:
            raise InvalidInputError(f"model document missing {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "MarketModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read model {path}: {exc}") from exc


def _log_emission(x, means, covs, diagonal):
    t, d = x.shape
    h = means.shape[0]
    out = np.empty((t, h))
    for k in range(h):
        diff = x - means[k]
        if diagonal:
            var = np.diag(covs[k])
            out[:, k] = -0.5 * (np.sum(np.log(2 * np.pi * var)) + np.sum(diff**2 / var, axis=1))
        else:
            chol = np.linalg.cholesky(covs[k])
            sol = np.linalg.solve(chol, diff.T)
            out[:, k] = -0.5 * (d * np.log(2 * np.pi) + np.sum(sol**2, axis=0)) - np.sum(
                np.log(np.diag(chol))
            )
    return out


def _regularize(cov, diagonal):
    if diagonal:
        cov = np.diag(np.diag(cov))
    ok = np.min(np.diag(cov)) > _COLLAPSE_VAR
    if ok and not diagonal:
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            ok = False
    if ok:
        return cov
    cov = cov + _RIDGE * np.eye(cov.shape[0])
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance collapse not fixed by regularization") from exc
    return cov


def _m_step(x, gamma, diagonal):
    weights = gamma.sum(axis=0)
    h = gamma.shape[1]
    d = x.shape[1]
    means = (gamma.T @ x) / weights[:, None]
    covs = np.empty((h, d, d))
    for k in range(h):
        diff = x - means[k]
        covs[k] = _regularize((gamma[:, k, None] * diff).T @ diff / weights[k], diagonal)
    return means, covs


def _init_params(x, n_states, rng, diagonal):
    t = x.shape[0]
    centers = x[rng.choice(t, size=n_states, replace=False)]
    for _ in range(10):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        for k in range(n_states):
            if np.any(assign == k):
                centers[k] = x[assign == k].mean(axis=0)
    gamma = np.full((t, n_states), 0.05 / max(n_states - 1, 1))
    gamma[np.arange(t), assign] = 0.95 if n_states > 1 else 1.0
    means, covs = _m_step(x, gamma, diagonal)
    trans = np.full((n_states, n_states), 0.1 / max(n_states - 1, 1))
    np.fill_diagonal(trans, 0.9 if n_states > 1 else 1.0)
    return np.full(n_states, 1.0 / n_states), trans, means, covs


def baum_welch(x, initial, trans, means, covs, diagonal=True, max_iter=500, tol=1e-6):
    """EM iterations from the given start; returns the parameters and the log-likelihood trace."""
    trace = []
    for _ in range(max_iter):
        log_b = _log_emission(x, means, covs, diagonal)
        gamma, xi_sum, ll = kernels.forward_backward(log_b, trans, initial)
        if not np.isfinite(ll):
            raise NumericalError("non-finite HMM log-likelihood")
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        initial = gamma[0] / gamma[0].sum()
        trans = xi_sum / xi_sum.sum(axis=1, keepdims=True)
        means, covs = _m_step(x, gamma, diagonal)
    return initial, trans, means, covs, trace


def fit_hmm(
    returns: np.ndarray,
    n_states: int = 4,
    seed: int = 0,
    restarts: int = 5,
    covariance: str = "diag",
    cash: bool = True,
    labels=(),
    max_iter: int = 500,
    tol: float = 1e-6,
) -> MarketModel:
    """Gaussian HMM on the risky-asset returns, best of ``restarts`` seeded runs.

    With ``cash=True`` a zero-mean, zero-variance cash asset is inserted at
    index 0 of the returned model.
    """
    x = np.asarray(returns, dtype=np.float64)
    if x.ndim != 2 or n_states < 1:
        raise InvalidInputError("returns must be 2-D and n_states >= 1")
    if x.shape[0] < 10 * n_states:
        raise InvalidInputError(f"need at least {10 * n_states} rows for {n_states} states")
    if covariance not in ("diag", "full"):
        raise InvalidInputError("covariance must be 'diag' or 'full'")
    diagonal = covariance == "diag"
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(restarts, 1)):
        start = _init_params(x, n_states, rng, diagonal)
        fit = baum_welch(x, *start, diagonal=diagonal, max_iter=max_iter, tol=tol)
        if best is None or fit[4][-1] > best[4][-1]:
            best = fit
    initial, trans, means, covs, trace = best
    trans = trans / trans.sum(axis=1, keepdims=True)
    if cash:
        h, d = means.shape
        means = np.hstack([np.zeros((h, 1)), means])
        padded = np.zeros((h, d + 1, d + 1))
        padded[:, 1:, 1:] = covs
        covs = padded
        labels = ("CASH", *labels) if labels else ()
    model = MarketModel(trans, means, covs, initial, tuple(labels), 0 if cash else None, float(trace[-1]))
    object.__setattr__(model, "fit_trace", tuple(trace))
    return model


def simulate_step(model: MarketModel, hidden_state, rng: np.random.Generator):
    """Advance the hidden chain one step and draw asset returns from the new state.

    ``hidden_state`` may be an int or an int array of independent chains.
    """
    s = np.atleast_1d(np.asarray(hidden_state, dtype=np.int64))
    u = rng.random(s.shape[0])
    cum = np.cumsum(model.transition[s], axis=1)
    nxt = np.minimum((cum <= u[:, None]).sum(axis=1), model.n_states - 1)
    eps = rng.standard_normal((s.shape[0], model.n_assets))
    ret = model.means[nxt] + np.einsum("bij,bj->bi", model._factors[nxt], eps)
    if model.cash_index is not None:
        ret[:, model.cash_index] = 0.0
    if np.ndim(hidden_state) == 0:
        return int(nxt[0]), ret[0]
    return nxt, ret


def synthetic_model(n_risky: int = 6, seed: int = 0, cash: bool = True) -> MarketModel:
    """Two-regime market with spread-out asset drifts, for demos and tests."""
    rng = np.random.default_rng(seed)
    drift = np.linspace(-0.005, 0.025, n_risky)
    rng.shuffle(drift)
    vol = rng.uniform(0.03, 0.07, n_risky)
    means = np.stack([drift + 0.01, drift - 0.015])
    covs = np.stack([np.diag(vol**2), np.diag((1.6 * vol) ** 2)])
    trans = np.array([[0.9, 0.1], [0.2, 0.8]])
    labels = tuple(f"S{i}" for i in range(n_risky))
    if cash:
        means = np.hstack([np.zeros((2, 1)), means])
        padded = np.zeros((2, n_risky + 1, n_risky + 1))
        padded[:, 1:, 1:] = covs
        covs = padded
        labels = ("CASH", *labels)
    return MarketModel(trans, means, covs, np.array([2 / 3, 1 / 3]), labels, 0 if cash else None)


def synthetic_prices(model: MarketModel, n_months: int, seed: int, start=dt.date(2010, 1, 31)) -> PriceTable:
    """Price paths for the risky assets of ``model`` at month ends."""
    rng = np.random.default_rng(seed)
    state = int(rng.choice(model.n_states, p=model.initial_dist))
    rets = []
    for _ in range(n_months - 1):
        state, r = simulate_step(model, state, rng)
        rets.append(np.maximum(r, MIN_RETURN))
    rets = np.array(rets)
    keep = [i for i in range(model.n_assets) if i != model.cash_index]
    prices = 100.0 * np.vstack([np.ones(len(keep)), np.cumprod(1.0 + rets[:, keep], axis=0)])
    dates, y, m = [], start.year, start.month
    for _ in range(n_months):
        nxt = dt.date(y + (m // 12), m % 12 + 1, 1)
        dates.append(nxt - dt.timedelta(days=1))
        y, m = nxt.year, nxt.month
    labels = tuple(model.labels[i] for i in keep) if model.labels else tuple(f"S{i}" for i in keep)
    return PriceTable(tuple(dates), prices, labels)


# ---------------------------------------------------------------- environment


@dataclass(frozen=True)
class Observation:
    wealth: float
    allocation: np.ndarray
    last_returns: np.ndarray

    def features(self) -> np.ndarray:
        return observation_features(self.wealth, self.allocation, self.last_returns)


def observation_features(wealth, allocation, last_returns) -> np.ndarray:
    """Flat ``[wealth, allocation, last_returns]`` rows, shape ``(..., 2N + 1)``."""
    wealth = np.asarray(wealth, dtype=np.float64)
    return np.concatenate([wealth[..., None], allocation, last_returns], axis=-1)


def split_features(features: np.ndarray, n_assets: int):
    return features[..., 0], features[..., 1 : 1 + n_assets], features[..., 1 + n_assets :]


@dataclass(frozen=True)
class StepRecord:
    observation: Observation
    allocation: np.ndarray
    asset_returns: np.ndarray
    transaction_cost: float
    reward: float


@dataclass(frozen=True)
class EpisodeRecord:
    steps: tuple[StepRecord, ...]
    nu: float
    final_wealth: float


def turnover_cost(holdings, action, kappa):
    return kappa * np.abs(np.asarray(action) - np.asarray(holdings)).sum(axis=-1)


def env_step(wealth, holdings, action, asset_returns, kappa=DEFAULT_KAPPA):
    """One rebalance-and-hold period.

    ``holdings`` is the previous allocation after drifting with the last
    returns. Returns ``(wealth', holdings', reward, tc)``; vectorized over
    leading axes.
    """
    action = np.asarray(action, dtype=np.float64)
    asset_returns = np.asarray(asset_returns, dtype=np.float64)
    tc = turnover_cost(holdings, action, kappa)
    port = np.sum(action * asset_returns, axis=-1)
    reward = port - tc
    new_wealth = np.asarray(wealth) * (1.0 + reward)
    grown = action * (1.0 + asset_returns)
    total = grown.sum(axis=-1, keepdims=True)
    new_holdings = np.where(total > 0, grown / np.where(total > 0, total, 1.0), action)
    return new_wealth, new_holdings, reward, tc


def _check_actions(cfg, actions, strict, ok=None):
    ok = membership(cfg, actions) if ok is None else ok
    if np.all(ok):
        return actions
    if strict:
        raise InvalidInputError("action violates the allocation constraints")
    log.warning("clipping %d non-member actions", int(np.sum(~np.atleast_1d(ok))))
    fixed = np.maximum(actions, 0.0)
    return fixed / fixed.sum(axis=-1, keepdims=True)


def default_initial_allocation(n_assets: int, cash_index: int | None) -> np.ndarray:
    if cash_index is None:
        return np.full(n_assets, 1.0 / n_assets)
    a = np.zeros(n_assets)
    a[cash_index] = 1.0
    return a


class SimulationEnv:
    """Batch of independent HMM-driven episodes of fixed horizon.

    All member episodes start and end together; ``step`` auto-resets after the
    final period and then returns the first observation of the next episode.
    """

    def __init__(
        self,
        model: MarketModel,
        cfg: ConstraintConfig,
        n_envs: int = 1,
        horizon: int = HORIZON,
        kappa: float = DEFAULT_KAPPA,
        seed: int = 0,
        strict: bool = True,
        initial_wealth: float = 1.0,
        initial_allocation=None,
    ):
        if model.n_assets != cfg.n_assets:
            raise InvalidInputError("model and config disagree on the number of assets")
        self.model, self.cfg = model, cfg
        self.n_envs, self.horizon, self.kappa, self.strict = n_envs, horizon, kappa, strict
        self.initial_wealth = initial_wealth
        if initial_allocation is None:
            initial_allocation = default_initial_allocation(cfg.n_assets, model.cash_index)
        self.initial_allocation = np.asarray(initial_allocation, dtype=np.float64)
        self.rng = np.random.default_rng(seed)
        self.violations = 0
        self.reset()

    def reset(self) -> np.ndarray:
        b, n = self.n_envs, self.cfg.n_assets
        self.t = 0
        self.hidden = self.rng.choice(self.model.n_states, size=b, p=self.model.initial_dist)
        self.wealth = np.full(b, self.initial_wealth)
        self.allocation = np.tile(self.initial_allocation, (b, 1))
        self.holdings = self.allocation.copy()
        self.last_returns = np.zeros((b, n))
        self.episode_nu = np.zeros(b)
        return self.features()

    def features(self) -> np.ndarray:
        return observation_features(self.wealth, self.allocation, self.last_returns)

    def time_fraction(self) -> np.ndarray:
        return np.full(self.n_envs, self.t / self.horizon)

    def step(self, actions: np.ndarray):
        actions = np.asarray(actions, dtype=np.float64).reshape(self.n_envs, -1)
        ok = membership(self.cfg, actions)
        self.violations += int(np.sum(~ok))
        actions = _check_actions(self.cfg, actions, self.strict, ok)
        self.hidden, rets = simulate_step(self.model, self.hidden, self.rng)
        rets = np.maximum(rets, MIN_RETURN)
        self.wealth, self.holdings, reward, tc = env_step(self.wealth, self.holdings, actions, rets, self.kappa)
        self.allocation = actions
        self.last_returns = rets
        self.episode_nu += reward
        self.t += 1
        done = self.t >= self.horizon
        info = {"tc": tc, "returns": rets}
        if done:
            info["episode_nu"] = self.episode_nu.copy()
            self.reset()
        return self.features(), reward, np.full(self.n_envs, done), info


def simulate_nu(
    model: MarketModel,
    cfg: ConstraintConfig,
    policy_fn: Callable[[np.ndarray], np.ndarray],
    n_episodes: int,
    seed: int,
    horizon: int = HORIZON,
    kappa: float = DEFAULT_KAPPA,
    batch: int = 100,
    strict: bool = True,
) -> np.ndarray:
    """Episode returns ``nu`` of ``policy_fn`` in the simulated market."""
    out = []
    env = SimulationEnv(model, cfg, n_envs=min(batch, n_episodes), horizon=horizon, kappa=kappa,
                        seed=seed, strict=strict)
    remaining = n_episodes
    while remaining > 0:
        feats = env.reset()
        for _ in range(horizon):
            feats, _, done, info = env.step(policy_fn(feats))
        out.append(info["episode_nu"][: min(remaining, env.n_envs)])
        remaining -= env.n_envs
    return np.concatenate(out)[:n_episodes]


def run_backtest(
    returns: np.ndarray,
    policy_fn: Callable[[np.ndarray], np.ndarray],
    cfg: ConstraintConfig,
    horizon: int = HORIZON,
    kappa: float = DEFAULT_KAPPA,
    strict: bool = True,
    initial_wealth: float = 1.0,
    initial_allocation=None,
    cash_index: int | None = 0,
) -> EpisodeRecord:
    """Replay realized returns (cash column included) under a frozen policy."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.ndim != 2 or returns.shape[1] != cfg.n_assets:
        raise InvalidInputError("backtest returns must have one column per asset")
    if returns.shape[0] < horizon:
        raise InvalidInputError(f"backtest needs {horizon} return rows, got {returns.shape[0]}")
    n = cfg.n_assets
    if initial_allocation is None:
        initial_allocation = default_initial_allocation(n, cash_index)
    wealth = float(initial_wealth)
    alloc = np.asarray(initial_allocation, dtype=np.float64)
    holdings = alloc.copy()
    last = np.zeros(n)
    steps = []
    for t in range(horizon):
        obs = Observation(wealth, alloc, last)
        action = np.asarray(policy_fn(obs.features()[None, :]), dtype=np.float64).reshape(n)
        action = _check_actions(cfg, action[None, :], strict)[0]
        rets = np.maximum(returns[t], MIN_RETURN)
        w, holdings, reward, tc = env_step(wealth, holdings, action, rets, kappa)
        steps.append(StepRecord(obs, action, rets, float(tc), float(reward)))
        wealth, alloc, last = float(w), action, rets
    nu = float(np.sum([s.reward for s in steps]))
    return EpisodeRecord(tuple(steps), nu, wealth)


def backtest_returns(table: PriceTable, cash: bool = True) -> np.ndarray:
    r = to_returns(table)
    return with_cash(r) if cash else r
