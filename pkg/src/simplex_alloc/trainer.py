"""Clipped-surrogate policy gradient (PPO style) with GAE for the decomposition policy."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .constraints import ConstraintConfig
from .errors import InvalidInputError, NumericalError
from .market import DEFAULT_KAPPA, HORIZON, MarketModel, SimulationEnv, simulate_nu
from .policy import DecompositionPolicy, EncoderConfig, save_policy

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


@dataclass
class TrainConfig:
    total_env_steps: int = 100_000
    rollout_length: int = 2048
    n_envs: int = 16
    minibatch_size: int = 256
    epochs_per_batch: int = 4
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    target_kl: float = 0.05
    eval_interval: int = 5000
    eval_episodes: int = 200
    horizon: int = HORIZON
    kappa: float = DEFAULT_KAPPA
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if not 0.0 < self.clip_epsilon < 1.0:
            raise InvalidInputError("clip_epsilon must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise InvalidInputError("gamma and gae_lambda must lie in (0, 1]")
        if self.rollout_length % self.n_envs:
            raise InvalidInputError("rollout_length must be a multiple of n_envs")
        if self.eval_interval <= 0 or self.minibatch_size <= 0:
            raise InvalidInputError("eval_interval and minibatch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["encoder"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown train-config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read train config {path}: {exc}") from exc


@dataclass
class RolloutBatch:
    """Arrays are time-major ``(steps, n_envs, ...)``."""

    features: np.ndarray
    time_fraction: np.ndarray
    surrogate: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    last_values: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    completed_nu: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.rewards.size


def collect_rollouts(env: SimulationEnv, policy: DecompositionPolicy, tconf: TrainConfig,
                     rng: np.random.Generator, features: np.ndarray | None = None):
    """Run ``rollout_length`` transitions (spread over ``env.n_envs``) with the current policy.

    Returns the batch and the observation to resume from.
    """
    steps = tconf.rollout_length // env.n_envs
    b, n = env.n_envs, env.cfg.n_assets
    feats = env.features() if features is None else features
    out = {
        "features": np.empty((steps, b, feats.shape[1])),
        "time_fraction": np.empty((steps, b)),
        "surrogate": np.empty((steps, b, 4, n)),
        "actions": np.empty((steps, b, n)),
        "log_probs": np.empty((steps, b)),
        "rewards": np.empty((steps, b)),
        "dones": np.empty((steps, b)),
        "values": np.empty((steps, b)),
    }
    completed = []
    for t in range(steps):
        tf = env.time_fraction()
        sample = policy.sample_action(feats, rng)
        with torch.no_grad():
            value = policy.value(feats, tf).numpy()
        out["features"][t] = feats
        out["time_fraction"][t] = tf
        out["surrogate"][t] = sample.surrogate
        out["actions"][t] = sample.action
        out["log_probs"][t] = sample.joint_log_prob
        out["values"][t] = value
        feats, reward, done, info = env.step(sample.action)
        out["rewards"][t] = reward
        out["dones"][t] = done
        if "episode_nu" in info:
            completed.extend(info["episode_nu"].tolist())
    with torch.no_grad():
        last_values = policy.value(feats, env.time_fraction()).numpy()
    return RolloutBatch(**out, last_values=last_values, completed_nu=completed), feats


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates and returns-to-go; recursion resets where ``dones`` is set."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.ndim == 1:
        adv, ret = compute_gae(rewards[:, None], values[:, None], np.asarray(dones)[:, None],
                               np.atleast_1d(last_values), gamma, lam)
        return adv[:, 0], ret[:, 0]
    return kernels.gae(rewards, values, np.asarray(dones, dtype=np.float64),
                       np.asarray(last_values, dtype=np.float64), float(gamma), float(lam))


def ppo_update(policy: DecompositionPolicy, optimizer: torch.optim.Optimizer, batch: RolloutBatch,
               tconf: TrainConfig, rng: np.random.Generator) -> dict:
    if batch.advantages is None:
        batch.advantages, batch.returns = compute_gae(
            batch.rewards, batch.values, batch.dones, batch.last_values, tconf.gamma, tconf.gae_lambda
        )
    total = batch.size
    feats = torch.from_numpy(batch.features.reshape(total, -1))
    tfrac = torch.from_numpy(batch.time_fraction.reshape(total))
    surr = torch.from_numpy(batch.surrogate.reshape(total, *batch.surrogate.shape[2:]))
    old_logp = torch.from_numpy(batch.log_probs.reshape(total))
    old_v = torch.from_numpy(batch.values.reshape(total))
    ret = torch.from_numpy(batch.returns.reshape(total))
    adv = batch.advantages.reshape(total)
    adv = torch.from_numpy((adv - adv.mean()) / max(adv.std(), 1e-8))
    eps = tconf.clip_epsilon
    snapshot = copy.deepcopy(policy.state_dict())
    opt_snapshot = copy.deepcopy(optimizer.state_dict())
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": [], "clip_frac": []}
    first_ratio = None
    epochs_run = 0
    for _epoch in range(tconf.epochs_per_batch):
        perm = rng.permutation(total)
        kls = []
        for start in range(0, total, tconf.minibatch_size):
            mb = torch.from_numpy(perm[start : start + tconf.minibatch_size])
            logp, _, ent = policy.evaluate(feats[mb], surr[mb])
            log_ratio = logp - old_logp[mb]
            ratio = torch.exp(log_ratio)
            if first_ratio is None:
                first_ratio = ratio.detach().numpy().copy()
            a = adv[mb]
            pg_loss = -torch.min(ratio * a, torch.clamp(ratio, 1 - eps, 1 + eps) * a).mean()
            v = policy.value(feats[mb], tfrac[mb])
            v_clip = old_v[mb] + torch.clamp(v - old_v[mb], -eps, eps)
            v_loss = 0.5 * torch.max((v - ret[mb]) ** 2, (v_clip - ret[mb]) ** 2).mean()
            ent_mean = ent.mean()
            loss = pg_loss + tconf.value_coef * v_loss - tconf.entropy_coef * ent_mean
            if not torch.isfinite(loss):
                policy.load_state_dict(snapshot)
                optimizer.load_state_dict(opt_snapshot)
                raise NumericalError(
                    f"non-finite PPO loss (policy={pg_loss.item()}, value={v_loss.item()}, "
                    f"entropy={ent_mean.item()}, max|log_ratio|={log_ratio.abs().max().item()})"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(policy.parameters(), tconf.max_grad_norm)
            optimizer.step()
            with torch.no_grad():
                kl = ((ratio - 1) - log_ratio).mean().item()
            kls.append(kl)
            stats["policy_loss"].append(pg_loss.item())
            stats["value_loss"].append(v_loss.item())
            stats["entropy"].append(ent_mean.item())
            stats["approx_kl"].append(kl)
            stats["clip_frac"].append(((ratio - 1).abs() > eps).double().mean().item())
        epochs_run += 1
        if np.mean(kls) > tconf.target_kl:
            break
    summary = {k: float(np.mean(v)) for k, v in stats.items()}
    summary["epochs"] = epochs_run
    summary["first_ratio"] = first_ratio
    return summary


def mean_ci(values, z: float = Z95):
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    half = z * float(values.std(ddof=1)) / float(np.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, mean - half, mean + half


@dataclass
class TrainResult:
    policy: DecompositionPolicy
    curve: list[tuple[int, float, float, float]]
    best_state: dict
    violations: int
    update_stats: list[dict] = field(default_factory=list)


def evaluate_policy(policy: DecompositionPolicy, model: MarketModel, cfg: ConstraintConfig,
                    n_episodes: int, seed: int, horizon: int = HORIZON, kappa: float = DEFAULT_KAPPA):
    """Episode returns of the deterministic policy in simulation."""
    return simulate_nu(model, cfg, policy.deterministic_action, n_episodes, seed, horizon, kappa)


def train(cfg: ConstraintConfig, model: MarketModel, tconf: TrainConfig, out_dir=None,
          policy: DecompositionPolicy | None = None) -> TrainResult:
    """Train from scratch (or from ``policy``), evaluating every ``eval_interval`` env steps.

    When ``out_dir`` is given, writes ``curve.csv``, ``checkpoint_final.json``
    and ``checkpoint_best.json`` there.
    """
    torch.set_num_threads(1)
    if policy is None:
        policy = DecompositionPolicy(cfg, tconf.encoder, seed=tconf.seed)
    rng = np.random.default_rng(tconf.seed)
    env = SimulationEnv(model, cfg, n_envs=tconf.n_envs, horizon=tconf.horizon, kappa=tconf.kappa,
                        seed=tconf.seed + 1)
    optimizer = torch.optim.Adam(policy.parameters(), lr=tconf.learning_rate)
    curve = []
    best_mean, best_state = -np.inf, copy.deepcopy(policy.state_dict())
    steps_done, next_eval = 0, tconf.eval_interval
    feats = env.reset()
    all_stats = []
    while steps_done < tconf.total_env_steps:
        batch, feats = collect_rollouts(env, policy, tconf, rng, feats)
        steps_done += batch.size
        all_stats.append(ppo_update(policy, optimizer, batch, tconf, rng))
        while next_eval <= min(steps_done, tconf.total_env_steps):
            nus = evaluate_policy(policy, model, cfg, tconf.eval_episodes, tconf.seed + 7919,
                                  tconf.horizon, tconf.kappa)
            mean, lo, hi = mean_ci(nus)
            curve.append((next_eval, mean, lo, hi))
            log.info("step %d mean_nu %.4f [%.4f, %.4f]", next_eval, mean, lo, hi)
            if mean > best_mean:
                best_mean, best_state = mean, copy.deepcopy(policy.state_dict())
            next_eval += tconf.eval_interval
    result = TrainResult(policy, curve, best_state, env.violations, all_stats)
    if out_dir is not None:
        write_training_outputs(result, out_dir)
    return result


def write_training_outputs(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean_nu", "ci_lo", "ci_hi"])
        for step, mean, lo, hi in result.curve:
            w.writerow([step, repr(float(mean)), repr(float(lo)), repr(float(hi))])
    save_policy(result.policy, out / "checkpoint_final.json")
    best = copy.deepcopy(result.policy)
    best.load_state_dict(result.best_state)
    save_policy(best, out / "checkpoint_best.json")
