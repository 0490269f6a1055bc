"""Autoregressive Dirichlet policy over the four sub-simplices.

An observation encoder produces a latent ``x_s``. Branch ``j`` reads
``[x_s, a_1, ..., a_{j-1}]`` (the realized earlier sub-actions, padded to
length N) and emits Dirichlet concentrations for its own index set. The joint
log-probability is the sum of the branch log-densities. Branches whose index
set has fewer than two members are deterministic and contribute nothing.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .constraints import ConstraintConfig
from .decomposition import build_decomposition, weights_batch
from .errors import InvalidInputError

ALPHA_MIN = 1e-3
ALPHA_MAX = 1e4
LOGP_CLAMP = 1e-9
CHECKPOINT_VERSION = 1
_UNIFORM_BIAS = math.log(math.e - 1.0)  # softplus(b) == 1


@dataclass(frozen=True)
class EncoderConfig:
    hidden_sizes: tuple[int, ...] = (512, 256, 128)
    embedding_size: int = 64
    use_attention: bool = False
    branch_sizes: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "branch_sizes", tuple(int(h) for h in self.branch_sizes))
        if any(h <= 0 for h in (*self.hidden_sizes, *self.branch_sizes, self.embedding_size)):
            raise InvalidInputError("layer widths must be positive")


@dataclass
class PolicyOutput:
    """Batched sample: ``surrogate`` is ``(B, 4, N)``, ``action`` is ``(B, N)``."""

    surrogate: np.ndarray
    per_branch_log_prob: np.ndarray
    action: np.ndarray
    weights: np.ndarray = field(repr=False)

    @property
    def joint_log_prob(self) -> np.ndarray:
        return self.per_branch_log_prob.sum(axis=-1)


def _mlp(sizes, final_act=None):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    if final_act is not None:
        layers.append(final_act)
    return nn.Sequential(*layers)


class _SelfAttention(nn.Module):
    """Single-head attention over the wealth / allocation / returns tokens, mean pooled."""

    def __init__(self, n_assets: int, dim: int):
        super().__init__()
        self.n_assets = n_assets
        self.tok_w = nn.Linear(1, dim)
        self.tok_a = nn.Linear(n_assets, dim)
        self.tok_r = nn.Linear(n_assets, dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)

    def forward(self, feats):
        n = self.n_assets
        tokens = torch.stack(
            [self.tok_w(feats[:, :1]), self.tok_a(feats[:, 1 : 1 + n]), self.tok_r(feats[:, 1 + n :])], dim=1
        )
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        return (att @ v).mean(dim=1)


class DecompositionPolicy(nn.Module):
    def __init__(self, cfg: ConstraintConfig, encoder: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.encoder_config = encoder
        self.decomposition = build_decomposition(cfg)
        n = cfg.n_assets
        self.n_assets = n
        self.feature_dim = 2 * n + 1
        self.supports = [list(s.index_set) for s in self.decomposition.specs]
        emb = encoder.embedding_size
        self.encoder = _mlp([self.feature_dim, *encoder.hidden_sizes, emb], nn.ReLU())
        self.attention = _SelfAttention(n, emb) if encoder.use_attention else None
        self.branches = nn.ModuleDict()
        for j, sup in enumerate(self.supports):
            if len(sup) >= 2:
                self.branches[str(j)] = _mlp([emb + j * n, *encoder.branch_sizes, len(sup)])
        self.value_head = nn.Sequential(
            nn.Linear(self.feature_dim + 1, 64), nn.Tanh(), nn.Linear(64, 64), nn.Tanh(), nn.Linear(64, 1)
        )
        self.double()
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                nn.init.uniform_(module.weight, -bound, bound, generator=gen)
                nn.init.uniform_(module.bias, -bound, bound, generator=gen)
        # start every branch near the flat Dirichlet
        for branch in self.branches.values():
            last = branch[-1]
            last.weight.mul_(0.01)
            last.bias.fill_(_UNIFORM_BIAS)
        self.value_head[-1].weight.mul_(0.01)
        self.value_head[-1].bias.zero_()

    # ------------------------------------------------------------ network parts

    def _as_tensor(self, x) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x)
        return t.to(torch.float64)

    def encode(self, features) -> torch.Tensor:
        feats = self._as_tensor(features)
        if feats.ndim == 1:
            feats = feats[None, :]
        if not torch.all(torch.isfinite(feats)):
            raise InvalidInputError("non-finite observation")
        latent = self.encoder(feats)
        if self.attention is not None:
            latent = latent + self.attention(feats)
        return latent

    def branch_alpha(self, j: int, latent: torch.Tensor, previous=None) -> torch.Tensor:
        """Concentrations ``(B, |K_j|)`` for branch ``j`` (0-based)."""
        key = str(j)
        if key not in self.branches:
            return latent.new_ones((latent.shape[0], len(self.supports[j])))
        if j > 0:
            prev = self._as_tensor(previous).reshape(latent.shape[0], j * self.n_assets)
            inp = torch.cat([latent, prev], dim=1)
        else:
            inp = latent
        alpha = F.softplus(self.branches[key](inp)) + ALPHA_MIN
        return torch.clamp(alpha, max=ALPHA_MAX)

    def value(self, features, time_fraction) -> torch.Tensor:
        feats = self._as_tensor(features)
        tf = self._as_tensor(time_fraction).reshape(-1, 1)
        return self.value_head(torch.cat([feats, tf], dim=1)).squeeze(-1)

    # ---------------------------------------------------------------- densities

    def _branch_values(self, j, surrogate):
        vals = surrogate[:, j, self.supports[j]].clamp(LOGP_CLAMP, 1.0 - LOGP_CLAMP)
        return vals / vals.sum(dim=1, keepdim=True)

    def evaluate(self, features, surrogate):
        """Teacher-forced pass: ``(joint_log_prob, per_branch (B, 4), entropy)``, differentiable."""
        surrogate = self._as_tensor(surrogate)
        latent = self.encode(features)
        per_branch, ent = [], []
        zero = latent.new_zeros(latent.shape[0])
        for j in range(4):
            if str(j) not in self.branches:
                per_branch.append(zero)
                ent.append(zero)
                continue
            alpha = self.branch_alpha(j, latent, surrogate[:, :j, :])
            dist = torch.distributions.Dirichlet(alpha)
            per_branch.append(dist.log_prob(self._branch_values(j, surrogate)))
            ent.append(dist.entropy())
        per_branch = torch.stack(per_branch, dim=1)
        return per_branch.sum(dim=1), per_branch, torch.stack(ent, dim=1).sum(dim=1)

    def log_prob(self, features, surrogate) -> torch.Tensor:
        return self.evaluate(features, surrogate)[0]

    def entropy(self, features, surrogate=None, rng=None) -> torch.Tensor:
        """Sum of branch entropies, conditioned on given (or freshly sampled) predecessors."""
        if surrogate is None:
            surrogate = self.sample_action(features, rng or np.random.default_rng(0)).surrogate
        return self.evaluate(features, surrogate)[2]

    # ------------------------------------------------------------------ actions

    @torch.no_grad()
    def _rollout(self, features, rng=None):
        latent = self.encode(features)
        b, n = latent.shape[0], self.n_assets
        subs = np.zeros((b, 4, n))
        logp = np.zeros((b, 4))
        for j, sup in enumerate(self.supports):
            if len(sup) == 1:
                subs[:, j, sup[0]] = 1.0
            if str(j) not in self.branches:
                continue
            alpha_t = self.branch_alpha(j, latent, torch.from_numpy(subs[:, :j, :]))
            alpha = alpha_t.numpy()
            if rng is None:
                vals = dirichlet_point(alpha)
            else:
                vals = sample_dirichlet(alpha, rng)
            subs[:, j, sup] = vals
            dist = torch.distributions.Dirichlet(alpha_t)
            logp[:, j] = dist.log_prob(self._branch_values(j, torch.from_numpy(subs))).numpy()
        z = weights_batch(self.decomposition, subs)
        action = np.einsum("bj,bjn->bn", z, subs)
        return PolicyOutput(subs, logp, action, z)

    def sample_action(self, features, rng: np.random.Generator) -> PolicyOutput:
        """Sample branches in order 1..4, each conditioned on the realized earlier ones."""
        return self._rollout(features, rng)

    def deterministic_action(self, features) -> np.ndarray:
        """Per-branch Dirichlet mode (mean when some concentration is <= 1), composed."""
        return self._rollout(features, None).action

    def forward(self, features, surrogate):
        return self.evaluate(features, surrogate)


def sample_dirichlet(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rows of ``Dir(alpha)`` via log-space Gamma draws, robust to tiny concentrations."""
    g = rng.gamma(alpha + 1.0)
    u = rng.random(alpha.shape)
    log_x = np.log(g) + np.log(u) / alpha
    log_x -= log_x.max(axis=-1, keepdims=True)
    x = np.exp(log_x)
    x[x < 1e-15] = 0.0
    return x / x.sum(axis=-1, keepdims=True)


def dirichlet_point(alpha: np.ndarray) -> np.ndarray:
    """Mode when every concentration exceeds 1, otherwise the mean."""
    k = alpha.shape[-1]
    total = alpha.sum(axis=-1, keepdims=True)
    mode_ok = np.all(alpha > 1.0, axis=-1, keepdims=True)
    mode = (alpha - 1.0) / np.where(mode_ok, total - k, 1.0)
    return np.where(mode_ok, mode, alpha / total)


# --------------------------------------------------------------- checkpoints


def policy_to_dict(policy: DecompositionPolicy) -> dict:
    tensors = {
        name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
        for name, t in policy.state_dict().items()
    }
    enc = asdict(policy.encoder_config)
    enc["hidden_sizes"] = list(enc["hidden_sizes"])
    enc["branch_sizes"] = list(enc["branch_sizes"])
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": policy.cfg.to_dict(),
        "encoder": enc,
        "tensors": tensors,
    }


def policy_from_dict(doc: dict) -> DecompositionPolicy:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {doc.get('format_version')}")
    cfg = ConstraintConfig.from_dict(doc["config"])
    policy = DecompositionPolicy(cfg, EncoderConfig(**doc["encoder"]))
    state = {
        name: torch.tensor(t["data"], dtype=torch.float64).reshape(t["shape"]) for name, t in doc["tensors"].items()
    }
    policy.load_state_dict(state)
    return policy


def save_policy(policy: DecompositionPolicy, path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy)) + "\n")


def load_policy(path) -> DecompositionPolicy:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    return policy_from_dict(doc)
