"""Hot inner loops, each in a numba flavour (``*_nb``) and a numpy flavour (``*_np``).

The public names (``hit_and_run``, ``forward_backward``, ``gae``) dispatch on
``_accel.USE_NUMBA``. Both flavours consume the same pre-drawn random numbers,
so they produce the same stream up to floating point reassociation.
"""
import numpy as np

from . import _accel
from ._accel import njit

_DIR_EPS = 1e-14


# ---------------------------------------------------------------- hit-and-run


@njit
def hit_and_run_nb(a_mat, b_vec, x0, normals, uniforms, burn_in, thinning, count):
    m, n = a_mat.shape
    x = x0.copy()
    out = np.empty((count, n))
    d = np.empty(n)
    emitted = 0
    step = 0
    total = burn_in + thinning * count
    while step < total:
        g = normals[step]
        mean = 0.0
        for i in range(n):
            mean += g[i]
        mean /= n
        norm = 0.0
        for i in range(n):
            d[i] = g[i] - mean
            norm += d[i] * d[i]
        norm = np.sqrt(norm)
        if norm > 0.0:
            for i in range(n):
                d[i] /= norm
            t_lo = -np.inf
            t_hi = np.inf
            for r in range(m):
                ad = 0.0
                ax = 0.0
                for i in range(n):
                    ad += a_mat[r, i] * d[i]
                    ax += a_mat[r, i] * x[i]
                slack = ax - b_vec[r]
                if slack < 0.0:
                    slack = 0.0
                if ad > _DIR_EPS:
                    t = -slack / ad
                    if t > t_lo:
                        t_lo = t
                elif ad < -_DIR_EPS:
                    t = slack / -ad
                    if t < t_hi:
                        t_hi = t
            if t_hi > t_lo and np.isfinite(t_lo) and np.isfinite(t_hi):
                t = t_lo + uniforms[step] * (t_hi - t_lo)
                for i in range(n):
                    x[i] += t * d[i]
        step += 1
        if step > burn_in and (step - burn_in) % thinning == 0:
            out[emitted] = x
            emitted += 1
    return out, x


def hit_and_run_np(a_mat, b_vec, x0, normals, uniforms, burn_in, thinning, count):
    x = x0.copy()
    out = np.empty((count, x.size))
    emitted = 0
    total = burn_in + thinning * count
    for step in range(total):
        d = normals[step] - normals[step].mean()
        norm = np.sqrt(d @ d)
        if norm > 0.0:
            d /= norm
            ad = a_mat @ d
            slack = np.maximum(a_mat @ x - b_vec, 0.0)
            pos = ad > _DIR_EPS
            neg = ad < -_DIR_EPS
            t_lo = np.max(-slack[pos] / ad[pos]) if pos.any() else -np.inf
            t_hi = np.min(slack[neg] / -ad[neg]) if neg.any() else np.inf
            if t_hi > t_lo and np.isfinite(t_lo) and np.isfinite(t_hi):
                x += (t_lo + uniforms[step] * (t_hi - t_lo)) * d
        done = step + 1
        if done > burn_in and (done - burn_in) % thinning == 0:
            out[emitted] = x
            emitted += 1
    return out, x


# ------------------------------------------------------------ forward-backward


@njit
def forward_backward_nb(log_emission, transition, initial):
    n_t, h = log_emission.shape
    b = np.empty((n_t, h))
    shift = np.empty(n_t)
    for t in range(n_t):
        mx = log_emission[t, 0]
        for k in range(1, h):
            if log_emission[t, k] > mx:
                mx = log_emission[t, k]
        shift[t] = mx
        for k in range(h):
            b[t, k] = np.exp(log_emission[t, k] - mx)

    alpha = np.empty((n_t, h))
    scale = np.empty(n_t)
    s = 0.0
    for k in range(h):
        alpha[0, k] = initial[k] * b[0, k]
        s += alpha[0, k]
    scale[0] = s
    for k in range(h):
        alpha[0, k] /= s
    for t in range(1, n_t):
        s = 0.0
        for j in range(h):
            acc = 0.0
            for i in range(h):
                acc += alpha[t - 1, i] * transition[i, j]
            alpha[t, j] = acc * b[t, j]
            s += alpha[t, j]
        scale[t] = s
        for j in range(h):
            alpha[t, j] /= s

    beta = np.empty((n_t, h))
    for k in range(h):
        beta[n_t - 1, k] = 1.0
    for t in range(n_t - 2, -1, -1):
        for i in range(h):
            acc = 0.0
            for j in range(h):
                acc += transition[i, j] * b[t + 1, j] * beta[t + 1, j]
            beta[t, i] = acc / scale[t + 1]

    gamma = np.empty((n_t, h))
    for t in range(n_t):
        s = 0.0
        for k in range(h):
            gamma[t, k] = alpha[t, k] * beta[t, k]
            s += gamma[t, k]
        for k in range(h):
            gamma[t, k] /= s

    xi_sum = np.zeros((h, h))
    for t in range(n_t - 1):
        for i in range(h):
            for j in range(h):
                xi_sum[i, j] += (
                    alpha[t, i] * transition[i, j] * b[t + 1, j] * beta[t + 1, j] / scale[t + 1]
                )

    loglik = 0.0
    for t in range(n_t):
        loglik += np.log(scale[t]) + shift[t]
    return gamma, xi_sum, loglik


def forward_backward_np(log_emission, transition, initial):
    n_t, h = log_emission.shape
    shift = log_emission.max(axis=1)
    b = np.exp(log_emission - shift[:, None])
    alpha = np.empty((n_t, h))
    scale = np.empty(n_t)
    a0 = initial * b[0]
    scale[0] = a0.sum()
    alpha[0] = a0 / scale[0]
    for t in range(1, n_t):
        at = (alpha[t - 1] @ transition) * b[t]
        scale[t] = at.sum()
        alpha[t] = at / scale[t]
    beta = np.ones((n_t, h))
    for t in range(n_t - 2, -1, -1):
        beta[t] = transition @ (b[t + 1] * beta[t + 1]) / scale[t + 1]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    w = b[1:] * beta[1:] / scale[1:, None]
    xi_sum = transition * (alpha[:-1].T @ w)
    loglik = float(np.log(scale).sum() + shift.sum())
    return gamma, xi_sum, loglik


# ------------------------------------------------------------------------ GAE


@njit
def gae_nb(rewards, values, dones, last_values, gamma, lam):
    n_steps, n_envs = rewards.shape
    adv = np.empty((n_steps, n_envs))
    for e in range(n_envs):
        next_value = last_values[e]
        next_adv = 0.0
        for t in range(n_steps - 1, -1, -1):
            nonterminal = 1.0 - dones[t, e]
            delta = rewards[t, e] + gamma * next_value * nonterminal - values[t, e]
            next_adv = delta + gamma * lam * nonterminal * next_adv
            adv[t, e] = next_adv
            next_value = values[t, e]
    return adv, adv + values


def gae_np(rewards, values, dones, last_values, gamma, lam):
    n_steps = rewards.shape[0]
    adv = np.empty_like(rewards)
    next_value = last_values.astype(np.float64).copy()
    next_adv = np.zeros_like(next_value)
    for t in range(n_steps - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


if _accel.USE_NUMBA:
    hit_and_run = hit_and_run_nb
    forward_backward = forward_backward_nb
    gae = gae_nb
else:
    hit_and_run = hit_and_run_np
    forward_backward = forward_backward_np
    gae = gae_np
