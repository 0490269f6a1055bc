"""Exit criteria. Each test prints one PASS/FAIL line, also repeated in the terminal summary.

Run just these with ``pytest -m acceptance -s``.
"""
import json
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from simplex_alloc.constraints import AssetUniverse, ConstraintConfig, generate_random_config, is_feasible
from simplex_alloc.decomposition import (build_decomposition, compose, compute_weights, decompose, membership,
                                          weights_batch)
from simplex_alloc.harness import POLICY, ExperimentSpec, run_experiment_matrix, summarize
from simplex_alloc.market import (MarketModel, fit_hmm, simulate_nu, synthetic_model, synthetic_prices,
                                  to_returns, write_prices)
from simplex_alloc.policy import DecompositionPolicy, EncoderConfig
from simplex_alloc.sampler import init_sampler, sample
from simplex_alloc.trainer import TrainConfig, train

from conftest import ACCEPTANCE_LINES, dirichlet_subs

pytestmark = pytest.mark.acceptance


def verdict(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------- 1


def test_worked_example_fidelity():
    start = time.perf_counter()
    cfg = ConstraintConfig.build(5, (1, 3), 0.3, (2, 4), 0.5)
    dec = build_decomposition(cfg)
    sub = np.zeros((4, 5))
    sub[1, [1, 3]] = 0.5
    w = compute_weights(cfg, sub[0], sub[1])
    elapsed = time.perf_counter() - start
    sets = [spec.index_set for spec in dec.specs]
    ok_sets = sets == [(), (1, 3), (2, 4), (0, 1, 2, 3, 4)]
    ok_z = w.as_array().tolist() == [0.0, 0.3, 0.5, 0.2]
    verdict(1, "worked example", ok_sets and ok_z and elapsed < 1e-3,
            f"K={sets} z={w.as_array().tolist()} runtime={elapsed * 1e3:.3f} ms (< 1 ms)")


# ---------------------------------------------------------------------- 2


def test_forward_property():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    n_configs, per_config = 1000, 100
    failures, worst_simplex, worst_violation = 0, 0.0, 0.0
    for i in range(n_configs):
        n = int(rng.integers(3, 14))
        cfg = generate_random_config(AssetUniverse.default(n), seed=10_000 + i)
        dec = build_decomposition(cfg)
        subs = dirichlet_subs(cfg, rng, batch=per_config, alpha=float(rng.choice([0.2, 1.0, 5.0])))
        a = compose(cfg, subs)
        z = weights_batch(dec, subs)
        failures += int(np.sum(~membership(cfg, a, tol=1e-9)))
        worst_simplex = max(worst_simplex, float(np.max(np.abs(z.sum(axis=-1) - 1.0))), float(-min(z.min(), 0.0)))
        poly_gap = np.array([np.sum(a[:, list(cfg.v1)], axis=1) - cfg.c1.threshold,
                             np.sum(a[:, list(cfg.v2)], axis=1) - cfg.c2.threshold])
        worst_violation = max(worst_violation, float(-min(poly_gap.min(), 0.0)))
    elapsed = time.perf_counter() - start
    total = n_configs * per_config
    verdict(2, "forward property", failures == 0 and worst_simplex <= 1e-12 and elapsed < 30,
            f"{total - failures}/{total} members at 1e-9, worst constraint shortfall {worst_violation:.1e}, "
            f"max |sum z - 1| {worst_simplex:.1e} (<= 1e-12), runtime {elapsed:.1f} s (< 30 s)")


# ---------------------------------------------------------------------- 3


def test_reverse_property():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    configs, seed = [], 500
    while len(configs) < 10:
        cfg = generate_random_config(AssetUniverse.default(int(rng.integers(3, 9))), seed)
        seed += 1
        # hit-and-run needs an interior; degenerate draws are resampled
        if not is_feasible(cfg).degenerate:
            configs.append(cfg)
    ok, worst, total = 0, 0.0, 0
    for k, cfg in enumerate(configs):
        for a in sample(init_sampler(cfg, k), 100):
            total += 1
            subs, _ = decompose(cfg, a)
            err = float(np.max(np.abs(compose(cfg, subs) - a)))
            worst = max(worst, err)
            ok += err <= 1e-6
    elapsed = time.perf_counter() - start
    verdict(3, "reverse property", ok == total and elapsed < 60,
            f"{ok}/{total} decomposed, worst roundtrip {worst:.1e} (<= 1e-6), runtime {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------------- 4


def test_sampler_uniformity():
    start = time.perf_counter()
    cfg = ConstraintConfig.build(3, (0,), 0.0, (1,), 0.0, cash=False)
    pts = sample(init_sampler(cfg, 11), 100_000)
    m = pts.shape[0]
    mean_z = np.abs(pts.mean(axis=0) - 1 / 3) / (pts.std(axis=0, ddof=1) / np.sqrt(m))
    sq = pts**2
    sq_z = np.abs(sq.mean(axis=0) - 1 / 6) / (sq.std(axis=0, ddof=1) / np.sqrt(m))
    seg = ConstraintConfig.build(2, (0,), 0.5, (0,), 0.0, cash=False)
    seg_mean = float(sample(init_sampler(seg, 12), 100_000)[:, 0].mean())
    elapsed = time.perf_counter() - start
    ok = np.all(mean_z < 3) and np.all(sq_z < 3) and abs(seg_mean - 0.75) <= 0.01 and elapsed < 60
    verdict(4, "sampler uniformity", bool(ok),
            f"mean z-scores {np.round(mean_z, 2).tolist()}, second-moment z-scores {np.round(sq_z, 2).tolist()} "
            f"(< 3), segment mean {seg_mean:.4f} (0.75 +- 0.01), runtime {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------------- 5


def _directional_error(pol, x, surr, rng, h=1e-6):
    params = [p for name, p in pol.named_parameters() if not name.startswith("value_head")]
    for p in params:
        p.grad = None
    pol.log_prob(x, surr).sum().backward()
    dirs = [torch.from_numpy(rng.normal(size=tuple(p.shape))) for p in params]
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(h * d)
        fp = pol.log_prob(x, surr).sum().item()
        for p, d in zip(params, dirs):
            p.sub_(2 * h * d)
        fm = pol.log_prob(x, surr).sum().item()
        for p, d in zip(params, dirs):
            p.add_(h * d)
    numeric = (fp - fm) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def test_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    errs = []
    for draw in range(100):
        n = int(rng.integers(3, 9))
        cfg = generate_random_config(AssetUniverse.default(n), 900 + draw)
        enc = EncoderConfig((int(rng.integers(4, 33)),), int(rng.integers(2, 9)), bool(draw % 2),
                            (int(rng.integers(4, 17)),))
        pol = DecompositionPolicy(cfg, enc, seed=draw)
        batch = int(rng.integers(1, 5))
        x = np.hstack([rng.uniform(0.5, 1.5, (batch, 1)), rng.dirichlet(np.ones(n), batch),
                       rng.normal(0, 0.05, (batch, n))])
        surr = pol.sample_action(x, rng).surrogate
        errs.append(_directional_error(pol, x, surr, rng))
    elapsed = time.perf_counter() - start
    worst = max(errs)
    verdict(5, "gradient correctness", worst <= 1e-4 and elapsed < 60,
            f"max relative error {worst:.1e} over 100 draws (<= 1e-4), float64, runtime {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------------- 6


def test_constrained_convergence():
    start = time.perf_counter()
    cfg = ConstraintConfig.build(3, (1,), 0.3, (1,), 0.0, cash=False)
    market = MarketModel(np.eye(1), np.array([[0.10, 0.0, 0.0]]), np.zeros((1, 3, 3)), np.ones(1),
                         cash_index=None)
    tconf = TrainConfig(total_env_steps=100_000, eval_interval=50_000, eval_episodes=20, kappa=0.0, seed=0)
    result = train(cfg, market, tconf)
    seen = []

    def act(feats):
        a = result.policy.deterministic_action(feats)
        seen.append(a)
        return a

    simulate_nu(market, cfg, act, 10, seed=1, kappa=0.0)
    actions = np.vstack(seen)
    gap = float(np.max(np.abs(actions - [0.7, 0.3, 0.0])))
    elapsed = time.perf_counter() - start
    ok = gap <= 0.05 and result.violations == 0 and elapsed < 900
    verdict(6, "constrained convergence", ok,
            f"deterministic allocation {np.round(actions.mean(axis=0), 4).tolist()}, max gap {gap:.4f} (<= 0.05), "
            f"violations {result.violations}, {tconf.total_env_steps} steps, runtime {elapsed:.0f} s (< 900 s)")


# ---------------------------------------------------------------------- 7


def test_directional_replication(tmp_path):
    start = time.perf_counter()
    truth = synthetic_model(6, seed=0)
    prices = synthetic_prices(truth, 120, seed=1)
    model = fit_hmm(to_returns(prices), 2, seed=0, labels=prices.labels)
    universe = AssetUniverse(model.labels)
    configs = [generate_random_config(universe, 100 + i) for i in range(5)]
    steps = 100_000
    tconf = TrainConfig(total_env_steps=steps, eval_interval=steps // 2, eval_episodes=100)
    specs = [ExperimentSpec(c, model, eval_episodes=500, seed=i) for i, c in enumerate(configs)]
    out = run_experiment_matrix(specs, tconf, tmp_path / "matrix")
    row = next(r for r in summarize(out) if r["approach"] == POLICY and r["env"] == "sim")
    elapsed = time.perf_counter() - start
    ok = row["n_experiments"] >= 5 and row["delta"] > 0 and row["delta_ci_lo"] > 0 and elapsed < 7200
    verdict(7, "directional replication", ok,
            f"delta {row['delta']:.4f} CI [{row['delta_ci_lo']:.4f}, {row['delta_ci_hi']:.4f}] over "
            f"{row['n_experiments']} configs, J=500, runtime {elapsed:.0f} s (< 7200 s)")


# ---------------------------------------------------------------------- 8


def test_cli_determinism(tmp_path):
    start = time.perf_counter()
    prices = synthetic_prices(synthetic_model(3, seed=0), 60, seed=1)
    write_prices(prices, tmp_path / "prices.csv")
    (tmp_path / "train.json").write_text(json.dumps(
        {"total_env_steps": 96, "rollout_length": 48, "n_envs": 4, "minibatch_size": 16, "eval_interval": 48,
         "eval_episodes": 4, "encoder": {"hidden_sizes": [16], "embedding_size": 8, "branch_sizes": [8]}}))

    def cli(run_dir, *args):
        run_dir.mkdir(parents=True, exist_ok=True)
        cmd = [sys.executable, "-m", "simplex_alloc.cli", "--seed", "3", *[str(a) for a in args]]
        proc = subprocess.run(cmd, capture_output=True, cwd=run_dir)
        assert proc.returncode == 0, proc.stderr.decode()
        return proc.stdout

    def pipeline(root):
        outs = [cli(root, "gen-config", "--n-assets", 4, "--count", 2, "--out", "configs.json"),
                cli(root, "fit-hmm", "--prices", tmp_path / "prices.csv", "--states", 2, "--restarts", 2,
                    "--out", "model.json"),
                cli(root, "sample-polytope", "--config", "configs.json", "--count", 50, "--out", "samples.csv"),
                cli(root, "decompose", "--config", "configs.json", "--point",
                    (root / "samples.csv").read_text().splitlines()[1], "--out", "dec.json"),
                cli(root, "train", "--config", "configs.json", "--model", "model.json", "--train-config",
                    tmp_path / "train.json", "--out-dir", "train"),
                cli(root, "evaluate", "--config", "configs.json", "--model", "model.json", "--checkpoint",
                    "train/checkpoint_final.json", "--episodes", 20, "--out-dir", "eval"),
                cli(root, "backtest", "--model-free-prices", tmp_path / "prices.csv", "--policy",
                    "train/checkpoint_best.json", "--config", "configs.json", "--out", "bt.json")]
        files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
        return outs, files

    out_a, files_a = pipeline(tmp_path / "a")
    out_b, files_b = pipeline(tmp_path / "b")
    differing = [k for k in files_a if files_a[k] != files_b.get(k)]
    elapsed = time.perf_counter() - start
    ok = not differing and files_a.keys() == files_b.keys() and out_a == out_b
    verdict(8, "CLI determinism", ok,
            f"{len(files_a)} output files and 7 stdout streams byte-identical across reruns, differing: "
            f"{differing or 'none'}, runtime {elapsed:.0f} s")
