"""Command line entry point: ``simplex-alloc <subcommand> ...``.

Exit codes: 0 ok, 2 invalid input, 3 infeasible config, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import constraints as C
from .decomposition import decompose, membership
from .errors import InvalidInputError, SimplexAllocError
from .harness import (POLICY, RANDOM, ExperimentSpec, evaluate_approach, experiment_metrics,
                      run_experiment_matrix, summarize, write_nu_csv)
from .market import (MarketModel, backtest_returns, fit_hmm, ingest_prices, run_backtest,
                     to_returns)
from .policy import load_policy
from .sampler import init_sampler, sample
from .sampler import UniformPolicy
from .trainer import TrainConfig, train

log = logging.getLogger("simplex_alloc")


def _out_path(args, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    base = Path(args.out_dir or ".")
    base.mkdir(parents=True, exist_ok=True)
    return base / default_name


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _load_config(path, index: int = 0) -> C.ConstraintConfig:
    cfgs = C.load_configs(path)
    if not 0 <= index < len(cfgs):
        raise InvalidInputError(f"config index {index} out of range ({len(cfgs)} configs)")
    return cfgs[index]


def _dump(obj) -> str:
    return json.dumps(obj, indent=2)


def cmd_gen_config(args) -> int:
    universe = C.AssetUniverse.default(args.n_assets, cash=not args.no_cash)
    cfgs = [C.generate_random_config(universe, _seed(args) + i, args.max_attempts) for i in range(args.count)]
    out = _out_path(args, "configs.json")
    C.save_configs(cfgs, out)
    print(f"wrote {len(cfgs)} config(s) to {out}")
    return 0


def cmd_fit_hmm(args) -> int:
    table = ingest_prices(args.prices)
    model = fit_hmm(to_returns(table), args.states, _seed(args), args.restarts, args.covariance,
                    cash=not args.no_cash, labels=table.labels)
    out = _out_path(args, "model.json")
    model.save(out)
    print(f"log-likelihood {model.log_likelihood:.6f}; wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.config_index)
    model = MarketModel.load(args.model)
    tconf = TrainConfig.load(args.train_config) if args.train_config else TrainConfig()
    if args.seed is not None:
        tconf.seed = args.seed
    out_dir = Path(args.out_dir or "train_out")
    result = train(cfg, model, tconf, out_dir=out_dir)
    print(f"violations {result.violations}; wrote {out_dir}")
    return 0


def _spec(args, cfg, model, bt=None) -> ExperimentSpec:
    return ExperimentSpec(cfg, model, (args.approach,), eval_episodes=args.episodes,
                          bt_random_episodes=args.episodes, seed=_seed(args), backtest_returns=bt,
                          kappa=args.kappa, strict=args.strict_membership)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config, args.config_index)
    model = MarketModel.load(args.model)
    bt = None
    if args.env == "bt":
        if not args.backtest_prices:
            raise InvalidInputError("--backtest-prices is required with --env bt")
        bt = backtest_returns(ingest_prices(args.backtest_prices), cash=model.cash_index is not None)
    policy = load_policy(args.checkpoint) if args.checkpoint else None
    spec = _spec(args, cfg, model, bt)
    nus = evaluate_approach(args.approach, spec, args.env, policy)
    out = _out_path(args, f"nu_{args.env}_{args.approach}.csv")
    write_nu_csv(out, nus)
    report = experiment_metrics({args.approach: nus}, args.env)[args.approach]
    print(f"{args.approach} {args.env}: mean nu {report.mean:.6f} [{report.ci_lo:.6f}, {report.ci_hi:.6f}] "
          f"over {report.n} episodes; wrote {out}")
    return 0


def cmd_backtest(args) -> int:
    cfg = _load_config(args.config, args.config_index)
    table = ingest_prices(args.model_free_prices)
    rets = backtest_returns(table, cash=not args.no_cash)
    if args.policy == "random":
        sampler = UniformPolicy(cfg, _seed(args))
        nus = [run_backtest(rets, sampler, cfg, kappa=args.kappa, strict=args.strict_membership,
                            cash_index=None if args.no_cash else 0).nu for _ in range(args.episodes)]
        doc = {"policy": "random", "nu": nus, "mean_nu": float(np.mean(nus))}
    else:
        policy = load_policy(args.policy)
        rec = run_backtest(rets, policy.deterministic_action, cfg, kappa=args.kappa,
                           strict=args.strict_membership, cash_index=None if args.no_cash else 0)
        doc = {
            "policy": str(args.policy),
            "nu": rec.nu,
            "final_wealth": rec.final_wealth,
            "allocations": [s.allocation.tolist() for s in rec.steps],
            "rewards": [s.reward for s in rec.steps],
            "transaction_costs": [s.transaction_cost for s in rec.steps],
        }
    out = _out_path(args, "backtest.json")
    out.write_text(_dump(doc) + "\n")
    print(f"nu {doc['nu'] if args.policy != 'random' else doc['mean_nu']}; wrote {out}")
    return 0


def cmd_sample_polytope(args) -> int:
    cfg = _load_config(args.config, args.config_index)
    state = init_sampler(cfg, _seed(args), args.burn_in, args.thinning)
    pts = sample(state, args.count)
    out = _out_path(args, "samples.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cfg.universe.labels)
        for p in pts:
            w.writerow([repr(float(x)) for x in p])
    print(f"wrote {len(pts)} samples to {out}")
    return 0


def cmd_decompose(args) -> int:
    cfg = _load_config(args.config, args.config_index)
    try:
        point = np.array([float(x) for x in args.point.split(",")])
    except ValueError as exc:
        raise InvalidInputError(f"bad --point: {exc}") from exc
    subs, z = decompose(cfg, point)
    from .decomposition import compose

    recon = compose(cfg, subs)
    doc = {
        "point": point.tolist(),
        "z": z.as_array().tolist(),
        "sub_actions": subs.tolist(),
        "recomposed": recon.tolist(),
        "max_abs_error": float(np.max(np.abs(recon - point))),
        "member": bool(membership(cfg, recon)),
    }
    text = _dump(doc)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_summarize(args) -> int:
    rows = summarize(args.results, ci=args.ci)
    for r in rows:
        print(f"{r['env']:>3} {r['approach']:<16} theta {r['theta']:.4f} "
              f"[{r['theta_ci_lo']:.4f}, {r['theta_ci_hi']:.4f}]  delta {r['delta']:.4f} "
              f"[{r['delta_ci_lo']:.4f}, {r['delta_ci_hi']:.4f}]")
    return 0


def cmd_run_matrix(args) -> int:
    model = MarketModel.load(args.model)
    tconf = TrainConfig.load(args.train_config) if args.train_config else TrainConfig()
    bt = None
    if args.backtest_prices:
        bt = backtest_returns(ingest_prices(args.backtest_prices), cash=model.cash_index is not None)
    seed = _seed(args)
    if args.configs:
        cfgs = C.load_configs(args.configs)
    else:
        universe = C.AssetUniverse(model.labels) if model.labels else C.AssetUniverse.default(
            model.n_assets, cash=model.cash_index is not None)
        cfgs = [C.generate_random_config(universe, seed + i) for i in range(args.n_experiments)]
    specs = [
        ExperimentSpec(cfg, model, eval_episodes=args.episodes, bt_random_episodes=args.episodes,
                       seed=seed + i, backtest_returns=bt, kappa=tconf.kappa, strict=args.strict_membership)
        for i, cfg in enumerate(cfgs)
    ]
    out = run_experiment_matrix(specs, tconf, args.out_dir or "matrix_out", ci=args.ci)
    return cmd_summarize(argparse.Namespace(results=out, ci=args.ci))


def build_parser() -> argparse.ArgumentParser:
    def global_flags(defaults: bool) -> argparse.ArgumentParser:
        # the subcommand copies use SUPPRESS so they never clobber a value given before the subcommand
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--seed", type=int, default=d(None), help="random seed")
        p.add_argument("--out-dir", default=d(None), help="directory for outputs")
        p.add_argument("--strict-membership", action="store_true", default=d(False),
                       help="fail on constraint-violating actions instead of clipping them")
        p.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return p

    common = global_flags(False)
    parser = argparse.ArgumentParser(prog="simplex-alloc", parents=[global_flags(True)],
                                     description="Constrained portfolio allocation via simplex decomposition.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-config", parents=[common], help="generate random feasible constraint configs")
    p.add_argument("--n-assets", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--max-attempts", type=int, default=1000)
    p.add_argument("--no-cash", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_config)

    p = sub.add_parser("fit-hmm", parents=[common], help="fit the Gaussian HMM market model")
    p.add_argument("--prices", required=True)
    p.add_argument("--states", type=int, default=4)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--covariance", choices=("diag", "full"), default="diag")
    p.add_argument("--no-cash", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_hmm)

    p = sub.add_parser("train", parents=[common], help="train the decomposition policy")
    p.add_argument("--config", required=True)
    p.add_argument("--config-index", type=int, default=0)
    p.add_argument("--model", required=True)
    p.add_argument("--train-config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="episode returns of one approach")
    p.add_argument("--config", required=True)
    p.add_argument("--config-index", type=int, default=0)
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--approach", default=POLICY, choices=(POLICY, RANDOM))
    p.add_argument("--env", default="sim", choices=("sim", "bt"))
    p.add_argument("--backtest-prices")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--kappa", type=float, default=1e-3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("backtest", parents=[common], help="replay held-out prices under a frozen policy")
    p.add_argument("--model-free-prices", required=True)
    p.add_argument("--policy", required=True, help="checkpoint file, or 'random'")
    p.add_argument("--config", required=True)
    p.add_argument("--config-index", type=int, default=0)
    p.add_argument("--episodes", type=int, default=1000, help="rollouts for the random policy")
    p.add_argument("--kappa", type=float, default=1e-3)
    p.add_argument("--no-cash", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("sample-polytope", parents=[common], help="uniform samples from the constrained polytope")
    p.add_argument("--config", required=True)
    p.add_argument("--config-index", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--thinning", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_polytope)

    p = sub.add_parser("decompose", parents=[common], help="print weights and a preimage for a point")
    p.add_argument("--config", required=True)
    p.add_argument("--config-index", type=int, default=0)
    p.add_argument("--point", required=True, help="comma separated allocation")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("summarize", parents=[common], help="rebuild summary tables from a results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--ci", choices=("normal", "bootstrap"), default="normal")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("run-matrix", parents=[common], help="train and evaluate over many configs")
    p.add_argument("--model", required=True)
    p.add_argument("--train-config")
    p.add_argument("--configs")
    p.add_argument("--n-experiments", type=int, default=3)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--backtest-prices")
    p.add_argument("--ci", choices=("normal", "bootstrap"), default="normal")
    p.set_defaults(func=cmd_run_matrix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SimplexAllocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
