"""Command-line harness: dataset generation, training, evaluation, suites.

Subcommands: ``gen-data``, ``train``, ``eval``, ``suite``, ``race``,
``verify-theorems``, and ``write-config``.  All outputs are reproducible:
rerunning a command with the same config and seed produces byte-identical
CSV/JSON files (timings go to stderr only).  The default output directory
comes from the BAYESLORA_OUT_DIR environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

from .configio import SuiteConfig, load_config, write_example_config
from .metrics import ece, report_to_json, write_bins_csv, write_reliability_csv
from .network import load_net, save_net
from .parammaps import ParamMap, race_curve
from .suite import (
    predict_method,
    run_suite,
    train_method,
    verify_theorems,
    write_results_csv,
    write_results_json,
    write_summary_csv,
)
from .suite import TrainedMethod
from .baselines import BaselineModel, BaselineSpec
from .tasks import generate_task, write_dataset_csv
from .training import write_trajectory_csv

ENV_OUT_DIR = "BAYESLORA_OUT_DIR"


def _out_dir(args) -> str:
    out = args.out_dir or os.environ.get(ENV_OUT_DIR) or "bayeslora-out"
    os.makedirs(out, exist_ok=True)
    return out


def _load_suite_config(args) -> SuiteConfig:
    cfg = load_config(args.config) if args.config else SuiteConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed), seeds=(args.seed,))
    if getattr(args, "shift", None) is not None:
        cfg = replace(cfg, task=replace(cfg.task, shift=args.shift))
    if getattr(args, "n_samples", None) is not None:
        cfg = replace(cfg, n_samples_list=(args.n_samples,))
    return cfg


def _cmd_write_config(args) -> int:
    out = _out_dir(args)
    path = os.path.join(out, "config.ini")
    write_example_config(path)
    print(path)
    return 0


def _cmd_gen_data(args) -> int:
    cfg = _load_suite_config(args)
    out = _out_dir(args)
    seed = cfg.data_seed_offset + cfg.train.seed
    train_ds, test_ds = generate_task(cfg.task, seed=seed)
    write_dataset_csv(train_ds, os.path.join(out, "train.csv"))
    write_dataset_csv(test_ds, os.path.join(out, "test.csv"))
    print(os.path.join(out, "train.csv"))
    print(os.path.join(out, "test.csv"))
    return 0


def _cmd_train(args) -> int:
    cfg = _load_suite_config(args)
    out = _out_dir(args)
    method = args.method
    seed = cfg.train.seed
    t0 = time.perf_counter()
    train_ds, _ = generate_task(cfg.task, seed=cfg.data_seed_offset + seed)
    trained = train_method(method, cfg, (train_ds.x, train_ds.y), seed)
    print(f"trained {method} (seed {seed}) in {time.perf_counter() - t0:.2f}s", file=sys.stderr)

    manifest = {
        "method": method,
        "seed": seed,
        "n_members": len(trained.models),
        "model_files": [f"model-{k}.txt" for k in range(len(trained.models))],
        "baseline": {
            "weight_decay": cfg.baseline.weight_decay,
            "dropout_p": cfg.baseline.dropout_p,
            "n_members": cfg.baseline.n_members,
            "n_eval_samples": cfg.baseline.n_eval_samples,
        },
    }
    for k, net in enumerate(trained.models):
        save_net(net, os.path.join(out, f"model-{k}.txt"))
        write_trajectory_csv(trained.logs[k], os.path.join(out, f"trajectory-{k}.csv"))
    with open(os.path.join(out, "model.json"), "w", encoding="ascii") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(os.path.join(out, "model.json"))
    return 0


def _load_trained(model_dir: str) -> TrainedMethod:
    with open(os.path.join(model_dir, "model.json"), "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    models = [load_net(os.path.join(model_dir, name)) for name in manifest["model_files"]]
    method = manifest["method"]
    baseline = None
    if method != "blob":
        kind = {"mle": "mle", "map": "map", "mcd": "mc_dropout", "ens": "ensemble", "bbb": "bbb"}[method]
        spec = BaselineSpec(kind=kind, **manifest["baseline"])
        baseline = BaselineModel(spec=spec, models=models, logs=[[] for _ in models])
    return TrainedMethod(method=method, models=models, logs=[[] for _ in models], baseline=baseline)


def _cmd_eval(args) -> int:
    cfg = _load_suite_config(args)
    out = _out_dir(args)
    trained = _load_trained(args.model_dir)
    seed = cfg.train.seed
    _, test_ds = generate_task(cfg.task, seed=cfg.data_seed_offset + seed)
    n_samples = args.n_samples if args.n_samples is not None else 0
    probs = predict_method(trained, test_ds.x, n_samples, seed)
    report = ece(probs, test_ds.y)
    with open(os.path.join(out, "report.json"), "w", encoding="ascii") as fh:
        fh.write(report_to_json(report) + "\n")
    write_bins_csv(report, os.path.join(out, "bins.csv"))
    write_reliability_csv(report, os.path.join(out, "reliability.csv"))
    print(os.path.join(out, "report.json"))
    return 0


def _cmd_suite(args) -> int:
    cfg = _load_suite_config(args)
    if getattr(args, "method", None):
        cfg = replace(cfg, methods=(args.method,))
    out = _out_dir(args)
    t0 = time.perf_counter()
    results, any_failed = run_suite(cfg)
    print(f"suite: {len(results)} cells in {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    write_results_csv(results, os.path.join(out, "results.csv"))
    write_results_json(results, os.path.join(out, "results.json"))
    write_summary_csv(results, os.path.join(out, "summary.csv"))
    print(os.path.join(out, "results.csv"))
    return 1 if any_failed else 0


def _cmd_race(args) -> int:
    out = _out_dir(args)
    for pmap, steps, name in (
        (ParamMap.SQUARE, args.square_steps, "race_square.csv"),
        (ParamMap.SOFTPLUS, args.softplus_steps, "race_softplus.csv"),
    ):
        curve = race_curve(pmap, args.sigma_p, args.sigma_q0, args.lr, steps, record_every=args.record_every)
        path = os.path.join(out, name)
        with open(path, "w", encoding="ascii") as fh:
            fh.write("step,sigma_q\n")
            for step, sigma in curve:
                fh.write(f"{step},{sigma!r}\n")
        print(path)
    return 0


def _cmd_verify_theorems(args) -> int:
    report = verify_theorems(
        m=args.m, n=args.n, r=args.r, sigma_p=args.sigma_p,
        n_draws=args.draws, flipout_draws=args.flipout_draws,
        seed=args.seed if args.seed is not None else 0,
        degenerate_b=args.degenerate_b,
    )
    for line in report.lines():
        print(line)
    if args.out_dir or os.environ.get(ENV_OUT_DIR):
        out = _out_dir(args)
        payload = [
            {"name": c.name, "status": c.status, "margin": c.margin} for c in report.checks
        ]
        with open(os.path.join(out, "theorems.json"), "w", encoding="ascii") as fh:
            fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 1 if report.any_failed() else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bayeslora",
        description="Bayesian low-rank adapter benchmark harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, shift=True, n_samples=False, method=False):
        p.add_argument("--config", type=str, default=None, help="INI config file")
        p.add_argument("--out-dir", type=str, default=None,
                       help=f"output directory (default ${ENV_OUT_DIR} or ./bayeslora-out)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the run seed")
        if shift:
            p.add_argument("--shift", choices=("none", "small", "large"), default=None,
                           help="override the test-set shift")
        if n_samples:
            p.add_argument("--n-samples", type=int, default=None, help="inference sample count")
        if method:
            p.add_argument("--method", choices=("mle", "map", "mcd", "ens", "bbb", "blob"),
                           default=None, help="method to run")

    p = sub.add_parser("write-config", help="write the example config with every default")
    common(p, seed=False, shift=False)
    p.set_defaults(func=_cmd_write_config)

    p = sub.add_parser("gen-data", help="generate the task datasets as CSV")
    common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one method and save the model")
    common(p, n_samples=False, method=True)
    p.set_defaults(func=_cmd_train, method_required=True)

    p = sub.add_parser("eval", help="evaluate a saved model on the task test set")
    common(p, n_samples=True)
    p.add_argument("--model-dir", type=str, required=True, help="directory written by `train`")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("suite", help="run the full method x seed x N grid")
    common(p, n_samples=True, method=True)
    p.set_defaults(func=_cmd_suite)

    p = sub.add_parser("race", help="export the std-parameterization convergence race")
    common(p, seed=False, shift=False)
    p.add_argument("--sigma-p", type=float, default=1.0)
    p.add_argument("--sigma-q0", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--square-steps", type=int, default=10_000)
    p.add_argument("--softplus-steps", type=int, default=50_000)
    p.add_argument("--record-every", type=int, default=50)
    p.set_defaults(func=_cmd_race)

    p = sub.add_parser("verify-theorems", help="run the numeric oracle battery")
    common(p, shift=False)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--sigma-p", type=float, default=0.2)
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--flipout-draws", type=int, default=10_000)
    p.add_argument("--degenerate-b", action="store_true",
                   help="zero out b to exercise the rank-precondition guard")
    p.set_defaults(func=_cmd_verify_theorems)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "method_required", False) and not args.method:
        parser.error("train requires --method")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
