"""Command-line entry point.

    metagent run --query "..." --set budgets.target_metric=2e-3 --answer target_spectrum_path=t.txt
    metagent experiment target-mse --out-dir out/
    metagent experiment fixed-dataset --pool-size 2000
    metagent forward-train --out-dir out/
    metagent inverse --bundle out/forward_model --target t.txt
    metagent check --target t.txt --dataset d.csv --bundle out/forward_model
    metagent pool 5000 pool.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agents.planner import InputVerificationError, MissingInputError, TaskSpec, read_target_spectrum, verify_inputs
from .domain import atomic_write_text
from .neural_adjoint import design_report, inverse_design, write_designs_csv
from .oracle import write_pool
from .pipeline import EngineConfig, run_experiment, run_pipeline
from .surrogate import load_bundle

log = logging.getLogger("metagent")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, pairs: list[str]) -> dict:
    """Apply dotted ``key=value`` pairs to a nested dict; values are parsed as JSON when possible."""
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"cannot descend into {p!r} in {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return d


def load_config(args) -> EngineConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    base = apply_overrides(base, args.set or [])
    if getattr(args, "out_dir", None):
        base["out_dir"] = args.out_dir
    return EngineConfig.from_dict(base)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON engine config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. na.n_steps=100")
    p.add_argument("--out-dir", help="artifact directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metagent", description="Agentic forward-model training and neural-adjoint inverse design.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="plan, train and design from a natural-language request")
    _common(p)
    p.add_argument("--query", required=True)
    p.add_argument("--answer", action="append", metavar="KEY=VALUE", default=[], help="pre-supplied planner answer")

    p = sub.add_parser("experiment", help="target-mse or fixed-dataset experiment harness")
    _common(p)
    p.add_argument("which", choices=["target-mse", "fixed-dataset"])
    p.add_argument("--dataset", help="pool CSV for fixed-dataset")
    p.add_argument("--pool-size", type=int, help="simulate a pool of this size for fixed-dataset")

    p = sub.add_parser("forward-train", help="run the agentic forward-training loop only")
    _common(p)

    p = sub.add_parser("inverse", help="neural-adjoint design against a target spectrum")
    _common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--target", required=True)

    p = sub.add_parser("check", help="verify input files without running anything")
    _common(p)
    p.add_argument("--target")
    p.add_argument("--dataset")
    p.add_argument("--bundle")

    p = sub.add_parser("pool", help="write a simulated dataset CSV")
    _common(p)
    p.add_argument("n", type=int)
    p.add_argument("path")
    return ap


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def cmd_run(args, cfg: EngineConfig) -> int:
    answers = {}
    for pair in args.answer:
        k, _, v = pair.partition("=")
        answers[k] = _parse_value(v)
    outcome = run_pipeline(cfg, args.query, answers)
    print(json.dumps(outcome.metrics, indent=2, default=str))
    return outcome.status


def cmd_experiment(args, cfg: EngineConfig) -> int:
    outcome = run_experiment(cfg, args.which, dataset_path=args.dataset, pool_size=args.pool_size)
    print(json.dumps(outcome.metrics, indent=2, default=str))
    return outcome.status


def cmd_forward_train(args, cfg: EngineConfig) -> int:
    cfg.n_test_targets = 0
    return cmd_experiment(argparse.Namespace(which="target-mse", dataset=None, pool_size=None), cfg)


def cmd_inverse(args, cfg: EngineConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_bundle(args.bundle)
    target = np.array(read_target_spectrum(args.target))
    results = inverse_design(target, bundle, cfg.oracle.bounds, cfg.na)
    rep = design_report(results, target, cfg.oracle if cfg.oracle.kind == "synthetic" else None, top_m=cfg.top_m)
    write_designs_csv(results, out / "designs.csv")
    summary = rep.summary() | {"best_geometry": results[0].geometry.tolist()}
    atomic_write_text(out / "metrics.json", json.dumps({"inverse": summary}, indent=2))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_check(args, cfg: EngineConfig) -> int:
    # verify_inputs checks every path that is set; the plan only decides which are required
    plan = "inverse-only" if args.bundle and args.target else "forward-only"
    spec = TaskSpec(
        input_dim=cfg.oracle.dim,
        output_dim=cfg.oracle.length,
        target_spectrum_path=args.target,
        dataset_path=args.dataset,
        bundle_path=args.bundle,
        plan=plan,
    )
    verify_inputs(spec)
    print("inputs ok")
    return EXIT_OK


def cmd_pool(args, cfg: EngineConfig) -> int:
    print(write_pool(args.n, cfg.oracle, args.path))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "experiment": cmd_experiment,
    "forward-train": cmd_forward_train,
    "inverse": cmd_inverse,
    "check": cmd_check,
    "pool": cmd_pool,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (MissingInputError, InputVerificationError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:
        log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
