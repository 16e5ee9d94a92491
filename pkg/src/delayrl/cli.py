"""Command-line entry point: ``delayrl <command> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 runtime or training failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from delayrl import __version__, gradcheck, harness, tabular
from delayrl.config import SEED_ENV_VAR, ExperimentConfig
from delayrl.core import ContractError, ResourceError, TrainingError, UsageError

log = logging.getLogger("delayrl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so bad flags map to exit code 1."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="delayrl", description="Reinforcement learning under constant action delay.")
    parser.add_argument("--version", action="version", version=f"delayrl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="experiment config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--out", help="output directory (overrides experiment.out)")
        return p

    with_config(sub.add_parser("train", help="train one agent per configured seed"))
    with_config(sub.add_parser("selfplay", help="round-robin self-play over [population]"))
    p = with_config(sub.add_parser("sweep", help="train over a grid of agent settings"))
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="grid axis; bare keys (d, p, f) refer to [agent]")
    p = with_config(sub.add_parser("match", help="head-to-head mini-melee match between two checkpoints"),
                    required=False)
    p.add_argument("--agent-a", required=True, help="checkpoint of agent A")
    p.add_argument("--agent-b", required=True, help="checkpoint of agent B")
    p.add_argument("--episodes", type=int, help="number of episodes (overrides match.episodes)")
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("oracle", help="tabular MBS vs augmented-state comparison")
    p.add_argument("--out", default="oracle.json", help="JSON report path")
    p.add_argument("--delays", default="1,2,3")
    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seeds", type=int, default=10)
    p = with_config(sub.add_parser("determinism", help="run training twice and compare metrics files"))
    p.add_argument("--seed", type=int)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config, args.set)
    if args.out:
        cfg = cfg.with_overrides([f"experiment.out={args.out}"])
    return cfg


def cmd_train(args) -> int:
    cfg = load_config(args)
    for seed in cfg.seeds:
        res = harness.train(cfg, seed)
        print(f"seed {seed}: {res.steps} steps, final mean return {res.final_mean_return:.4f} -> {res.run_dir}")
    return EXIT_OK


def cmd_selfplay(args) -> int:
    cfg = load_config(args)
    for seed in cfg.seeds:
        for label, path in harness.selfplay_train(cfg, seed).items():
            print(f"seed {seed}: {label} -> {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    for res in harness.sweep(cfg, harness.parse_grid(args.grid)):
        print(f"{res.run_dir}: final mean return {res.final_mean_return:.4f}")
    return EXIT_OK


def cmd_match(args) -> int:
    if args.config:
        cfg = load_config(args)
        env_params, match = cfg.env_params, cfg["match"]
    else:
        env_params, match = None, ExperimentConfig()["match"]
    for path in (args.agent_a, args.agent_b):
        if not Path(path).is_file():
            raise UsageError(f"checkpoint file not found: {path}")
    episodes = args.episodes if args.episodes is not None else match["episodes"]
    result = harness.head_to_head(args.agent_a, args.agent_b, episodes, args.seed, env_params,
                                  match["n_envs"], match["greedy"])
    text = result.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    try:
        delays = [int(x) for x in args.delays.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--delays must be a comma-separated list of integers, got {args.delays!r}") from None
    mdps = {f"chain{n}": tabular.chain_mdp(n) for n in (3, 5, 8)}
    mdps["grid5x5"] = tabular.gridworld_mdp(5, 5, 0.0)
    mdps["grid5x5_slip0.3"] = tabular.gridworld_mdp(5, 5, 0.3)
    report = tabular.oracle_report(mdps, delays)
    tabular.write_report(args.out, report)
    for key, r in report.items():
        print(f"{key:24s} states={r['augmented_states']:6d} mismatches={r['policy_mismatches']:4d} "
              f"max_value_gap={r['max_value_gap']:.3e}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(range(args.seeds))
    failed = False
    for name, r in results.items():
        ok = r["max_rel_error"] < gradcheck.THRESHOLD
        failed |= not ok
        print(f"{name:14s} max relative error {r['max_rel_error']:.3e}  {'ok' if ok else 'FAIL'}  ({r['seconds']:.1f}s)")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_determinism(args) -> int:
    cfg = load_config(args)
    workdir = Path(cfg["experiment"]["out"]) / cfg["experiment"]["name"] / "determinism"
    res = harness.determinism_check(cfg, workdir, args.seed)
    print(f"determinism: {res.status} ({res.detail})")
    return EXIT_RUNTIME if res.status == "fail" else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "selfplay": cmd_selfplay,
    "sweep": cmd_sweep,
    "match": cmd_match,
    "oracle": cmd_oracle,
    "gradcheck": cmd_gradcheck,
    "determinism": cmd_determinism,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "config", None) and os.environ.get(SEED_ENV_VAR):
            log.info("seed overridden by %s=%s", SEED_ENV_VAR, os.environ[SEED_ENV_VAR])
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ResourceError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
