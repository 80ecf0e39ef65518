"""Command-line entry point.

Subcommands: gen (synthesize a dataset), train (fit a policy), eval
(score one strategy), compare (table over several strategies). Exit
codes: 0 success, 1 usage error, 2 data error, 3 oracle error, 4 numeric
abort.

Config files are flat JSON objects whose keys mirror the generator,
policy, and trainer config field names; explicit flags win over config
file values. Passing --oracle-cmd switches every instance's reward to
the external oracle (a shell command speaking the line protocol, or an
http(s):// endpoint).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path
from typing import List, Optional, Sequence

from . import environ, harness, oracle, strategies, trainer
from .errors import (DataError, NumericError, OracleError, UsageError)
from .policy import PolicyConfig
from .trainer import TrainerConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(f"{message}\n{self.format_usage()}")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None,
                   help="flat JSON config file")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--oracle-cmd", default=None,
                   help="external oracle: shell command or http(s) URL")
    p.add_argument("--oracle-timeout", type=float, default=oracle.DEFAULT_TIMEOUT)
    p.add_argument("--quiet", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="ldar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    g = sub.add_parser("gen", help="generate a synthetic dataset", add_help=True)
    _common_flags(g)
    g.add_argument("--preset", choices=("default", "heterogeneous", "capacity"),
                   default="default")
    g.add_argument("--capacity", type=float, default=None,
                   help="fixed capacity for the capacity preset")
    g.add_argument("--n-instances", type=int, default=None)

    t = sub.add_parser("train", help="train a retrieval policy")
    _common_flags(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--policy", choices=("band", "bernoulli"), default="band")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)

    e = sub.add_parser("eval", help="evaluate one strategy")
    _common_flags(e)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--strategy", required=True,
                   help="top_k:K | long_context | adaptive_k | "
                        "ldar_checkpoint:PATH | bernoulli_checkpoint:PATH")
    e.add_argument("--greedy", action="store_true",
                   help="evaluate learned policies at the Beta means")

    c = sub.add_parser("compare", help="compare several strategies")
    _common_flags(c)
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--strategies", required=True,
                   help="comma-separated strategy specs")
    c.add_argument("--greedy", action="store_true")
    c.add_argument("--no-sweep", action="store_true",
                   help="skip the per-k sweep file")
    return parser


def _load_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"config {path} is not valid JSON: {e.msg}") from e
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must hold a JSON object")
    return cfg


def _pick_fields(cfg: dict, cls) -> dict:
    names = {f.name for f in dataclass_fields(cls)}
    out = {}
    for k, v in cfg.items():
        if k in names:
            out[k] = tuple(v) if isinstance(v, list) else v
    return out


def _check_known(cfg: dict, *classes) -> None:
    known = set()
    for cls in classes:
        known |= {f.name for f in dataclass_fields(cls)}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")


def _make_oracle(args):
    if args.oracle_cmd is None:
        return None
    return oracle.make_oracle(args.oracle_cmd, timeout=args.oracle_timeout)


def _prepare_instances(args):
    instances = harness.load_dataset(args.data)
    client = _make_oracle(args)
    if client is not None:
        instances = harness.force_external(instances)
    return instances, client


def _cmd_gen(args) -> int:
    if args.out is None:
        raise UsageError("gen requires --out")
    cfg_file = _load_config(args.config)
    _check_known(cfg_file, environ.GeneratorConfig)
    if args.preset == "heterogeneous":
        n = args.n_instances or 400
        instances = environ.heterogeneous_instances(n_instances=n, seed=args.seed)
    else:
        if args.preset == "capacity":
            if args.capacity is None:
                raise UsageError("the capacity preset requires --capacity")
            base = environ.capacity_probe_config(args.capacity, seed=args.seed)
        else:
            base = environ.default_config(seed=args.seed)
        overrides = _pick_fields(cfg_file, environ.GeneratorConfig)
        overrides["seed"] = args.seed
        if args.n_instances is not None:
            overrides["n_instances"] = args.n_instances
        cfg = environ.GeneratorConfig(**{**base.to_dict_typed(), **overrides})
        instances = environ.generate(cfg)
    harness.save_dataset(instances, args.out)
    if not args.quiet:
        print(f"wrote {len(instances)} instances to {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("train requires --out")
    cfg_file = _load_config(args.config)
    _check_known(cfg_file, PolicyConfig, TrainerConfig)
    pcfg = PolicyConfig(**_pick_fields(cfg_file, PolicyConfig))
    tdict = _pick_fields(cfg_file, TrainerConfig)
    tdict["seed"] = args.seed
    if args.steps is not None:
        tdict["total_steps"] = args.steps
    if args.batch_size is not None:
        tdict["batch_size"] = args.batch_size
    tcfg = TrainerConfig(**tdict)
    instances, client = _prepare_instances(args)
    try:
        result = trainer.train(instances, args.policy, pcfg, tcfg,
                               out_dir=args.out, quiet=args.quiet, oracle=client)
    finally:
        if client is not None:
            client.close()
    if not args.quiet:
        print(f"checkpoint: {result.checkpoint_path}")
        print(f"metrics:    {result.metrics_path}")
        print(f"held-out mean reward: {result.held_reward:.4f}")
    return 0


def _cmd_eval(args) -> int:
    spec = strategies.parse_strategy(args.strategy)
    instances, client = _prepare_instances(args)
    try:
        report = harness.evaluate(spec, instances, seed=args.seed,
                                  greedy=args.greedy, oracle=client)
    finally:
        if client is not None:
            client.close()
    if args.out is not None:
        harness.write_rows(report, args.out)
    if not args.quiet:
        print(f"{report.strategy}: score {report.mean_score:.4f} "
              f"token_ratio {report.mean_token_ratio:.4f} "
              f"passage_ratio {report.mean_passage_ratio:.4f} "
              f"({report.n_instances} instances)")
    return 0


def _cmd_compare(args) -> int:
    specs = [strategies.parse_strategy(s)
             for s in args.strategies.split(",") if s.strip()]
    if not specs:
        raise UsageError("compare requires at least one strategy")
    instances, client = _prepare_instances(args)
    try:
        _, text = harness.compare(specs, instances, seed=args.seed,
                                  out_path=args.out, greedy=args.greedy,
                                  oracle=client, sweep=not args.no_sweep)
    finally:
        if client is not None:
            client.close()
    if not args.quiet:
        print(text, end="")
    return 0


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train,
             "eval": _cmd_eval, "compare": _cmd_compare}


def cli_main(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OracleError as e:
        print(f"oracle error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
