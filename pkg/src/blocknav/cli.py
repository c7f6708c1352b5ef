"""Command-line frontend.

Subcommands: gen, train, eval, replay, profile. Every command takes its
settings from (in increasing precedence) built-in defaults, a JSON config
file, environment variables for paths, and command-line flags. All
randomness flows from the mandatory --seed; nothing is seeded from the
clock, so repeating a command reproduces its outputs byte for byte
(timing measurements excepted).

Exit codes: 0 success, 1 usage error, 2 malformed data, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import BlocknavError, DataError
from .fileio import (
    load_scenario,
    load_scenario_set,
    save_report,
    save_scenario_set,
    write_log,
    write_trace,
)
from .nn import STREAM_PROFILE, init_params, load_checkpoint, rng_stream
from .policy import (
    RulePolicy,
    baseline_policy_factory,
    expert_policy_factory,
    rule_policy_factory,
)
from .scenario import PRESETS, GenConfig, generate_scenario, generate_scenarios, simulate
from .training import ILConfig, RLConfig, evaluate, train_il, train_rl

ENV_PATHS = {
    "dataset": "BLOCKNAV_DATASET",
    "checkpoint": "BLOCKNAV_CHECKPOINT",
    "log": "BLOCKNAV_LOG",
    "out": "BLOCKNAV_OUT",
}


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataError(f"config file {path}: expected a JSON object")
    return cfg


def _setting(args, config: dict, name: str, default=None):
    """Flag wins, then environment (paths only), then config file."""
    flag = getattr(args, name.replace("-", "_"), None)
    if flag is not None:
        return flag
    env_var = ENV_PATHS.get(name)
    if env_var and os.environ.get(env_var):
        return os.environ[env_var]
    if name in config:
        return config[name]
    return default


def _require(args, config, name):
    value = _setting(args, config, name)
    if value is None:
        raise DataError(f"missing required setting '{name}' (flag or config)")
    return value


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise DataError(f"config section '{name}' must be an object")
    return section


def _build_training_config(cls, section: dict, overrides: dict):
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    valid = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(merged) - valid
    if unknown:
        raise DataError(f"unknown {cls.__name__} settings: {sorted(unknown)}")
    return cls(**merged)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    config = _load_config(args.config)
    seed = int(_require(args, config, "seed"))
    out = Path(_require(args, config, "out"))
    section = _section(config, "gen")
    if args.preset:
        count, gen_cfg = PRESETS[args.preset]
        generator_meta = {"preset": args.preset}
    else:
        gen_cfg = GenConfig(**section)
        count = 0
        generator_meta = dict(section)
    if args.count is not None:
        count = args.count
    if count < 1:
        raise DataError("scenario count must be positive (use --preset or --count)")
    scenarios = generate_scenarios(gen_cfg, seed, count)
    manifest = save_scenario_set(out, scenarios, seed, generator_meta)
    print(f"wrote {len(scenarios)} scenarios, manifest {manifest}")
    return 0


def _policy_factory(source: str, sweeps=None):
    if source == "expert":
        return expert_policy_factory(), "expert"
    if source == "baseline":
        return baseline_policy_factory(), "baseline"
    ckpt = load_checkpoint(source)
    return rule_policy_factory(ckpt.params, sweeps=sweeps), Path(source).stem


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = int(_require(args, config, "seed"))
    dataset = _require(args, config, "dataset")
    ckpt_path = _require(args, config, "checkpoint")
    log_path = _setting(args, config, "log")
    if int(_setting(args, config, "workers", 1)) != 1:
        raise DataError("rollouts run sequentially in this build; use --workers 1")
    trainset = load_scenario_set(dataset)
    validation = ()
    val_manifest = _setting(args, config, "validation")
    if val_manifest:
        validation = tuple(load_scenario_set(val_manifest))

    start = 0
    opt = None
    theta = init_params(seed)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        theta, start, opt = ckpt.params, ckpt.iteration, ckpt.adam

    if args.mode == "il":
        il_cfg = _build_training_config(
            ILConfig,
            _section(config, "il"),
            {
                "rounds": args.rounds,
                "adam_steps": args.adam_steps,
                "horizon": args.horizon,
                "checkpoint_every": args.checkpoint_every,
                "validation": validation or None,
            },
        )
        params, records = train_il(
            il_cfg, trainset, theta, seed=seed,
            start_round=start, opt=opt, checkpoint_path=ckpt_path,
        )
    else:
        rl_cfg = _build_training_config(
            RLConfig,
            _section(config, "rl"),
            {
                "iterations": args.iterations,
                "batch": args.batch,
                "horizon": args.horizon,
                "checkpoint_every": args.checkpoint_every,
                "validation": validation or None,
            },
        )
        params, records = train_rl(
            rl_cfg, trainset, theta, seed=seed,
            start_iteration=start, checkpoint_path=ckpt_path,
        )
    if log_path:
        write_log(log_path, records, seed=seed, mode=args.mode)
    print(f"trained {args.mode} for {len(records)} log records, checkpoint {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    seed = int(_require(args, config, "seed"))
    dataset = _require(args, config, "dataset")
    out = _require(args, config, "out")
    runs = int(_setting(args, config, "runs", 10))
    testset = load_scenario_set(dataset)
    rows = {}
    for source in args.policy:
        factory, name = _policy_factory(source)
        rows[name] = evaluate(factory, testset, runs=runs, seed=seed, T=args.horizon)
    save_report(out, rows, seed=seed, runs=runs)
    width = max(len(n) for n in rows)
    print(f"{'policy':<{width}}  {'R0':>16}  {'Rinf':>16}")
    for name, rep in rows.items():
        print(
            f"{name:<{width}}  {rep.r0_mean:7.2f} ± {rep.r0_std:5.2f}  "
            f"{rep.rinf_mean:7.2f} ± {rep.rinf_std:5.2f}"
        )
    return 0


def cmd_replay(args) -> int:
    config = _load_config(args.config)
    seed = int(_require(args, config, "seed"))
    out = _require(args, config, "out")
    scenario = load_scenario(args.scenario)
    factory, name = _policy_factory(args.policy)
    policy = factory(scenario.env, scenario.radius, scenario.v_max)
    result = simulate(scenario, policy, T=args.horizon, seed=seed, collect_frames=True)
    write_trace(out, result, seed=seed, policy=name)
    print(f"wrote trace {out} ({len(result.frames)} frames)")
    return 0


def cmd_profile(args) -> int:
    from . import policy as policy_mod

    config = _load_config(args.config)
    seed = int(_require(args, config, "seed"))
    counts = [int(c) for c in args.agents.split(",")]
    if any(c < 1 for c in counts):
        raise DataError("agent counts must be positive")
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint).params
    else:
        params = init_params(seed)

    scn = generate_scenario(GenConfig(min_super=5, max_super=5, block_prob=0.2), seed, 0)
    pol = RulePolicy(params, scn.env, scn.radius, v_max=scn.v_max)
    calls_before = policy_mod.GRNN_INFER_CALLS
    t0 = time.perf_counter()
    pol.prepare()
    infer_ms = (time.perf_counter() - t0) * 1e3
    infer_calls = policy_mod.GRNN_INFER_CALLS - calls_before

    grid = pol.grid
    rng = rng_stream(seed, STREAM_PROFILE)
    rows = []
    for count in counts:
        idx = rng.integers(0, grid.n_blocks, size=(args.steps, count))
        jitter = rng.uniform(-0.45, 0.45, size=(args.steps, count, 2))
        goals = grid.centers[rng.integers(0, grid.n_blocks, size=count)]
        t0 = time.perf_counter()
        for s in range(args.steps):
            x = grid.centers[idx[s]] + jitter[s]
            pol.eval_batch(x, goals)
        per_step_ms = (time.perf_counter() - t0) * 1e3 / args.steps
        rows.append({"agents": count, "per_step_ms": per_step_ms})

    xs = np.array([r["agents"] for r in rows], dtype=np.float64)
    ys = np.array([r["per_step_ms"] for r in rows])
    fit = {"slope_ms_per_agent": None, "intercept_ms": None, "r2": None}
    if len(rows) >= 2:
        slope, intercept = np.polyfit(xs, ys, 1)
        pred = slope * xs + intercept
        ss_res = float(((ys - pred) ** 2).sum())
        ss_tot = float(((ys - ys.mean()) ** 2).sum())
        fit = {
            "slope_ms_per_agent": float(slope),
            "intercept_ms": float(intercept),
            "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        }
    report = {
        "kind": "profile",
        "format_version": 1,
        "seed": seed,
        "grnn_infer_ms": infer_ms,
        "grnn_infer_calls": infer_calls,
        "steps": args.steps,
        "measurements": rows,
        "linear_fit": fit,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="blocknav", description=__doc__)
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="root random seed (mandatory)")

    p = sub.add_parser("gen", help="generate a scenario dataset")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), help="named dataset recipe")
    p.add_argument("--count", type=int, help="override scenario count")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="imitation or evolutionary training")
    common(p)
    p.add_argument("mode", choices=["il", "rl"])
    p.add_argument("--dataset", help="training manifest")
    p.add_argument("--validation", help="held-out manifest for probes")
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.add_argument("--log", help="training log path (JSONL)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--rounds", type=int)
    p.add_argument("--adam-steps", type=int, dest="adam_steps")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score policies on a test set")
    common(p)
    p.add_argument("--policy", action="append", required=True,
                   help="checkpoint path, 'expert', or 'baseline' (repeatable)")
    p.add_argument("--dataset", help="test manifest")
    p.add_argument("--runs", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", help="report file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="roll out one scenario and export the trace")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", help="trace file")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("profile", help="measure inference cost per agent count")
    common(p)
    p.add_argument("--checkpoint", help="parameters to profile (default: fresh init)")
    p.add_argument("--agents", default="40,80,160,240", help="comma-separated counts")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", help="timing report file")
    p.set_defaults(func=cmd_profile)
    return root


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BlocknavError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
