"""Command-line entry point wiring the modules into reproducible pipelines.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error. Every
command is deterministic given its full flag set and writes a run manifest
next to its outputs. Progress goes to stderr; reports and artifacts to disk.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__, metrics
from .core import Dataset, IdleConfig, read_episodes, write_episodes
from .envs import (ACTION_DIM, OBS_DIM, ExpertConfig, NarrowGateConfig, gen_demos)
from .flywheel import (RolloutConfig, RoundConfig, collect, evaluate, improve,
                       run_rounds)
from .idle import write_labels
from .perturb import NoiseConfig, PipConfig
from .policy import (PolicyConfig, TrainSchedule, fit_bc, load_policy,
                     make_chunk_dataset, save_policy)
from .util import derive_seed

log = logging.getLogger("unidle")

CONFIG_VERSION = 1
ENV_DIMS = (OBS_DIM, ACTION_DIM)


class UsageError(Exception):
    """Validation problem that maps to exit code 2."""


# ---------------------------------------------------------------------------
# config documents
# ---------------------------------------------------------------------------

def default_config() -> dict:
    return {
        "config_version": CONFIG_VERSION,
        "env": asdict(NarrowGateConfig()),
        "expert": asdict(ExpertConfig()),
        "policy": {
            "obs_dim": OBS_DIM,
            "action_dim": ACTION_DIM,
            "chunk_len": 10,
            "open_loop": 4,
            "hidden_sizes": [64, 64],
            "activation": "tanh",
            "scale_floor": 1e-3,
        },
        "idle": {"epsilon": 0.01, "t_min": 8, "stride": 1},
        "pip": asdict(PipConfig()),
        "noise": asdict(NoiseConfig()),
        "train": {"batch_size": 64, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "round": {
            "rounds": 1,
            "rollouts_per_round": 200,
            "improve_mode": "pmpo",
            "alpha": 0.9,
            "beta": 0.3,
            "finetune_steps": 2000,
            "eval_episodes": 200,
            "collect_perturb": "pip",
        },
    }


def _build(cls, doc: dict, prefix: str, tuple_fields: tuple[str, ...] = ()):
    """Instantiate a config dataclass from a JSON object with field-path errors."""
    if not isinstance(doc, dict):
        raise UsageError(f"{prefix}: expected an object")
    defaults = cls()
    kwargs = {}
    for key, value in doc.items():
        if not hasattr(defaults, key):
            raise UsageError(f"{prefix}.{key}: unknown field")
        if key in tuple_fields:
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{prefix}: {exc}") from exc


def _load_json(path, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"{what} not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} is not valid JSON: {exc}") from exc


def load_env_config(path) -> NarrowGateConfig:
    if path is None:
        return NarrowGateConfig()
    return _build(NarrowGateConfig, _load_json(path, "env config"), "env",
                  tuple_fields=("gate_x_range", "goal"))


def load_expert_config(path) -> ExpertConfig:
    if path is None:
        return ExpertConfig()
    return _build(ExpertConfig, _load_json(path, "expert config"), "expert")


def load_policy_config(path) -> PolicyConfig:
    doc = default_config()["policy"] if path is None else _load_json(path, "policy config")
    base = default_config()["policy"]
    merged = {**base, **doc}
    for key in doc:
        if key not in base:
            raise UsageError(f"policy.{key}: unknown field")
    try:
        return PolicyConfig(
            obs_dim=int(merged["obs_dim"]),
            action_dim=int(merged["action_dim"]),
            chunk_len=int(merged["chunk_len"]),
            open_loop=int(merged["open_loop"]),
            hidden_sizes=tuple(int(h) for h in merged["hidden_sizes"]),
            activation=str(merged["activation"]),
            scale_floor=float(merged["scale_floor"]),
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(f"policy: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _write_manifest(path, args: argparse.Namespace, artifacts: list,
                    extra: dict | None = None, started: float | None = None) -> None:
    doc = {
        "command": " ".join(sys.argv) if sys.argv else "unidle",
        "flags": {k: v for k, v in vars(args).items() if k != "func"},
        "artifacts": [str(a) for a in artifacts],
        "tool_version": __version__,
    }
    if extra:
        doc.update(extra)
    if started is not None:
        doc["duration_sec"] = round(time.time() - started, 3)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, default=str)
        fh.write("\n")


def _read_rollout_files(paths) -> list:
    episodes = []
    for p in paths or []:
        episodes.extend(read_episodes(p, env_dims=ENV_DIMS))
    return episodes


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_demos(args: argparse.Namespace) -> int:
    started = time.time()
    env_cfg = load_env_config(args.env_config)
    expert_cfg = load_expert_config(args.expert_config)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    data = gen_demos(env_cfg, expert_cfg, args.n, args.seed)
    write_episodes(args.out, data.episodes, env_dims=ENV_DIMS)
    _write_manifest(str(args.out) + ".manifest.json", args, [args.out],
                    extra={"seed": args.seed, "n_episodes": len(data.episodes),
                           "env": asdict(env_cfg), "expert": asdict(expert_cfg)},
                    started=started)
    log.info("wrote %d demos to %s", len(data.episodes), args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    if args.train_steps < 0:
        raise UsageError("--train-steps must be >= 0")
    demos = read_episodes(args.demos, env_dims=ENV_DIMS)
    episodes = list(demos)
    n_rollout_successes = 0
    for ep in _read_rollout_files(args.rollouts):
        if ep.success:
            episodes.append(ep)
            n_rollout_successes += 1
    cfg = load_policy_config(args.policy_config)
    obs, chunks = make_chunk_dataset(episodes, cfg.chunk_len)
    if len(obs) == 0:
        raise UsageError("empty training set")
    schedule = TrainSchedule(steps=args.train_steps, seed=args.seed)
    params, losses = fit_bc(obs, chunks, cfg, schedule)
    save_policy(args.out, params)
    loss_path = str(args.out) + ".loss.csv"
    metrics.emit_report(loss_path, [{"step": i, "loss": v} for i, v in enumerate(losses)],
                        fieldnames=["step", "loss"])
    _write_manifest(str(args.out) + ".manifest.json", args, [args.out, loss_path],
                    extra={"seed": args.seed, "n_training_pairs": len(obs),
                           "n_rollout_successes": n_rollout_successes},
                    started=started)
    log.info("trained %d steps on %d pairs -> %s", args.train_steps, len(obs), args.out)
    return 0


def _rollout_config_from_args(args: argparse.Namespace, deterministic: bool) -> RolloutConfig:
    return RolloutConfig(
        perturb_mode=args.perturb,
        idle_config=IdleConfig(epsilon=args.idle_epsilon, t_min=args.idle_tmin, stride=args.idle_stride),
        pip_config=PipConfig(sigma=args.pip_sigma, hold_steps=args.pip_hold,
                             max_triggers=args.pip_max_triggers),
        noise_config=NoiseConfig(explore_prob=args.noise_prob, std=args.noise_std),
        rnd_seed=args.rnd_seed,
        deterministic_actions=deterministic,
    )


def cmd_rollout(args: argparse.Namespace) -> int:
    started = time.time()
    params = load_policy(args.policy)
    env_cfg = load_env_config(args.env_config)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    config = _rollout_config_from_args(args, deterministic=args.deterministic)
    data = collect(params, env_cfg, args.n, args.seed, config,
                   provenance="rollout-round-1", jobs=args.jobs)
    write_episodes(args.out, data.episodes, env_dims=ENV_DIMS)
    n_success = len(data.successes())
    n_triggers = sum(metrics.perturbation_runs(e) for e in data.episodes)
    print(f"successes: {n_success}/{args.n}")
    _write_manifest(str(args.out) + ".manifest.json", args, [args.out],
                    extra={"seed": args.seed, "n_success": n_success,
                           "n_perturbation_triggers": n_triggers},
                    started=started)
    return 0


def cmd_label(args: argparse.Namespace) -> int:
    started = time.time()
    episodes = read_episodes(args.rollouts, env_dims=ENV_DIMS)
    if args.idle_epsilon < 0:
        raise UsageError("--idle-epsilon must be >= 0")
    if args.idle_tmin < 1:
        raise UsageError("--idle-tmin must be >= 1")
    idle_cfg = IdleConfig(epsilon=args.idle_epsilon, t_min=args.idle_tmin, stride=args.idle_stride)
    count = write_labels(args.out, episodes, idle_cfg, window=args.window)
    _write_manifest(str(args.out) + ".manifest.json", args, [args.out],
                    extra={"n_episodes": count}, started=started)
    log.info("labeled %d episodes -> %s", count, args.out)
    return 0


def cmd_improve(args: argparse.Namespace) -> int:
    started = time.time()
    if not (0.0 <= args.alpha <= 1.0):
        raise UsageError("--alpha must be in [0, 1]")
    if args.beta < 0:
        raise UsageError("--beta must be >= 0")
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    params = load_policy(args.policy)
    demos = Dataset(read_episodes(args.demos, env_dims=ENV_DIMS), provenance="expert")
    rollouts = Dataset(_read_rollout_files([args.rollouts]), provenance="rollout-round-1")
    idle_cfg = IdleConfig(epsilon=args.idle_epsilon, t_min=args.idle_tmin, stride=args.idle_stride)
    round_cfg = RoundConfig(rounds=1, rollouts_per_round=max(1, len(rollouts.episodes)),
                            improve_mode=args.mode, alpha=args.alpha, beta=args.beta,
                            finetune_steps=args.steps, pref_window=args.window)
    new_params, _ = improve(params, demos, rollouts, args.mode, idle_cfg,
                            round_cfg, seed=args.seed)
    save_policy(args.out, new_params)
    _write_manifest(str(args.out) + ".manifest.json", args, [args.out],
                    extra={"seed": args.seed, "mode": args.mode,
                           "alpha": args.alpha, "beta": args.beta},
                    started=started)
    log.info("improved policy (%s) -> %s", args.mode, args.out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    params = load_policy(args.policy)
    env_cfg = load_env_config(args.env_config)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    config = _rollout_config_from_args(args, deterministic=True)
    _, report = evaluate(params, env_cfg, args.n, args.seed, config, jobs=args.jobs)
    metrics.emit_report(args.report, [metrics.eval_report_row(args.perturb, report)],
                        fieldnames=metrics.EVAL_CSV_FIELDS)
    _write_manifest(str(args.report) + ".manifest.json", args, [args.report],
                    extra={"seed": args.seed, "rate": report.rate},
                    started=started)
    log.info("eval %s: rate=%.3f [%0.3f, %0.3f]", args.perturb, report.rate,
             report.ci_lo, report.ci_hi)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    started = time.time()
    if args.variance and args.policy is None:
        raise UsageError("--variance requires --policy")
    episodes = read_episodes(args.rollouts, env_dims=ENV_DIMS)
    idle_cfg = IdleConfig(epsilon=args.idle_epsilon, t_min=args.idle_tmin, stride=args.idle_stride)
    report_dir = Path(args.report)
    report_dir.mkdir(parents=True, exist_ok=True)
    frac, n_fail = metrics.idle_failure_fraction(episodes, idle_cfg)
    idle_path = report_dir / "idle_failures.csv"
    metrics.emit_report(idle_path, [{
        "n_episodes": len(episodes),
        "n_failures": n_fail,
        "idle_failure_fraction": frac,
    }], fieldnames=["n_episodes", "n_failures", "idle_failure_fraction"])
    artifacts = [idle_path]
    if args.variance:
        params = load_policy(args.policy)
        var = metrics.action_variance_report(params, episodes, idle_cfg,
                                             n_samples=args.variance_samples,
                                             seed=args.seed)
        var_path = report_dir / "variance.csv"
        metrics.emit_report(var_path, [metrics.variance_report_row("policy", var)],
                            fieldnames=metrics.VARIANCE_CSV_FIELDS)
        artifacts.append(var_path)
    _write_manifest(report_dir / "manifest.json", args, artifacts, started=started)
    return 0


def _require(doc: dict, key: str, typ, path: str):
    if key not in doc:
        raise UsageError(f"{path}.{key}: missing required field")
    value = doc[key]
    if typ is int and isinstance(value, bool) or not isinstance(value, typ):
        raise UsageError(f"{path}.{key}: expected {typ.__name__}")
    return value


def cmd_flywheel(args: argparse.Namespace) -> int:
    started = time.time()
    doc = _load_json(args.config, "flywheel config")
    if not isinstance(doc, dict):
        raise UsageError("config: expected a JSON object")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    env_cfg = _build(NarrowGateConfig, doc.get("env", {}), "config.env",
                     tuple_fields=("gate_x_range", "goal"))
    expert_cfg = _build(ExpertConfig, doc.get("expert", {}), "config.expert")
    idle_doc = doc.get("idle", {})
    idle_cfg = _build(IdleConfig, idle_doc, "config.idle")
    pip_cfg = _build(PipConfig, doc.get("pip", {}), "config.pip")
    noise_cfg = _build(NoiseConfig, doc.get("noise", {}), "config.noise")

    round_doc = doc.get("round", {})
    try:
        round_cfg = _build(RoundConfig, round_doc, "config.round")
    except TypeError as exc:
        raise UsageError(f"config.round: {exc}") from exc

    artifacts: list = []
    if "init_policy" in doc:
        params = load_policy(_require(doc, "init_policy", str, "config"))
        demo_path = doc.get("demos")
        if demo_path is None:
            raise UsageError("config.demos: required when init_policy is given")
        demos = Dataset(read_episodes(demo_path, env_dims=ENV_DIMS), provenance="expert")
    else:
        n_demos = _require(doc, "n_demos", int, "config")
        train_steps = _require(doc, "train_steps", int, "config")
        demos = gen_demos(env_cfg, expert_cfg, n_demos, derive_seed(args.seed, 11))
        demo_path = out_dir / "demos.jsonl"
        write_episodes(demo_path, demos.episodes, env_dims=ENV_DIMS)
        artifacts.append(demo_path)
        policy_doc = doc.get("policy", {})
        base = default_config()["policy"]
        merged = {**base, **policy_doc}
        policy_cfg = PolicyConfig(
            obs_dim=int(merged["obs_dim"]), action_dim=int(merged["action_dim"]),
            chunk_len=int(merged["chunk_len"]), open_loop=int(merged["open_loop"]),
            hidden_sizes=tuple(int(h) for h in merged["hidden_sizes"]),
            activation=str(merged["activation"]), scale_floor=float(merged["scale_floor"]))
        obs, chunks = make_chunk_dataset(demos.episodes, policy_cfg.chunk_len)
        params, _ = fit_bc(obs, chunks, policy_cfg,
                           TrainSchedule(steps=train_steps, seed=derive_seed(args.seed, 12)))
        init_path = out_dir / "policy_init.json"
        save_policy(init_path, params)
        artifacts.append(init_path)

    rollout_cfg = RolloutConfig(perturb_mode=round_cfg.collect_perturb,
                                idle_config=idle_cfg, pip_config=pip_cfg,
                                noise_config=noise_cfg,
                                rnd_seed=derive_seed(args.seed, 13))
    results = run_rounds(params, env_cfg, demos, round_cfg, rollout_cfg,
                         master_seed=args.seed, out_dir=out_dir, jobs=args.jobs)
    rows = [dict(round=r.round_index, **metrics.eval_report_row(
        f"round-{r.round_index}", r.report)) for r in results]
    combined = out_dir / "flywheel_metrics.csv"
    metrics.emit_report(combined, rows, fieldnames=["round"] + metrics.EVAL_CSV_FIELDS)
    artifacts.append(combined)
    for r in results[1:]:
        rd = out_dir / f"round_{r.round_index}"
        artifacts.extend([rd / "rollouts.jsonl", rd / "policy.json", rd / "metrics.csv"])
    _write_manifest(out_dir / "manifest.json", args, artifacts,
                    extra={"seed": args.seed}, started=started)
    log.info("flywheel finished: %d rounds -> %s", round_cfg.rounds, out_dir)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_idle_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--idle-epsilon", type=float, default=0.01)
    p.add_argument("--idle-tmin", type=int, default=8)
    p.add_argument("--idle-stride", type=int, default=1,
                   help="aggregate motion across this many control steps")


def _add_perturb_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--perturb", choices=["none", "pip", "noise", "rnd"], default="none")
    _add_idle_flags(p)
    p.add_argument("--pip-sigma", type=float, default=0.6)
    p.add_argument("--pip-hold", type=int, default=4)
    p.add_argument("--pip-max-triggers", type=int, default=10)
    p.add_argument("--noise-prob", type=float, default=0.1)
    p.add_argument("--noise-std", type=float, default=0.02)
    p.add_argument("--rnd-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unidle",
                                     description="stall-aware imitation-learning pipelines")
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the versioned default config document and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-demos", help="generate successful expert demonstrations")
    p.add_argument("--env-config")
    p.add_argument("--expert-config")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train", help="behavior-clone a policy from demos")
    p.add_argument("--demos", required=True)
    p.add_argument("--rollouts", action="append", default=None)
    p.add_argument("--policy-config")
    p.add_argument("--train-steps", type=int, default=20000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="collect policy rollouts")
    p.add_argument("--policy", required=True)
    p.add_argument("--env-config")
    p.add_argument("--n", type=int, required=True)
    _add_perturb_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("label", help="write stall segments and rejected keys")
    p.add_argument("--rollouts", required=True)
    _add_idle_flags(p)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("improve", help="fine-tune a policy on rollouts")
    p.add_argument("--policy", required=True)
    p.add_argument("--demos", required=True)
    p.add_argument("--rollouts", required=True)
    p.add_argument("--mode", choices=["bc-success", "pmpo"], default="pmpo")
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=2000)
    _add_idle_flags(p)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_improve)

    p = sub.add_parser("eval", help="deterministic evaluation rollouts + report")
    p.add_argument("--policy", required=True)
    p.add_argument("--env-config")
    p.add_argument("--n", type=int, required=True)
    _add_perturb_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="stall-failure fraction and action variance")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--policy")
    _add_idle_flags(p)
    p.add_argument("--variance", action="store_true")
    p.add_argument("--variance-samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("flywheel", help="multi-round collect-improve-evaluate")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_flywheel)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        print(json.dumps(default_config(), indent=2))
        return 0
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
