"""Rollout execution with optional perturbation, seed-derived collection, and
collect-improve-evaluate rounds.

Every episode is a pure function of (policy params, env config, rollout
config, episode seed), so collection is reproducible and schedule-independent
under any worker count.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .core import Dataset, Episode, IdleConfig, Step, write_episodes
from .envs import ACTION_DIM, ENV_NAME, OBS_DIM, NarrowGateConfig, reset, step
from .idle import DetectorState, label_preferences, streaming_update
from .perturb import (NoiseConfig, PipConfig, init_rnd, noise_action, pip_action,
                      rnd_update, select_chunk_by_novelty)
from .policy import (PolicyParams, TrainSchedule, make_chunk_dataset, predict_chunk,
                     sample_chunk, save_policy, train_bc, train_pmpo)
from .util import (ACTION_STREAM, COLLECT_STREAM, ENV_STREAM, EVAL_STREAM,
                   PERTURB_STREAM, derive_seed)

log = logging.getLogger(__name__)

PERTURB_MODES = ("none", "pip", "noise", "rnd")


@dataclass
class RolloutConfig:
    perturb_mode: str = "none"
    idle_config: IdleConfig = field(default_factory=IdleConfig)
    pip_config: PipConfig = field(default_factory=PipConfig)
    noise_config: NoiseConfig = field(default_factory=NoiseConfig)
    rnd_seed: int = 0
    episode_seed: int = 0
    deterministic_actions: bool = True
    detector_cooldown: int | None = None  # default: idle t_min

    def __post_init__(self) -> None:
        if self.perturb_mode not in PERTURB_MODES:
            raise ValueError(f"unknown perturb mode {self.perturb_mode!r}")


@dataclass
class RoundConfig:
    rounds: int = 1
    rollouts_per_round: int = 200
    improve_mode: str = "pmpo"
    alpha: float = 0.9
    beta: float = 0.3
    finetune_steps: int = 2000
    finetune_lr: float = 1e-4  # gentler than fresh training; fine-tunes restart Adam
    eval_episodes: int = 200
    collect_perturb: str = "pip"
    pref_window: int | None = None

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.rollouts_per_round < 1:
            raise ValueError("rounds and rollouts_per_round must be >= 1")
        if self.improve_mode not in ("bc-success", "pmpo"):
            raise ValueError(f"unknown improve mode {self.improve_mode!r}")
        if self.collect_perturb not in PERTURB_MODES:
            raise ValueError(f"unknown perturb mode {self.collect_perturb!r}")


def rollout(params: PolicyParams, env_config: NarrowGateConfig,
            config: RolloutConfig, episode_id: str = "rollout-00000") -> Episode:
    """One episode: query a chunk, execute open_loop steps of it, repeat.

    In pip mode post-step positions feed the streaming detector (every
    stride-th control step); a trigger interrupts the chunk and holds the
    interpolated recovery target for hold_steps control steps (recorded with
    perturbed=True) before the policy resumes.
    """
    cfg = params.config
    ep_seed = config.episode_seed
    state, obs = reset(env_config, derive_seed(ep_seed, ENV_STREAM))
    action_rng = np.random.default_rng(derive_seed(ep_seed, ACTION_STREAM))
    perturb_rng = np.random.default_rng(derive_seed(ep_seed, PERTURB_STREAM))

    pip_mode = config.perturb_mode == "pip"
    cooldown = config.detector_cooldown
    if cooldown is None:
        cooldown = config.idle_config.t_min
    stride = config.idle_config.stride
    detector = DetectorState(run_length=0, last_position=state.agent, cooldown_remaining=0)
    rnd_state = None
    if config.perturb_mode == "rnd":
        rnd_state = init_rnd(cfg.obs_dim, cfg.chunk_len * cfg.action_dim, config.rnd_seed)

    steps: list[Step] = []
    triggers = 0
    success = False
    done = False
    t = 0
    while not done:
        if config.perturb_mode == "rnd":
            chunk = select_chunk_by_novelty(params, rnd_state, obs, action_rng)
            rnd_update(rnd_state, obs, chunk)
        else:
            dist = predict_chunk(params, obs)
            chunk = dist.means if config.deterministic_actions else sample_chunk(dist, action_rng)
        if config.perturb_mode == "noise":
            chunk = noise_action(chunk, config.noise_config, perturb_rng)

        interrupted = False
        for j in range(cfg.open_loop):
            action = np.asarray(chunk[j], dtype=float)
            prev_obs, prev_agent = obs, state.agent
            state, obs, success, done = step(state, action, env_config)
            steps.append(Step(t=t, obs=tuple(prev_obs), joints=prev_agent,
                              action=tuple(float(a) for a in action), perturbed=False))
            t += 1
            if pip_mode and t % stride == 0:
                detector, fired = streaming_update(detector, state.agent,
                                                   config.idle_config, cooldown)
                if fired and triggers < config.pip_config.max_triggers and not done:
                    triggers += 1
                    target = pip_action(state.agent, state.initial_joints,
                                        config.pip_config.sigma)
                    for _ in range(config.pip_config.hold_steps):
                        prev_obs, prev_agent = obs, state.agent
                        state, obs, success, done = step(state, target, env_config)
                        steps.append(Step(t=t, obs=tuple(prev_obs), joints=prev_agent,
                                          action=tuple(float(a) for a in target),
                                          perturbed=True))
                        t += 1
                        if t % stride == 0:
                            detector, _ = streaming_update(detector, state.agent,
                                                           config.idle_config, cooldown)
                        if done:
                            break
                    interrupted = True
            if done or interrupted:
                break

    return Episode(episode_id=episode_id, env_name=ENV_NAME, seed=ep_seed,
                   steps=tuple(steps), final_joints=state.agent, success=success)


def _rollout_job(args) -> Episode:
    params, env_config, config, episode_id = args
    return rollout(params, env_config, config, episode_id)


def collect(params: PolicyParams, env_config: NarrowGateConfig, n: int,
            master_seed: int, config: RolloutConfig,
            provenance: str = "rollout-round-1", jobs: int = 1) -> Dataset:
    """n episodes with per-episode seeds derived from (master_seed, index);
    output is ordered by index and independent of worker count."""
    if n < 1:
        raise ValueError("n must be >= 1")
    job_args = []
    for i in range(n):
        ep_cfg = RolloutConfig(
            perturb_mode=config.perturb_mode,
            idle_config=config.idle_config,
            pip_config=config.pip_config,
            noise_config=config.noise_config,
            rnd_seed=config.rnd_seed,
            episode_seed=derive_seed(master_seed, i),
            deterministic_actions=config.deterministic_actions,
            detector_cooldown=config.detector_cooldown,
        )
        job_args.append((params, env_config, ep_cfg, f"{provenance}-{i:05d}"))
    if jobs > 1:
        workers = min(jobs, n, os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(_rollout_job, job_args, chunksize=max(1, n // (4 * workers))))
    else:
        episodes = [_rollout_job(a) for a in job_args]
    return Dataset(episodes=episodes, provenance=provenance)


def evaluate(params: PolicyParams, env_config: NarrowGateConfig, n: int,
             master_seed: int, config: RolloutConfig,
             jobs: int = 1) -> tuple[Dataset, metrics_mod.EvalReport]:
    """Deterministic-action rollouts plus their summary report."""
    eval_cfg = RolloutConfig(
        perturb_mode=config.perturb_mode,
        idle_config=config.idle_config,
        pip_config=config.pip_config,
        noise_config=config.noise_config,
        rnd_seed=config.rnd_seed,
        deterministic_actions=True,
        detector_cooldown=config.detector_cooldown,
    )
    data = collect(params, env_config, n, master_seed, eval_cfg,
                   provenance="eval", jobs=jobs)
    report = metrics_mod.build_eval_report(data.episodes, config.idle_config)
    return data, report


def improve(params: PolicyParams, expert_data: Dataset, rollouts: Dataset,
            mode: str, idle_config: IdleConfig, round_cfg: RoundConfig,
            seed: int) -> tuple[PolicyParams, list[float]]:
    """Fine-tune on collected rollouts.

    bc-success trains on expert data plus successful rollouts; pmpo adds
    rejected pre-stall transitions from failed rollouts and anchors to the
    input policy with a KL penalty. The existing observation normalization is
    kept so fine-tuning stays in the same input space.
    """
    k = params.config.chunk_len
    schedule = TrainSchedule(steps=round_cfg.finetune_steps, seed=seed,
                             lr=round_cfg.finetune_lr)
    exp_obs, exp_chunks = make_chunk_dataset(expert_data.episodes, k)
    suc_obs, suc_chunks = make_chunk_dataset(rollouts.successes(), k)
    parts_x = [x for x in (exp_obs, suc_obs) if len(x)]
    parts_y = [y for y in (exp_chunks, suc_chunks) if len(y)]
    if not parts_x:
        raise ValueError("empty accepted set: no expert data and no successful rollouts")
    obs_s = np.concatenate(parts_x)
    chunks_s = np.concatenate(parts_y)

    if mode == "bc-success":
        return train_bc(params, obs_s, chunks_s, schedule)
    if mode == "pmpo":
        prefs = label_preferences(rollouts, idle_config,
                                  window=round_cfg.pref_window, chunk_len=k)
        return train_pmpo(params, params, obs_s, chunks_s,
                          prefs.rejected_obs, prefs.rejected_chunks,
                          round_cfg.alpha, round_cfg.beta, schedule)
    raise ValueError(f"unknown improve mode {mode!r}")


@dataclass
class RoundResult:
    round_index: int
    params: PolicyParams
    rollouts: Dataset | None
    report: metrics_mod.EvalReport


def run_rounds(initial_params: PolicyParams, env_config: NarrowGateConfig,
               expert_data: Dataset, round_cfg: RoundConfig,
               rollout_cfg: RolloutConfig, master_seed: int,
               out_dir: str | Path | None = None,
               jobs: int = 1) -> list[RoundResult]:
    """Collect with the current policy, improve, evaluate; once per round.

    Round 0 in the result is the pre-round evaluation of the initial policy.
    Per-round artifacts (rollouts.jsonl, policy.json, metrics.csv) land in
    out_dir/round_k when out_dir is given.
    """
    results: list[RoundResult] = []
    params = initial_params

    _, report0 = evaluate(params, env_config, round_cfg.eval_episodes,
                          derive_seed(master_seed, 0, EVAL_STREAM),
                          RolloutConfig(perturb_mode="none", idle_config=rollout_cfg.idle_config),
                          jobs=jobs)
    results.append(RoundResult(0, params, None, report0))

    for k in range(1, round_cfg.rounds + 1):
        collect_cfg = RolloutConfig(
            perturb_mode=round_cfg.collect_perturb,
            idle_config=rollout_cfg.idle_config,
            pip_config=rollout_cfg.pip_config,
            noise_config=rollout_cfg.noise_config,
            rnd_seed=rollout_cfg.rnd_seed,
            deterministic_actions=False,
            detector_cooldown=rollout_cfg.detector_cooldown,
        )
        provenance = f"rollout-round-{k}"
        rollouts = collect(params, env_config, round_cfg.rollouts_per_round,
                           derive_seed(master_seed, k, COLLECT_STREAM),
                           collect_cfg, provenance=provenance, jobs=jobs)
        n_succ = len(rollouts.successes())
        log.info("round %d: %d/%d rollouts succeeded", k, n_succ, len(rollouts.episodes))
        params, _ = improve(params, expert_data, rollouts, round_cfg.improve_mode,
                            rollout_cfg.idle_config, round_cfg,
                            seed=derive_seed(master_seed, k, 101))
        _, report = evaluate(params, env_config, round_cfg.eval_episodes,
                             derive_seed(master_seed, k, EVAL_STREAM),
                             RolloutConfig(perturb_mode="none", idle_config=rollout_cfg.idle_config),
                             jobs=jobs)
        results.append(RoundResult(k, params, rollouts, report))

        if out_dir is not None:
            round_dir = Path(out_dir) / f"round_{k}"
            round_dir.mkdir(parents=True, exist_ok=True)
            write_episodes(round_dir / "rollouts.jsonl", rollouts.episodes,
                           env_dims=(OBS_DIM, ACTION_DIM))
            save_policy(round_dir / "policy.json", params)
            metrics_mod.emit_report(
                round_dir / "metrics.csv",
                [metrics_mod.eval_report_row(f"round-{k}", report)],
                fieldnames=metrics_mod.EVAL_CSV_FIELDS)
    return results
