"""Episode data model and JSON Lines persistence.

Episodes are immutable records of one rollout. The position sequence used by
stall detection is each step's joints followed by final_joints, so T actions
always come with T+1 positions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class Step:
    t: int
    obs: tuple[float, ...]
    joints: tuple[float, ...]
    action: tuple[float, ...]
    perturbed: bool = False


@dataclass(frozen=True)
class Episode:
    episode_id: str
    env_name: str
    seed: int
    steps: tuple[Step, ...]
    final_joints: tuple[float, ...]
    success: bool

    def positions(self) -> list[tuple[float, ...]]:
        """Joint positions per step plus the post-episode position."""
        return [s.joints for s in self.steps] + [self.final_joints]


@dataclass
class Dataset:
    episodes: list[Episode]
    provenance: str = "expert"

    def __post_init__(self) -> None:
        ids = [e.episode_id for e in self.episodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate episode_id in dataset")

    def successes(self) -> list[Episode]:
        return [e for e in self.episodes if e.success]

    def failures(self) -> list[Episode]:
        return [e for e in self.episodes if not e.success]


@dataclass(frozen=True)
class IdleConfig:
    """Detection thresholds.

    stride > 1 downsamples the position sequence to every stride-th position
    before computing deltas, aggregating motion across open-loop chunk
    boundaries; epsilon and t_min then apply to the strided transitions.
    """

    epsilon: float = 0.01
    t_min: int = 8
    stride: int = 1

    def __post_init__(self) -> None:
        # epsilon == 0 is allowed as the degenerate "nothing is idle" config
        # (the strict d < epsilon test can never pass).
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.t_min < 1:
            raise ValueError("t_min must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def _all_finite(values: Iterable[float]) -> bool:
    return all(math.isfinite(v) for v in values)


def validate_episode(episode: Episode, env_dims: tuple[int, int]) -> str | None:
    """Return None if the episode satisfies all invariants, else the first
    violated invariant's description."""
    obs_dim, act_dim = env_dims
    if len(episode.final_joints) != act_dim:
        return "final_joints length mismatch"
    if not _all_finite(episode.final_joints):
        return "non-finite value in final_joints"
    for i, step in enumerate(episode.steps):
        if step.t != i:
            return f"non-consecutive indices (step {i} has t={step.t})"
        if len(step.obs) != obs_dim:
            return f"obs length mismatch at t={i}"
        if len(step.joints) != act_dim:
            return f"joints length mismatch at t={i}"
        if len(step.action) != act_dim:
            return f"action length mismatch at t={i}"
        if not (_all_finite(step.obs) and _all_finite(step.joints) and _all_finite(step.action)):
            return f"non-finite value at t={i}"
    return None


def _step_to_dict(step: Step) -> dict:
    return {
        "t": step.t,
        "obs": list(step.obs),
        "joints": list(step.joints),
        "action": list(step.action),
        "perturbed": step.perturbed,
    }


def episode_to_dict(episode: Episode) -> dict:
    return {
        "episode_id": episode.episode_id,
        "env_name": episode.env_name,
        "seed": episode.seed,
        "steps": [_step_to_dict(s) for s in episode.steps],
        "final_joints": list(episode.final_joints),
        "success": episode.success,
    }


def episode_from_dict(d: dict) -> Episode:
    steps = tuple(
        Step(
            t=int(s["t"]),
            obs=tuple(float(v) for v in s["obs"]),
            joints=tuple(float(v) for v in s["joints"]),
            action=tuple(float(v) for v in s["action"]),
            perturbed=bool(s["perturbed"]),
        )
        for s in d["steps"]
    )
    return Episode(
        episode_id=str(d["episode_id"]),
        env_name=str(d["env_name"]),
        seed=int(d["seed"]),
        steps=steps,
        final_joints=tuple(float(v) for v in d["final_joints"]),
        success=bool(d["success"]),
    )


def write_episodes(path, episodes: Sequence[Episode], env_dims: tuple[int, int] | None = None) -> int:
    """Write one JSON record per line; returns the number written.

    Validation failures abort before anything is written.
    """
    if env_dims is not None:
        for ep in episodes:
            problem = validate_episode(ep, env_dims)
            if problem is not None:
                raise ValueError(f"episode {ep.episode_id}: {problem}")
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_dict(ep), separators=(",", ":")))
            fh.write("\n")
    return len(episodes)


def read_episodes(path, env_dims: tuple[int, int] | None = None) -> list[Episode]:
    """Read episodes in file order; parse errors report the line number."""
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                ep = episode_from_dict(record)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"parse error at line {lineno}: {exc}") from exc
            if env_dims is not None:
                problem = validate_episode(ep, env_dims)
                if problem is not None:
                    raise ValueError(f"episode {ep.episode_id}: {problem}")
            episodes.append(ep)
    return episodes
