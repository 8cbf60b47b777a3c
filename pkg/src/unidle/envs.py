"""Narrow-gate point environment plus a pausing scripted expert.

A 2-D position-controlled agent must thread a narrow gate in a wall and reach
a goal above it. Per step the agent moves at most max_step toward the
commanded target; motion segments that would cross the wall outside the gate
halt at the wall on the starting side. The scripted expert runs at the gate,
pauses before the precision maneuver whenever it arrives off-axis (tiny
jitter around a held position), repositions under the opening, and creeps
through with small capped steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dataset, Episode, Step
from .util import ENV_STREAM, EXPERT_STREAM, derive_seed, rng_from

log = logging.getLogger(__name__)

ENV_NAME = "narrow_gate_v1"
OBS_DIM = 3
ACTION_DIM = 2


@dataclass(frozen=True)
class NarrowGateConfig:
    gate_width: float = 0.04
    gate_x_range: tuple[float, float] = (0.3, 0.7)
    max_step: float = 0.05
    goal: tuple[float, float] = (0.5, 0.92)
    goal_radius: float = 0.05
    horizon: int = 200
    wall_y: float = 0.5
    contact_margin: float = 0.001

    def __post_init__(self) -> None:
        if not (0 < self.gate_width < 1):
            raise ValueError("gate_width must be in (0, 1)")
        if self.max_step <= 0 or self.goal_radius <= 0:
            raise ValueError("max_step and goal_radius must be > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class EnvState:
    agent: tuple[float, float]
    gate_center: float
    step_count: int
    initial_joints: tuple[float, float]


@dataclass(frozen=True)
class ExpertConfig:
    pause_mean: float = 13.0
    pause_jitter_std: float = 0.0005
    precision_zone_radius: float = 0.1
    precision_step: float = 0.01
    move_jitter_std: float = 0.02
    pause_offaxis: float = 0.035

    def __post_init__(self) -> None:
        if self.pause_mean < 0:
            raise ValueError("pause_mean must be >= 0")


def _obs(state: EnvState) -> np.ndarray:
    return np.array([state.agent[0], state.agent[1], state.gate_center])


def reset(config: NarrowGateConfig, seed: int) -> tuple[EnvState, np.ndarray]:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 0.9)
    y = rng.uniform(0.05, 0.2)
    g = rng.uniform(*config.gate_x_range)
    state = EnvState(agent=(x, y), gate_center=g, step_count=0, initial_joints=(x, y))
    return state, _obs(state)


def step(state: EnvState, action: Sequence[float],
         config: NarrowGateConfig) -> tuple[EnvState, np.ndarray, bool, bool]:
    """Move toward `action` by at most max_step; returns (state, obs, success, done)."""
    ax, ay = float(action[0]), float(action[1])
    if not (math.isfinite(ax) and math.isfinite(ay)):
        raise ValueError("non-finite action")
    if state.step_count >= config.horizon:
        raise RuntimeError("step() called on a done environment")
    px, py = state.agent
    dx, dy = ax - px, ay - py
    dist = math.hypot(dx, dy)
    if dist > config.max_step:
        scale = config.max_step / dist
        dx *= scale
        dy *= scale
    nx = min(1.0, max(0.0, px + dx))
    ny = min(1.0, max(0.0, py + dy))

    s0 = py - config.wall_y
    s1 = ny - config.wall_y
    crossing = (s0 < 0 < s1) or (s1 < 0 < s0) or (s1 == 0 and s0 != 0)
    if crossing:
        t = s0 / (s0 - s1)
        xc = px + t * (nx - px)
        half = config.gate_width / 2
        g = state.gate_center
        if not (g - half <= xc <= g + half):
            nx = xc
            ny = config.wall_y - config.contact_margin if s0 < 0 else config.wall_y + config.contact_margin

    new_state = EnvState(agent=(nx, ny), gate_center=state.gate_center,
                         step_count=state.step_count + 1,
                         initial_joints=state.initial_joints)
    success = math.hypot(nx - config.goal[0], ny - config.goal[1]) < config.goal_radius
    done = success or new_state.step_count >= config.horizon
    return new_state, _obs(new_state), success, done


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------

@dataclass
class ExpertMemory:
    pause_budget: int | None = None  # drawn once, on the first call
    phase: str = "approach"


# offsets from wall_y for the approach geometry
_WAYPOINT_DY = -0.06
_EXIT_DY = 0.06
_ALIGN_TOL = 0.01
_PREZONE_RADIUS = 0.2


def expert_action(state: EnvState, config: ExpertConfig, env_config: NarrowGateConfig,
                  memory: ExpertMemory | None,
                  rng: np.random.Generator) -> tuple[np.ndarray, ExpertMemory]:
    """One expert control decision; carries the remaining pause budget.

    Far out the expert heads for the gate mouth, bending toward the waypoint
    under the gate once inside the pre-zone, so zone entries spread over a
    wide arc. Entering the precision zone off-axis (more than pause_offaxis
    lateral to the gate) is the difficult case: the expert pauses there
    before the precision maneuver, then repositions to the waypoint at full
    speed and threads the gate with small creeping steps.
    """
    if memory is None:
        memory = ExpertMemory()
    if memory.pause_budget is None:
        if config.pause_mean > 0:
            memory.pause_budget = int(rng.geometric(1.0 / config.pause_mean))
        else:
            memory.pause_budget = 0

    px, py = state.agent
    g = state.gate_center
    wall = env_config.wall_y
    mouth_dist = math.hypot(px - g, py - wall)

    if py > wall:
        memory.phase = "finish"
        target = np.array(env_config.goal) + rng.normal(0.0, config.move_jitter_std, size=2)
        return target, memory

    if mouth_dist <= config.precision_zone_radius:
        pause_ok = memory.pause_budget > 0 and abs(px - g) > config.pause_offaxis
        if pause_ok:
            memory.pause_budget -= 1
            memory.phase = "pause"
            return np.array([px, py]) + rng.normal(0.0, config.pause_jitter_std, size=2), memory
        if abs(px - g) >= _ALIGN_TOL:
            # reposition to the aligned point under the gate at full speed;
            # also the recovery move after grazing the wall beside the gate
            memory.phase = "reposition"
            target = np.array([g, wall + _WAYPOINT_DY])
            return target + rng.normal(0.0, config.move_jitter_std, size=2), memory
        memory.phase = "creep"
        tx, ty = g, wall + _EXIT_DY
        dx, dy = tx - px, ty - py
        dist = math.hypot(dx, dy)
        if dist > config.precision_step:
            scale = config.precision_step / dist
            dx *= scale
            dy *= scale
        return np.array([px + dx, py + dy]), memory

    memory.phase = "approach"
    if mouth_dist > _PREZONE_RADIUS:
        target = np.array([g, wall])
    else:
        target = np.array([g, wall + _WAYPOINT_DY])
    return target + rng.normal(0.0, config.move_jitter_std, size=2), memory


def run_expert_episode(env_config: NarrowGateConfig, expert_config: ExpertConfig,
                       episode_seed: int, episode_id: str) -> Episode:
    state, obs = reset(env_config, derive_seed(episode_seed, ENV_STREAM))
    rng = rng_from(episode_seed, EXPERT_STREAM)
    memory: ExpertMemory | None = None
    steps = []
    success = False
    done = False
    t = 0
    while not done:
        action, memory = expert_action(state, expert_config, env_config, memory, rng)
        prev_obs = obs
        prev_agent = state.agent
        state, obs, success, done = step(state, action, env_config)
        steps.append(Step(t=t, obs=tuple(prev_obs), joints=prev_agent,
                          action=tuple(float(a) for a in action), perturbed=False))
        t += 1
    return Episode(episode_id=episode_id, env_name=ENV_NAME, seed=episode_seed,
                   steps=tuple(steps), final_joints=state.agent, success=success)


def gen_demos(env_config: NarrowGateConfig, expert_config: ExpertConfig,
              n: int, seed: int) -> Dataset:
    """n successful expert episodes; failed attempts are regenerated with a
    fresh derived seed. Aborts if 10*n attempts cannot produce n successes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    episodes = []
    attempts = 0
    for i in range(n):
        while True:
            if attempts >= 10 * n:
                raise RuntimeError(f"expert produced too few successes ({len(episodes)}/{n} "
                                   f"after {attempts} attempts)")
            attempt = attempts
            attempts += 1
            ep_seed = derive_seed(seed, i, attempt)
            ep = run_expert_episode(env_config, expert_config, ep_seed, f"demo-{i:05d}")
            if ep.success:
                episodes.append(ep)
                break
            log.warning("expert attempt %d for demo %d failed; regenerating", attempt, i)
    return Dataset(episodes=episodes, provenance="expert")
