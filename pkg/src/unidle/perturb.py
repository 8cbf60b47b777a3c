"""Test-time action perturbations: stall-recovery interpolation, epsilon-greedy
Gaussian noise, and novelty-driven chunk selection via random network
distillation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import mlp
from .policy import PolicyParams, predict_chunk, sample_chunk
from .util import derive_seed


@dataclass(frozen=True)
class PipConfig:
    sigma: float = 0.6
    hold_steps: int = 4
    max_triggers: int = 10

    def __post_init__(self) -> None:
        if not (0.0 <= self.sigma <= 1.0):
            raise ValueError("sigma must be in [0, 1]")
        if self.hold_steps < 1:
            raise ValueError("hold_steps must be >= 1")
        if self.max_triggers < 0:
            raise ValueError("max_triggers must be >= 0")


@dataclass(frozen=True)
class NoiseConfig:
    explore_prob: float = 0.1
    std: float = 0.02

    def __post_init__(self) -> None:
        if not (0.0 <= self.explore_prob <= 1.0):
            raise ValueError("explore_prob must be in [0, 1]")
        if self.std < 0:
            raise ValueError("std must be >= 0")


def pip_action(current_joints: Sequence[float], initial_joints: Sequence[float],
               sigma: float) -> np.ndarray:
    """Interpolated recovery target: sigma*current + (1-sigma)*initial."""
    current = np.asarray(current_joints, dtype=float)
    initial = np.asarray(initial_joints, dtype=float)
    if current.shape != initial.shape:
        raise ValueError("joint array shape mismatch")
    if not (np.all(np.isfinite(current)) and np.all(np.isfinite(initial))):
        raise ValueError("non-finite joints")
    if not (0.0 <= sigma <= 1.0):
        raise ValueError("sigma must be in [0, 1]")
    return sigma * current + (1.0 - sigma) * initial


def noise_action(chunk: np.ndarray, config: NoiseConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """One Bernoulli draw per chunk; on explore, add iid Gaussian noise to
    every entry, otherwise return the chunk unchanged."""
    chunk = np.asarray(chunk, dtype=float)
    if config.explore_prob == 0.0:
        return chunk
    if rng.random() < config.explore_prob:
        return chunk + rng.normal(0.0, config.std, size=chunk.shape)
    return chunk


@dataclass
class RndState:
    target_net: list[mlp.Layer]
    predictor_net: list[mlp.Layer]
    episode_buffer: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    learn_rate: float = 1e-3
    n_candidates: int = 8


def init_rnd(obs_dim: int, chunk_entries: int, seed: int,
             hidden: tuple[int, int] = (32, 32), embed_dim: int = 16,
             learn_rate: float = 1e-3, n_candidates: int = 8) -> RndState:
    """Fixed random target net plus a trainable predictor of the same shape."""
    sizes = [obs_dim + chunk_entries, *hidden, embed_dim]
    target = mlp.init_layers(sizes, np.random.default_rng(derive_seed(seed, 0)))
    predictor = mlp.init_layers(sizes, np.random.default_rng(derive_seed(seed, 1)))
    return RndState(target_net=target, predictor_net=predictor,
                    learn_rate=learn_rate, n_candidates=n_candidates)


def _rnd_input(obs: np.ndarray, chunk: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(obs, float).ravel(), np.asarray(chunk, float).ravel()])


def rnd_score(state: RndState, obs: np.ndarray, chunk: np.ndarray) -> float:
    """Squared prediction error of the predictor against the frozen target."""
    x = _rnd_input(obs, chunk)[None, :]
    target, _ = mlp.forward(state.target_net, x)
    pred, _ = mlp.forward(state.predictor_net, x)
    return float(np.sum((pred - target) ** 2))


def rnd_update(state: RndState, obs: np.ndarray, chunk: np.ndarray) -> RndState:
    """Record the pair and take one gradient step on the predictor toward the
    target output; mutates and returns `state` (single owner per rollout)."""
    x = _rnd_input(obs, chunk)[None, :]
    target, _ = mlp.forward(state.target_net, x)
    pred, acts = mlp.forward(state.predictor_net, x)
    grads = mlp.backward(state.predictor_net, acts, 2.0 * (pred - target))
    state.predictor_net = mlp.sgd_step(state.predictor_net, grads, state.learn_rate)
    state.episode_buffer.append((np.asarray(obs, float).copy(), np.asarray(chunk, float).copy()))
    return state


def select_chunk_by_novelty(policy_params: PolicyParams, state: RndState,
                            obs: np.ndarray, rng: np.random.Generator,
                            score_fn: Callable[[RndState, np.ndarray, np.ndarray], float] | None = None,
                            ) -> np.ndarray:
    """Sample n_candidates chunks and return the one with the highest novelty
    score; ties break toward the lowest candidate index."""
    scorer = score_fn if score_fn is not None else rnd_score
    dist = predict_chunk(policy_params, obs)
    candidates = [sample_chunk(dist, rng) for _ in range(state.n_candidates)]
    scores = [scorer(state, obs, c) for c in candidates]
    return candidates[int(np.argmax(scores))]
