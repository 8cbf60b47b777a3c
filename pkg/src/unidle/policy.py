"""Chunked stochastic policy with a Laplace action head.

One observation maps to a chunk of K future actions. The network outputs
2*K*action_dim values: means first, then raw scales passed through
softplus(raw) + scale_floor. Minimizing the Laplace negative log-likelihood
with frozen scales is an l1 regression on the means, which is why the fitted
means track conditional medians of the demonstration actions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import mlp
from .core import Episode
from .util import derive_seed

POLICY_FORMAT_VERSION = 1


@dataclass
class PolicyConfig:
    obs_dim: int
    action_dim: int
    chunk_len: int = 10
    open_loop: int = 4
    hidden_sizes: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    scale_floor: float = 1e-3
    obs_mean: np.ndarray | None = None
    obs_std: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (1 <= self.open_loop <= self.chunk_len):
            raise ValueError("open_loop must satisfy 1 <= M <= chunk_len")
        if self.scale_floor <= 0:
            raise ValueError("scale_floor must be > 0")
        if self.activation != "tanh":
            raise ValueError("only tanh activation is supported")


@dataclass
class PolicyParams:
    config: PolicyConfig
    layers: list[mlp.Layer]
    init_seed: int

    def copy(self) -> "PolicyParams":
        cfg = replace(
            self.config,
            obs_mean=None if self.config.obs_mean is None else self.config.obs_mean.copy(),
            obs_std=None if self.config.obs_std is None else self.config.obs_std.copy(),
        )
        return PolicyParams(cfg, [(w.copy(), b.copy()) for w, b in self.layers], self.init_seed)


@dataclass
class ChunkDistribution:
    means: np.ndarray   # (K, action_dim)
    scales: np.ndarray  # (K, action_dim), every entry >= scale_floor


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _layer_sizes(config: PolicyConfig) -> list[int]:
    out = 2 * config.chunk_len * config.action_dim
    return [config.obs_dim, *config.hidden_sizes, out]


def init_policy(config: PolicyConfig, seed: int) -> PolicyParams:
    rng = np.random.default_rng(derive_seed(seed))
    layers = mlp.init_layers(_layer_sizes(config), rng)
    return PolicyParams(config=config, layers=layers, init_seed=int(seed))


def _normalize(config: PolicyConfig, obs: np.ndarray) -> np.ndarray:
    if config.obs_mean is None or config.obs_std is None:
        return obs
    return (obs - config.obs_mean) / np.maximum(config.obs_std, 1e-8)


def _forward_batch(params: PolicyParams, obs: np.ndarray):
    """Forward pass on (B, obs_dim); returns means, scales, raw scales, acts."""
    cfg = params.config
    ka = cfg.chunk_len * cfg.action_dim
    out, acts = mlp.forward(params.layers, _normalize(cfg, obs))
    means = out[:, :ka]
    raw = out[:, ka:]
    scales = _softplus(raw) + cfg.scale_floor
    return means, scales, raw, acts


def predict_chunk(params: PolicyParams, obs: np.ndarray) -> ChunkDistribution:
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (params.config.obs_dim,):
        raise ValueError(f"obs shape {obs.shape} != ({params.config.obs_dim},)")
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    means, scales, _, _ = _forward_batch(params, obs[None, :])
    k, a = params.config.chunk_len, params.config.action_dim
    return ChunkDistribution(means=means[0].reshape(k, a), scales=scales[0].reshape(k, a))


def sample_chunk(dist: ChunkDistribution, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF Laplace draws, independent per entry."""
    u = rng.random(dist.means.shape) - 0.5
    return dist.means - dist.scales * np.sign(u) * np.log(np.maximum(1.0 - 2.0 * np.abs(u), 1e-300))


def nll(dist: ChunkDistribution, actions: np.ndarray) -> float:
    """Sum over entries of log(2b) + |x - mu| / b."""
    actions = np.asarray(actions, dtype=float)
    if actions.shape != dist.means.shape:
        raise ValueError("actions shape mismatch")
    return float(np.sum(np.log(2.0 * dist.scales) + np.abs(actions - dist.means) / dist.scales))


def laplace_kl(ref_dist: ChunkDistribution, dist: ChunkDistribution) -> float:
    """Closed-form KL(ref || dist), summed over entries."""
    return float(np.sum(_kl_terms(ref_dist.means, ref_dist.scales, dist.means, dist.scales)))


def _kl_terms(mu1, b1, mu2, b2):
    delta = np.abs(mu1 - mu2)
    return np.log(b2 / b1) + delta / b2 + (b1 / b2) * np.exp(-delta / b1) - 1.0


def bc_loss_and_grad(params: PolicyParams, obs_batch: np.ndarray,
                     chunk_batch: np.ndarray) -> tuple[float, list[mlp.Layer]]:
    """Mean Laplace NLL over the batch plus its gradient.

    chunk_batch is (B, K, action_dim); the |.| subgradient at 0 is taken as 0.
    """
    obs_batch = np.asarray(obs_batch, dtype=float)
    if obs_batch.ndim != 2 or obs_batch.shape[0] == 0:
        raise ValueError("empty batch")
    n = obs_batch.shape[0]
    means, scales, raw, acts = _forward_batch(params, obs_batch)
    targets = np.asarray(chunk_batch, dtype=float).reshape(n, -1)
    resid = targets - means
    loss = float(np.sum(np.log(2.0 * scales) + np.abs(resid) / scales)) / n
    dmu = -np.sign(resid) / scales / n
    draw = (1.0 / scales - np.abs(resid) / scales ** 2) * _sigmoid(raw) / n
    grads = mlp.backward(params.layers, acts, np.concatenate([dmu, draw], axis=1))
    return loss, grads


def _kl_batch_and_douts(params: PolicyParams, ref_params: PolicyParams,
                        obs: np.ndarray):
    """Per-state KL sums against the frozen reference plus d(sum KL)/d(raw outputs)."""
    means, scales, raw, acts = _forward_batch(params, obs)
    ref_means, ref_scales, _, _ = _forward_batch(ref_params, obs)
    delta = np.abs(ref_means - means)
    expterm = np.exp(-delta / ref_scales)
    kl_per_state = np.sum(_kl_terms(ref_means, ref_scales, means, scales), axis=1)
    dmu = np.sign(means - ref_means) * (1.0 - expterm) / scales
    db = 1.0 / scales - delta / scales ** 2 - (ref_scales / scales ** 2) * expterm
    draw = db * _sigmoid(raw)
    return kl_per_state, dmu, draw, acts


def pmpo_loss_and_grad(params: PolicyParams, ref_params: PolicyParams,
                       batch_s: tuple[np.ndarray, np.ndarray],
                       batch_f: tuple[np.ndarray, np.ndarray] | None,
                       alpha: float, beta: float) -> tuple[float, list[mlp.Layer]]:
    """Preference loss: pull toward accepted chunks, push away from rejected
    ones, and anchor to the reference policy with a KL penalty.

    loss = alpha * mean_s[nll] - (1 - alpha) * mean_f[nll]
           + beta * mean_{s u f}[KL(ref(s) || params(s))]
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must be in [0, 1]")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    obs_s, chunks_s = batch_s
    obs_s = np.asarray(obs_s, dtype=float)
    if obs_s.ndim != 2 or obs_s.shape[0] == 0:
        raise ValueError("empty accepted batch")
    have_f = batch_f is not None and len(batch_f[0]) > 0
    ns = obs_s.shape[0]
    nf = len(batch_f[0]) if have_f else 0
    n_states = ns + nf

    means_s, scales_s, raw_s, acts_s = _forward_batch(params, obs_s)
    targets_s = np.asarray(chunks_s, dtype=float).reshape(ns, -1)
    resid_s = targets_s - means_s
    nll_s = float(np.sum(np.log(2.0 * scales_s) + np.abs(resid_s) / scales_s)) / ns
    dmu_s = alpha * (-np.sign(resid_s) / scales_s) / ns
    draw_s = alpha * ((1.0 / scales_s - np.abs(resid_s) / scales_s ** 2) * _sigmoid(raw_s)) / ns
    loss = alpha * nll_s

    dmu_f = draw_f = acts_f = None
    if have_f:
        obs_f = np.asarray(batch_f[0], dtype=float)
        means_f, scales_f, raw_f, acts_f = _forward_batch(params, obs_f)
        targets_f = np.asarray(batch_f[1], dtype=float).reshape(nf, -1)
        resid_f = targets_f - means_f
        nll_f = float(np.sum(np.log(2.0 * scales_f) + np.abs(resid_f) / scales_f)) / nf
        loss -= (1.0 - alpha) * nll_f
        dmu_f = -(1.0 - alpha) * (-np.sign(resid_f) / scales_f) / nf
        draw_f = -(1.0 - alpha) * ((1.0 / scales_f - np.abs(resid_f) / scales_f ** 2) * _sigmoid(raw_f)) / nf

    if beta > 0:
        kl_s, kmu_s, kraw_s, _ = _kl_batch_and_douts(params, ref_params, obs_s)
        total_kl = float(np.sum(kl_s))
        dmu_s += beta * kmu_s / n_states
        draw_s += beta * kraw_s / n_states
        if have_f:
            kl_f, kmu_f, kraw_f, _ = _kl_batch_and_douts(params, ref_params, obs_f)
            total_kl += float(np.sum(kl_f))
            dmu_f += beta * kmu_f / n_states
            draw_f += beta * kraw_f / n_states
        loss += beta * total_kl / n_states

    grads = mlp.backward(params.layers, acts_s, np.concatenate([dmu_s, draw_s], axis=1))
    if have_f:
        grads_f = mlp.backward(params.layers, acts_f, np.concatenate([dmu_f, draw_f], axis=1))
        grads = mlp.add_grads(grads, grads_f)
    return loss, grads


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    steps: int
    seed: int
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _run_adam(params: PolicyParams, schedule: TrainSchedule,
              step_fn: Callable[[PolicyParams, np.random.Generator], tuple[float, list[mlp.Layer]]]
              ) -> tuple[PolicyParams, list[float]]:
    params = params.copy()
    rng = np.random.default_rng(derive_seed(schedule.seed))
    opt = mlp.AdamOptimizer(params.layers, lr=schedule.lr, beta1=schedule.beta1,
                            beta2=schedule.beta2, eps=schedule.eps)
    losses: list[float] = []
    for step in range(schedule.steps):
        loss, grads = step_fn(params, rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        params.layers = opt.step(params.layers, grads)
        losses.append(loss)
    return params, losses


def train_bc(params: PolicyParams, obs: np.ndarray, chunks: np.ndarray,
             schedule: TrainSchedule) -> tuple[PolicyParams, list[float]]:
    """Adam on the BC loss over uniformly sampled minibatches."""
    obs = np.asarray(obs, dtype=float)
    chunks = np.asarray(chunks, dtype=float)
    if len(obs) == 0:
        raise ValueError("empty training set")

    def step_fn(p: PolicyParams, rng: np.random.Generator):
        idx = rng.integers(0, len(obs), size=schedule.batch_size)
        return bc_loss_and_grad(p, obs[idx], chunks[idx])

    return _run_adam(params, schedule, step_fn)


def train_pmpo(params: PolicyParams, ref_params: PolicyParams,
               obs_s: np.ndarray, chunks_s: np.ndarray,
               obs_f: np.ndarray, chunks_f: np.ndarray,
               alpha: float, beta: float,
               schedule: TrainSchedule) -> tuple[PolicyParams, list[float]]:
    """Adam on the preference loss; the reference stays frozen.

    With an empty rejected set the minibatch stream is identical to train_bc
    at the same seed, so alpha=1, beta=0 reduces exactly to BC.
    """
    obs_s = np.asarray(obs_s, dtype=float)
    chunks_s = np.asarray(chunks_s, dtype=float)
    obs_f = np.asarray(obs_f, dtype=float)
    chunks_f = np.asarray(chunks_f, dtype=float)
    if len(obs_s) == 0:
        raise ValueError("empty accepted set")
    ref = ref_params.copy()

    def step_fn(p: PolicyParams, rng: np.random.Generator):
        idx_s = rng.integers(0, len(obs_s), size=schedule.batch_size)
        batch_f = None
        if len(obs_f) > 0:
            idx_f = rng.integers(0, len(obs_f), size=schedule.batch_size)
            batch_f = (obs_f[idx_f], chunks_f[idx_f])
        return pmpo_loss_and_grad(p, ref, (obs_s[idx_s], chunks_s[idx_s]), batch_f, alpha, beta)

    return _run_adam(params, schedule, step_fn)


# ---------------------------------------------------------------------------
# training-set assembly
# ---------------------------------------------------------------------------

def chunk_at(actions: Sequence[Sequence[float]], t: int, k: int) -> np.ndarray:
    """K consecutive actions from t; short tails repeat the final action."""
    n = len(actions)
    rows = [actions[min(t + j, n - 1)] for j in range(k)]
    return np.asarray(rows, dtype=float)


def make_chunk_dataset(episodes: Sequence[Episode], chunk_len: int) -> tuple[np.ndarray, np.ndarray]:
    """(obs, K-step action chunk) pairs for every step of every episode."""
    xs, ys = [], []
    for ep in episodes:
        actions = [s.action for s in ep.steps]
        for t, step in enumerate(ep.steps):
            xs.append(step.obs)
            ys.append(chunk_at(actions, t, chunk_len))
    if not xs:
        return np.zeros((0, 0)), np.zeros((0, chunk_len, 0))
    return np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)


def filter_small_actions(episode: Episode, threshold: float) -> tuple[list, list]:
    """Drop every step that participates in a small consecutive-action delta
    (l2 below `threshold`); returns the compacted (obs, action) sequences."""
    actions = [np.asarray(s.action, dtype=float) for s in episode.steps]
    drop = [False] * len(actions)
    for i in range(1, len(actions)):
        if float(np.linalg.norm(actions[i] - actions[i - 1])) < threshold:
            drop[i - 1] = True
            drop[i] = True
    obs_seq = [s.obs for s, d in zip(episode.steps, drop) if not d]
    act_seq = [s.action for s, d in zip(episode.steps, drop) if not d]
    return obs_seq, act_seq


def make_filtered_chunk_dataset(episodes: Sequence[Episode], chunk_len: int,
                                threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Chunk pairs assembled from the action-delta-filtered sequences."""
    xs, ys = [], []
    for ep in episodes:
        obs_seq, act_seq = filter_small_actions(ep, threshold)
        for t in range(len(obs_seq)):
            xs.append(obs_seq[t])
            ys.append(chunk_at(act_seq, t, chunk_len))
    if not xs:
        return np.zeros((0, 0)), np.zeros((0, chunk_len, 0))
    return np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)


def compute_obs_norm(obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return obs.mean(axis=0), obs.std(axis=0)


def fit_bc(obs: np.ndarray, chunks: np.ndarray, config: PolicyConfig,
           schedule: TrainSchedule) -> tuple[PolicyParams, list[float]]:
    """Fresh policy: compute obs normalization, init, train."""
    mean, std = compute_obs_norm(obs)
    cfg = replace(config, obs_mean=mean, obs_std=std)
    params = init_policy(cfg, schedule.seed)
    return train_bc(params, obs, chunks, schedule)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_policy(path, params: PolicyParams) -> None:
    cfg = params.config
    doc = {
        "format_version": POLICY_FORMAT_VERSION,
        "config": {
            "obs_dim": cfg.obs_dim,
            "action_dim": cfg.action_dim,
            "chunk_len": cfg.chunk_len,
            "open_loop": cfg.open_loop,
            "hidden_sizes": list(cfg.hidden_sizes),
            "activation": cfg.activation,
            "scale_floor": cfg.scale_floor,
        },
        "obs_norm": {
            "mean": None if cfg.obs_mean is None else [float(v) for v in cfg.obs_mean],
            "std": None if cfg.obs_std is None else [float(v) for v in cfg.obs_std],
        },
        "init_seed": params.init_seed,
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in params.layers],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_policy(path) -> PolicyParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"policy file parse error: {exc}") from exc
    try:
        version = doc["format_version"]
        if version != POLICY_FORMAT_VERSION:
            raise ValueError(f"unsupported policy format_version {version}")
        c = doc["config"]
        norm = doc["obs_norm"]
        cfg = PolicyConfig(
            obs_dim=int(c["obs_dim"]),
            action_dim=int(c["action_dim"]),
            chunk_len=int(c["chunk_len"]),
            open_loop=int(c["open_loop"]),
            hidden_sizes=tuple(int(h) for h in c["hidden_sizes"]),
            activation=str(c["activation"]),
            scale_floor=float(c["scale_floor"]),
            obs_mean=None if norm["mean"] is None else np.asarray(norm["mean"], dtype=float),
            obs_std=None if norm["std"] is None else np.asarray(norm["std"], dtype=float),
        )
        layers = [(np.asarray(l["w"], dtype=float), np.asarray(l["b"], dtype=float))
                  for l in doc["layers"]]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"policy file missing field: {exc}") from exc
    expected = _layer_sizes(cfg)
    shapes = [w.shape for w, _ in layers]
    if shapes != [(a, b) for a, b in zip(expected[:-1], expected[1:])]:
        raise ValueError("policy layer shapes do not match config")
    return PolicyParams(config=cfg, layers=layers, init_seed=int(doc.get("init_seed", 0)))
