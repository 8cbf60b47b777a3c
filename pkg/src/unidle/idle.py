"""Stall detection over position sequences, offline and streaming.

A transition i connects position i to position i+1; it is "low motion" when
the l2 norm of the position change is strictly below epsilon. A stall segment
is a maximal run of consecutive low-motion transitions longer than t_min.
The streaming detector reproduces the offline segmentation exactly: with
cooldown 0 it fires at transition start + t_min of each segment and then
every t_min + 1 low transitions while the segment lasts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Dataset, Episode, IdleConfig
from .policy import chunk_at


@dataclass(frozen=True)
class IdleSegment:
    start: int  # first low-motion transition
    end: int    # one past the last low-motion transition


@dataclass
class DetectorState:
    run_length: int = 0
    last_position: tuple[float, ...] | None = None
    cooldown_remaining: int = 0


@dataclass
class PreferenceDataset:
    accepted_obs: np.ndarray
    accepted_chunks: np.ndarray
    rejected_obs: np.ndarray
    rejected_chunks: np.ndarray
    accepted_keys: list[tuple[str, int]] = field(default_factory=list)
    rejected_keys: list[tuple[str, int]] = field(default_factory=list)


def _deltas(positions: Sequence[Sequence[float]]) -> list[float]:
    out = []
    for a, b in zip(positions[:-1], positions[1:]):
        out.append(math.sqrt(sum((y - x) ** 2 for x, y in zip(a, b))))
    return out


def detect_idle_segments(positions: Sequence[Sequence[float]],
                         config: IdleConfig) -> list[IdleSegment]:
    """All maximal runs of consecutive sub-epsilon transitions with length
    strictly greater than t_min, in increasing order.

    With stride > 1 the runs are over the downsampled position sequence and
    segment indices count strided transitions (transition i spans control
    steps [i*stride, (i+1)*stride)).
    """
    if config.stride > 1:
        positions = positions[:: config.stride]
    if len(positions) < 2:
        return []
    deltas = _deltas(positions)
    segments = []
    run_start = None
    for i, d in enumerate(deltas):
        if d < config.epsilon:
            if run_start is None:
                run_start = i
        else:
            if run_start is not None and i - run_start > config.t_min:
                segments.append(IdleSegment(run_start, i))
            run_start = None
    if run_start is not None and len(deltas) - run_start > config.t_min:
        segments.append(IdleSegment(run_start, len(deltas)))
    return segments


def streaming_update(state: DetectorState, new_position: Sequence[float],
                     config: IdleConfig, cooldown: int = 0) -> tuple[DetectorState, bool]:
    """Feed one position; returns (new state, triggered).

    Fires exactly when the low-motion run first exceeds t_min while the
    cooldown is expired; firing resets the run and re-arms after `cooldown`
    further positions.
    """
    pos = tuple(float(v) for v in new_position)
    if state.last_position is None:
        return DetectorState(0, pos, state.cooldown_remaining), False
    d = math.sqrt(sum((y - x) ** 2 for x, y in zip(state.last_position, pos)))
    run = state.run_length + 1 if d < config.epsilon else 0
    cd = state.cooldown_remaining - 1 if state.cooldown_remaining > 0 else 0
    triggered = run > config.t_min and cd == 0
    if triggered:
        run = 0
        cd = cooldown
    return DetectorState(run, pos, cd), triggered


def triggers_from_segments(segments: Sequence[IdleSegment], t_min: int) -> list[int]:
    """Transition indices where a cooldown-0 streaming detector fires."""
    points = []
    for seg in segments:
        t = seg.start + t_min
        while t < seg.end:
            points.append(t)
            t += t_min + 1
    return points


def idle_step_indices(segments: Sequence[IdleSegment], n_steps: int,
                      stride: int = 1) -> set[int]:
    """Step indices strictly inside a segment; boundary states stay non-idle."""
    inside: set[int] = set()
    for seg in segments:
        for t in range(seg.start * stride + 1, min(seg.end * stride, n_steps)):
            inside.add(t)
    return inside


def label_preferences(episodes: Dataset | Sequence[Episode], idle_config: IdleConfig,
                      window: int | None = None, chunk_len: int = 10,
                      include_segment_interior: bool = False) -> PreferenceDataset:
    """Accepted pairs from every successful episode; rejected pairs from the
    `window` transitions that lead into each stall segment of failed episodes.

    Failed episodes without stall segments contribute nothing. The optional
    interior flag also rejects the transitions inside each segment.
    """
    eps = episodes.episodes if isinstance(episodes, Dataset) else list(episodes)
    if window is None:
        window = idle_config.t_min
    acc_obs, acc_chunks, acc_keys = [], [], []
    rej_obs, rej_chunks, rej_keys = [], [], []
    for ep in eps:
        actions = [s.action for s in ep.steps]
        if ep.success:
            for t, step in enumerate(ep.steps):
                acc_obs.append(step.obs)
                acc_chunks.append(chunk_at(actions, t, chunk_len))
                acc_keys.append((ep.episode_id, t))
            continue
        segments = detect_idle_segments(ep.positions(), idle_config)
        stride = idle_config.stride
        picked: set[int] = set()
        for seg in segments:
            picked.update(range(max(0, (seg.start - window) * stride), seg.start * stride))
            if include_segment_interior:
                picked.update(range(seg.start * stride, min(seg.end * stride, len(ep.steps))))
        for t in sorted(picked):
            rej_obs.append(ep.steps[t].obs)
            rej_chunks.append(chunk_at(actions, t, chunk_len))
            rej_keys.append((ep.episode_id, t))

    def _stack(rows, chunks):
        if not rows:
            return np.zeros((0, 0)), np.zeros((0, chunk_len, 0))
        return np.asarray(rows, dtype=float), np.asarray(chunks, dtype=float)

    a_obs, a_chunks = _stack(acc_obs, acc_chunks)
    r_obs, r_chunks = _stack(rej_obs, rej_chunks)
    return PreferenceDataset(a_obs, a_chunks, r_obs, r_chunks, acc_keys, rej_keys)


def write_labels(path, episodes: Sequence[Episode], idle_config: IdleConfig,
                 window: int | None = None) -> int:
    """Label artifact: one JSON record per episode with segments and rejected keys."""
    if window is None:
        window = idle_config.t_min
    count = 0
    stride = idle_config.stride
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            segments = detect_idle_segments(ep.positions(), idle_config)
            d_f_keys: list[int] = []
            if not ep.success:
                picked: set[int] = set()
                for seg in segments:
                    picked.update(range(max(0, (seg.start - window) * stride), seg.start * stride))
                d_f_keys = sorted(picked)
            # segments recorded in control-step transition units
            record = {
                "episode_id": ep.episode_id,
                "segments": [[s.start * stride, s.end * stride] for s in segments],
                "d_f_keys": d_f_keys,
            }
            fh.write(json.dumps(record, separators=(",", ":")))
            fh.write("\n")
            count += 1
    return count
