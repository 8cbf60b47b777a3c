"""Evaluation statistics: Wilson success-rate intervals, the fraction of
failures that contain a stall segment, and sampled-action variance at stall
versus non-stall states."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from .core import Episode, IdleConfig
from .idle import detect_idle_segments, idle_step_indices
from .policy import PolicyParams, predict_chunk
from .util import derive_seed

EVAL_CSV_FIELDS = ["arm", "n_trials", "n_success", "rate", "ci_lo", "ci_hi",
                   "idle_failure_fraction", "mean_perturbations"]
VARIANCE_CSV_FIELDS = ["arm", "var_idle", "var_nonidle", "n_idle_states", "n_nonidle_states"]


@dataclass(frozen=True)
class EvalReport:
    n_trials: int
    n_success: int
    rate: float
    ci_lo: float
    ci_hi: float
    idle_failure_fraction: float
    mean_perturbations_per_episode: float


@dataclass(frozen=True)
class VarianceReport:
    var_idle: float | None
    var_nonidle: float | None
    n_idle_states: int
    n_nonidle_states: int


def success_rate_ci(n_success: int, n_trials: int,
                    level: float = 0.90) -> tuple[float, float, float]:
    """Wilson score interval; well behaved at rates of 0 and 1."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if not (0 <= n_success <= n_trials):
        raise ValueError("n_success must be in [0, n_trials]")
    z = float(ndtri((1.0 + level) / 2.0))
    p = n_success / n_trials
    denom = 1.0 + z * z / n_trials
    center = (p + z * z / (2 * n_trials)) / denom
    margin = (z / denom) * np.sqrt(p * (1 - p) / n_trials + z * z / (4 * n_trials ** 2))
    return p, max(0.0, center - margin), min(1.0, center + margin)


def idle_failure_fraction(episodes: Sequence[Episode],
                          idle_config: IdleConfig) -> tuple[float, int]:
    """Among failed episodes, the fraction containing at least one stall
    segment; returns (fraction, failure count). No failures gives (0, 0)."""
    failures = [e for e in episodes if not e.success]
    if not failures:
        return 0.0, 0
    with_idle = sum(1 for e in failures if detect_idle_segments(e.positions(), idle_config))
    return with_idle / len(failures), len(failures)


def perturbation_runs(episode: Episode) -> int:
    """Number of maximal runs of perturbed steps (one run per trigger)."""
    runs = 0
    prev = False
    for s in episode.steps:
        if s.perturbed and not prev:
            runs += 1
        prev = s.perturbed
    return runs


def action_variance_report(params: PolicyParams, episodes: Sequence[Episode],
                           idle_config: IdleConfig, n_samples: int = 16,
                           seed: int = 0) -> VarianceReport:
    """Per state: sample n_samples chunks, take the population variance of the
    first action across samples per dimension, average over dimensions. Means
    are reported separately over stall-interior states and all other states.
    """
    rng = np.random.default_rng(derive_seed(seed))
    idle_vals: list[float] = []
    non_vals: list[float] = []
    for ep in episodes:
        segments = detect_idle_segments(ep.positions(), idle_config)
        inside = idle_step_indices(segments, len(ep.steps), stride=idle_config.stride)
        for t, step in enumerate(ep.steps):
            dist = predict_chunk(params, np.asarray(step.obs))
            mu, b = dist.means[0], dist.scales[0]
            u = rng.random((n_samples, mu.shape[0])) - 0.5
            draws = mu - b * np.sign(u) * np.log(np.maximum(1.0 - 2.0 * np.abs(u), 1e-300))
            v = float(np.mean(np.var(draws, axis=0)))
            (idle_vals if t in inside else non_vals).append(v)
    return VarianceReport(
        var_idle=float(np.mean(idle_vals)) if idle_vals else None,
        var_nonidle=float(np.mean(non_vals)) if non_vals else None,
        n_idle_states=len(idle_vals),
        n_nonidle_states=len(non_vals),
    )


def build_eval_report(episodes: Sequence[Episode], idle_config: IdleConfig,
                      level: float = 0.90) -> EvalReport:
    n = len(episodes)
    n_success = sum(1 for e in episodes if e.success)
    rate, lo, hi = success_rate_ci(n_success, n, level)
    frac, _ = idle_failure_fraction(episodes, idle_config)
    mean_pert = float(np.mean([perturbation_runs(e) for e in episodes])) if n else 0.0
    return EvalReport(n_trials=n, n_success=n_success, rate=rate, ci_lo=lo, ci_hi=hi,
                      idle_failure_fraction=frac, mean_perturbations_per_episode=mean_pert)


def eval_report_row(arm: str, report: EvalReport) -> dict:
    return {
        "arm": arm,
        "n_trials": report.n_trials,
        "n_success": report.n_success,
        "rate": report.rate,
        "ci_lo": report.ci_lo,
        "ci_hi": report.ci_hi,
        "idle_failure_fraction": report.idle_failure_fraction,
        "mean_perturbations": report.mean_perturbations_per_episode,
    }


def variance_report_row(arm: str, report: VarianceReport) -> dict:
    return {
        "arm": arm,
        "var_idle": "" if report.var_idle is None else report.var_idle,
        "var_nonidle": "" if report.var_nonidle is None else report.var_nonidle,
        "n_idle_states": report.n_idle_states,
        "n_nonidle_states": report.n_nonidle_states,
    }


def emit_report(path, rows: Sequence[Mapping], fieldnames: Sequence[str] | None = None) -> int:
    """CSV with one row per record; the header comes from `fieldnames` or the
    first row's keys. Returns the number of data rows written."""
    if fieldnames is None:
        if not rows:
            raise ValueError("fieldnames required when rows is empty")
        fieldnames = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return len(rows)
