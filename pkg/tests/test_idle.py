import numpy as np
import pytest

from unidle.core import Dataset, Episode, IdleConfig, Step
from unidle.idle import (DetectorState, IdleSegment, detect_idle_segments,
                         idle_step_indices, label_preferences, streaming_update,
                         triggers_from_segments, write_labels)


def positions_from_deltas(deltas):
    """1-D positions realizing the given per-transition motion magnitudes."""
    pos = [0.0]
    for d in deltas:
        pos.append(pos[-1] + d)
    return [(p, 0.0) for p in pos]


def brute_force_segments(deltas, eps, t_min):
    """Sliding-window oracle: maximal runs of sub-eps transitions longer than t_min."""
    low = [d < eps for d in deltas]
    segments = []
    i = 0
    while i < len(low):
        if low[i]:
            j = i
            while j < len(low) and low[j]:
                j += 1
            if j - i > t_min:
                segments.append((i, j))
            i = j
        else:
            i += 1
    return segments


def test_twelve_identical_positions():
    cfg = IdleConfig(0.06, 8)
    segs = detect_idle_segments([(0.5, 0.5)] * 12, cfg)
    assert segs == [IdleSegment(0, 11)]


def test_advancing_positions_no_segments():
    cfg = IdleConfig(0.06, 8)
    pos = positions_from_deltas([0.1] * 20)
    assert detect_idle_segments(pos, cfg) == []


def test_delta_pattern_example():
    deltas = [0.1, 0.1, 0.1] + [0.0] * 9 + [0.1, 0.1]
    cfg = IdleConfig(0.06, 8)
    segs = detect_idle_segments(positions_from_deltas(deltas), cfg)
    assert segs == [IdleSegment(3, 12)]
    assert [(s.start, s.end) for s in segs] == brute_force_segments(deltas, 0.06, 8)


def test_short_inputs():
    cfg = IdleConfig(0.06, 8)
    assert detect_idle_segments([], cfg) == []
    assert detect_idle_segments([(0.0, 0.0)], cfg) == []


def test_segments_match_brute_force_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 80))
        deltas = rng.choice([0.0, 0.02, 0.05, 0.1], size=n,
                            p=[0.4, 0.2, 0.2, 0.2]).tolist()
        eps = float(rng.choice([0.01, 0.03, 0.06]))
        t_min = int(rng.integers(1, 9))
        cfg = IdleConfig(eps, t_min)
        got = [(s.start, s.end) for s in detect_idle_segments(positions_from_deltas(deltas), cfg)]
        assert got == brute_force_segments(deltas, eps, t_min)


def test_segment_maximality_and_disjointness():
    rng = np.random.default_rng(1)
    for _ in range(100):
        deltas = rng.choice([0.0, 0.1], size=60).tolist()
        cfg = IdleConfig(0.06, 3)
        segs = detect_idle_segments(positions_from_deltas(deltas), cfg)
        for a, b in zip(segs[:-1], segs[1:]):
            assert a.end < b.start  # disjoint with a gap
        for s in segs:
            assert all(d < cfg.epsilon for d in deltas[s.start:s.end])
            if s.start > 0:
                assert deltas[s.start - 1] >= cfg.epsilon
            if s.end < len(deltas):
                assert deltas[s.end] >= cfg.epsilon


def test_epsilon_monotonicity():
    rng = np.random.default_rng(2)
    for _ in range(50):
        deltas = rng.uniform(0, 0.1, size=100).tolist()
        total = []
        for eps in (0.02, 0.05, 0.08):
            segs = detect_idle_segments(positions_from_deltas(deltas), IdleConfig(eps, 4))
            total.append(sum(s.end - s.start for s in segs))
        assert total[0] <= total[1] <= total[2]


def test_tmin_monotonicity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        deltas = rng.choice([0.0, 0.1], size=80).tolist()
        pos = positions_from_deltas(deltas)
        sets = []
        for t_min in (3, 4, 5):
            segs = detect_idle_segments(pos, IdleConfig(0.06, t_min))
            sets.append({(s.start, s.end) for s in segs})
        assert sets[2] <= sets[1] <= sets[0]


def test_stride_downsamples():
    # stride 2 transitions connect every other position
    pos = [(0.0, 0.0), (0.1, 0.0)] * 10  # oscillates: stride-2 deltas are zero
    cfg1 = IdleConfig(0.05, 3, stride=1)
    cfg2 = IdleConfig(0.05, 3, stride=2)
    assert detect_idle_segments(pos, cfg1) == []
    segs = detect_idle_segments(pos, cfg2)
    assert len(segs) == 1 and segs[0].start == 0


# ---------------------------------------------------------------------------
# streaming detector
# ---------------------------------------------------------------------------

def run_streaming(positions, cfg, cooldown=0):
    state = DetectorState()
    triggers = []
    for i, p in enumerate(positions):
        state, fired = streaming_update(state, p, cfg, cooldown)
        if fired:
            triggers.append(i - 1)  # transition index
    return triggers


def test_streaming_triggers_once_on_identical_positions():
    cfg = IdleConfig(0.06, 8)
    triggers = run_streaming([(0.5, 0.5)] * 12, cfg)
    assert triggers == [8]  # fires processing the (t_min+1)-th zero delta


def test_streaming_never_triggers_on_motion():
    cfg = IdleConfig(0.06, 8)
    assert run_streaming(positions_from_deltas([0.1] * 30), cfg) == []


def test_streaming_offline_equivalence_random():
    rng = np.random.default_rng(4)
    for _ in range(300):
        n = int(rng.integers(10, 120))
        deltas = rng.choice([0.0, 0.004, 0.05, 0.2], size=n,
                            p=[0.35, 0.25, 0.2, 0.2]).tolist()
        eps = float(rng.choice([0.01, 0.06]))
        t_min = int(rng.integers(1, 10))
        cfg = IdleConfig(eps, t_min)
        pos = positions_from_deltas(deltas)
        expected = triggers_from_segments(detect_idle_segments(pos, cfg), t_min)
        assert run_streaming(pos, cfg) == expected


def test_streaming_cooldown_blocks():
    cfg = IdleConfig(0.06, 2)
    pos = [(0.0, 0.0)] * 30
    no_cd = run_streaming(pos, cfg, cooldown=0)
    with_cd = run_streaming(pos, cfg, cooldown=10)
    assert len(with_cd) < len(no_cd)
    assert with_cd[0] == no_cd[0]  # first trigger unaffected


# ---------------------------------------------------------------------------
# preference labeling
# ---------------------------------------------------------------------------

def make_episode(eid, deltas, success, gate=0.5):
    pos = positions_from_deltas(deltas)
    steps = []
    for t in range(len(deltas)):
        x, y = pos[t]
        steps.append(Step(t=t, obs=(x, y, gate), joints=(x, y), action=pos[t + 1]))
    return Episode(eid, "narrow_gate_v1", 0, tuple(steps), pos[-1], success)


def test_label_success_only():
    ep = make_episode("s", [0.1] * 10, success=True)
    prefs = label_preferences([ep], IdleConfig(0.06, 8), chunk_len=4)
    assert len(prefs.accepted_obs) == 10
    assert len(prefs.rejected_obs) == 0


def test_label_failure_window():
    deltas = [0.1] * 20 + [0.0] * 12 + [0.1] * 3
    ep = make_episode("f", deltas, success=False)
    prefs = label_preferences([ep], IdleConfig(0.06, 8), window=8, chunk_len=4)
    assert len(prefs.accepted_obs) == 0
    assert [t for _, t in prefs.rejected_keys] == list(range(12, 20))


def test_label_failure_without_segments_contributes_nothing():
    ep = make_episode("f2", [0.1] * 25, success=False)
    prefs = label_preferences([ep], IdleConfig(0.06, 8), chunk_len=4)
    assert len(prefs.accepted_obs) == 0
    assert len(prefs.rejected_obs) == 0


def test_label_window_clipped_at_zero():
    deltas = [0.0] * 12 + [0.1] * 4
    ep = make_episode("f3", deltas, success=False)
    prefs = label_preferences([ep], IdleConfig(0.06, 8), window=8, chunk_len=4)
    assert [t for _, t in prefs.rejected_keys] == []  # segment starts at 0


def test_label_interior_flag():
    deltas = [0.1] * 10 + [0.0] * 12 + [0.1] * 3
    ep = make_episode("f4", deltas, success=False)
    base = label_preferences([ep], IdleConfig(0.06, 8), window=4, chunk_len=4)
    full = label_preferences([ep], IdleConfig(0.06, 8), window=4, chunk_len=4,
                             include_segment_interior=True)
    assert len(full.rejected_obs) > len(base.rejected_obs)
    assert set(t for _, t in base.rejected_keys) == set(range(6, 10))
    assert set(t for _, t in full.rejected_keys) == set(range(6, 22))


def test_label_disjoint_sets_and_provenance():
    eps = [make_episode("s1", [0.1] * 15, True),
           make_episode("f1", [0.1] * 5 + [0.0] * 10 + [0.1] * 2, False)]
    data = Dataset(eps, provenance="rollout-round-1")
    prefs = label_preferences(data, IdleConfig(0.06, 8), chunk_len=4)
    acc_ids = {eid for eid, _ in prefs.accepted_keys}
    rej_ids = {eid for eid, _ in prefs.rejected_keys}
    assert acc_ids == {"s1"}
    assert rej_ids == {"f1"}
    assert not (set(prefs.accepted_keys) & set(prefs.rejected_keys))


def test_idle_step_indices_interior_only():
    segs = [IdleSegment(3, 10)]
    inside = idle_step_indices(segs, n_steps=20)
    assert inside == set(range(4, 10))
    inside_strided = idle_step_indices(segs, n_steps=50, stride=2)
    assert inside_strided == set(range(7, 20))


def test_write_labels(tmp_path):
    import json
    eps = [make_episode("a", [0.1] * 12, True),
           make_episode("b", [0.1] * 4 + [0.0] * 10, False)]
    path = tmp_path / "labels.jsonl"
    count = write_labels(path, eps, IdleConfig(0.06, 8), window=4)
    assert count == 2
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert records[0]["episode_id"] == "a"
    assert records[0]["d_f_keys"] == []
    assert records[1]["segments"] == [[4, 14]]
    assert records[1]["d_f_keys"] == [0, 1, 2, 3]
