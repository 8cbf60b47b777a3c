import math

import pytest

from unidle.core import (Dataset, Episode, IdleConfig, Step, episode_from_dict,
                         episode_to_dict, read_episodes, validate_episode,
                         write_episodes)

DIMS = (3, 2)


def make_episode(eid="ep-0", n_steps=3, success=True):
    steps = []
    for t in range(n_steps):
        x = 0.1 + 0.05 * t
        steps.append(Step(t=t, obs=(x, 0.1, 0.5), joints=(x, 0.1), action=(x + 0.05, 0.1)))
    return Episode(episode_id=eid, env_name="narrow_gate_v1", seed=42,
                   steps=tuple(steps), final_joints=(0.3, 0.1), success=success)


def test_validate_ok():
    assert validate_episode(make_episode(), DIMS) is None


def test_validate_nonconsecutive_indices():
    ep = make_episode()
    steps = list(ep.steps)
    steps[1] = Step(t=2, obs=steps[1].obs, joints=steps[1].joints, action=steps[1].action)
    bad = Episode(ep.episode_id, ep.env_name, ep.seed, tuple(steps), ep.final_joints, ep.success)
    problem = validate_episode(bad, DIMS)
    assert problem is not None and "non-consecutive" in problem


def test_validate_nonfinite():
    ep = make_episode()
    steps = list(ep.steps)
    steps[2] = Step(t=2, obs=steps[2].obs, joints=steps[2].joints, action=(math.nan, 0.1))
    bad = Episode(ep.episode_id, ep.env_name, ep.seed, tuple(steps), ep.final_joints, ep.success)
    problem = validate_episode(bad, DIMS)
    assert problem is not None and "non-finite" in problem


def test_validate_dim_mismatch():
    ep = make_episode()
    assert validate_episode(ep, (4, 2)) is not None


def test_write_read_round_trip(tmp_path):
    episodes = [make_episode(f"ep-{i}", n_steps=4 + i, success=i % 2 == 0) for i in range(5)]
    path = tmp_path / "eps.jsonl"
    assert write_episodes(path, episodes, env_dims=DIMS) == 5
    assert len(path.read_text().strip().splitlines()) == 5
    back = read_episodes(path, env_dims=DIMS)
    assert back == episodes


def test_write_empty(tmp_path):
    path = tmp_path / "empty.jsonl"
    assert write_episodes(path, []) == 0
    assert path.read_text() == ""
    assert read_episodes(path) == []


def test_numeric_fidelity(tmp_path):
    # awkward doubles survive the decimal text encoding exactly
    v = 0.1 + 0.2 + 1e-17
    ep = Episode("ep-x", "narrow_gate_v1", 1,
                 (Step(0, (v, 1 / 3, math.pi / 7), (v, 1 / 3), (2 / 3, v)),),
                 (v, v), True)
    path = tmp_path / "one.jsonl"
    write_episodes(path, [ep])
    back = read_episodes(path)[0]
    assert back.steps[0].obs == ep.steps[0].obs
    assert back.final_joints == ep.final_joints


def test_truncated_line_reports_lineno(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = episode_to_dict(make_episode())
    import json
    path.write_text(json.dumps(good) + "\n" + json.dumps(good)[: 40] + "\n")
    with pytest.raises(ValueError, match="line 2"):
        read_episodes(path)


def test_write_rejects_invalid_episode(tmp_path):
    ep = make_episode("ep-bad")
    steps = list(ep.steps)
    steps[0] = Step(t=0, obs=(0.1,), joints=steps[0].joints, action=steps[0].action)
    bad = Episode(ep.episode_id, ep.env_name, ep.seed, tuple(steps), ep.final_joints, ep.success)
    with pytest.raises(ValueError, match="ep-bad"):
        write_episodes(tmp_path / "x.jsonl", [bad], env_dims=DIMS)


def test_dataset_unique_ids():
    with pytest.raises(ValueError):
        Dataset([make_episode("a"), make_episode("a")])


def test_episode_dict_round_trip():
    ep = make_episode()
    assert episode_from_dict(episode_to_dict(ep)) == ep


def test_positions_length():
    ep = make_episode(n_steps=7)
    assert len(ep.positions()) == 8


def test_idle_config_validation():
    with pytest.raises(ValueError):
        IdleConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        IdleConfig(t_min=0)
    with pytest.raises(ValueError):
        IdleConfig(stride=0)
    IdleConfig(epsilon=0.0)  # degenerate "nothing is idle" allowed
