import json

import pytest

from unidle.cli import main


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small end-to-end artifact chain shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    demos = root / "demos.jsonl"
    policy = root / "policy.json"
    rollouts = root / "rollouts.jsonl"
    assert run(["gen-demos", "--n", 12, "--seed", 3, "--out", demos]) == 0
    assert run(["train", "--demos", demos, "--train-steps", 400, "--seed", 1,
                "--out", policy]) == 0
    assert run(["rollout", "--policy", policy, "--n", 6, "--perturb", "pip",
                "--seed", 5, "--out", rollouts]) == 0
    return root, demos, policy, rollouts


def test_gen_demos_writes_n_lines(pipeline):
    _, demos, _, _ = pipeline
    assert len(demos.read_text().strip().splitlines()) == 12
    manifest = json.loads((demos.parent / "demos.jsonl.manifest.json").read_text())
    assert str(demos) in manifest["artifacts"]


def test_train_outputs(pipeline):
    root, _, policy, _ = pipeline
    doc = json.loads(policy.read_text())
    assert doc["format_version"] == 1
    loss_csv = root / "policy.json.loss.csv"
    lines = loss_csv.read_text().strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 401
    first, last = float(lines[1].split(",")[1]), float(lines[-1].split(",")[1])
    assert last < first


def test_rollout_outputs_and_summary(pipeline, capsys):
    root, _, policy, rollouts = pipeline
    assert len(rollouts.read_text().strip().splitlines()) == 6


def test_rollout_unknown_mode_exits_2(pipeline, capsys):
    _, _, policy, _ = pipeline
    with pytest.raises(SystemExit) as exc:
        run(["rollout", "--policy", policy, "--n", 2, "--perturb", "pipp",
             "--seed", 1, "--out", "/tmp/x.jsonl"])
    assert exc.value.code == 2


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        run(["gen-demos", "--n", 3, "--seed", 1])  # no --out
    assert exc.value.code == 2


def test_unwritable_path_exits_1(pipeline):
    assert run(["gen-demos", "--n", 2, "--seed", 1,
                "--out", "/nonexistent-dir/demos.jsonl"]) == 1


def test_label_command(pipeline):
    root, _, _, rollouts = pipeline
    labels = root / "labels.jsonl"
    assert run(["label", "--rollouts", rollouts, "--out", labels]) == 0
    records = [json.loads(l) for l in labels.read_text().splitlines()]
    assert len(records) == 6
    assert all({"episode_id", "segments", "d_f_keys"} <= set(r) for r in records)


def test_label_epsilon_zero_no_segments(pipeline):
    root, _, _, rollouts = pipeline
    labels = root / "labels0.jsonl"
    assert run(["label", "--rollouts", rollouts, "--idle-epsilon", 0, "--out", labels]) == 0
    records = [json.loads(l) for l in labels.read_text().splitlines()]
    assert all(r["segments"] == [] for r in records)


def test_improve_command_and_alpha_validation(pipeline):
    root, demos, policy, rollouts = pipeline
    out = root / "improved.json"
    assert run(["improve", "--policy", policy, "--demos", demos,
                "--rollouts", rollouts, "--mode", "pmpo", "--steps", 50,
                "--seed", 2, "--out", out]) == 0
    manifest = json.loads((root / "improved.json.manifest.json").read_text())
    assert manifest["alpha"] == 0.9 and manifest["beta"] == 0.3
    assert run(["improve", "--policy", policy, "--demos", demos,
                "--rollouts", rollouts, "--alpha", 1.5, "--steps", 5,
                "--seed", 2, "--out", out]) == 2


def test_train_with_failed_rollouts_matches_demos_only(pipeline, tmp_path):
    # rollout files contributing zero successes leave the training set unchanged
    root, demos, _, _ = pipeline
    from unidle.core import read_episodes, write_episodes, Episode

    eps = read_episodes(demos)
    failed = [Episode(f"fail-{i}", e.env_name, e.seed, e.steps, e.final_joints, False)
              for i, e in enumerate(eps[:3])]
    failed_path = tmp_path / "failed.jsonl"
    write_episodes(failed_path, failed)
    p1, p2 = tmp_path / "p1.json", tmp_path / "p2.json"
    assert run(["train", "--demos", demos, "--train-steps", 80, "--seed", 4,
                "--out", p1]) == 0
    assert run(["train", "--demos", demos, "--rollouts", failed_path,
                "--train-steps", 80, "--seed", 4, "--out", p2]) == 0
    assert p1.read_bytes() == p2.read_bytes()


def test_eval_command(pipeline):
    root, _, policy, _ = pipeline
    report = root / "eval.csv"
    assert run(["eval", "--policy", policy, "--n", 6, "--perturb", "none",
                "--seed", 9, "--report", report]) == 0
    lines = report.read_text().strip().splitlines()
    assert lines[0] == "arm,n_trials,n_success,rate,ci_lo,ci_hi,idle_failure_fraction,mean_perturbations"
    row = lines[1].split(",")
    assert row[0] == "none" and int(row[1]) == 6
    assert float(row[4]) <= float(row[3]) <= float(row[5])


def test_analyze_command(pipeline):
    root, _, policy, rollouts = pipeline
    report_dir = root / "analysis"
    assert run(["analyze", "--rollouts", rollouts, "--policy", policy,
                "--variance", "--report", report_dir]) == 0
    assert (report_dir / "idle_failures.csv").exists()
    var_lines = (report_dir / "variance.csv").read_text().strip().splitlines()
    assert var_lines[0] == "arm,var_idle,var_nonidle,n_idle_states,n_nonidle_states"


def test_analyze_variance_requires_policy(pipeline):
    root, _, _, rollouts = pipeline
    assert run(["analyze", "--rollouts", rollouts, "--variance",
                "--report", root / "a2"]) == 2


def test_flywheel_command_and_malformed_config(pipeline, tmp_path):
    root, demos, policy, _ = pipeline
    config = tmp_path / "fly.json"
    config.write_text(json.dumps({
        "init_policy": str(policy),
        "demos": str(demos),
        "round": {"rounds": 1, "rollouts_per_round": 3, "eval_episodes": 3,
                  "finetune_steps": 10},
    }))
    out_dir = tmp_path / "fly"
    assert run(["flywheel", "--config", config, "--seed", 4, "--out-dir", out_dir]) == 0
    assert (out_dir / "round_1" / "rollouts.jsonl").exists()
    assert (out_dir / "flywheel_metrics.csv").exists()
    rows = (out_dir / "flywheel_metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 3  # header + round 0 + round 1

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"round": {"rounds": 0}}))
    assert run(["flywheel", "--config", bad, "--seed", 4, "--out-dir", tmp_path / "f2"]) == 2

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"round": {"roundz": 1}}))
    assert run(["flywheel", "--config", unknown, "--seed", 4, "--out-dir", tmp_path / "f3"]) == 2


def test_print_default_config(capsys):
    assert main(["--print-default-config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["config_version"] == 1
    assert doc["pip"]["sigma"] == 0.6
    assert doc["round"]["alpha"] == 0.9 and doc["round"]["beta"] == 0.3


def test_no_command_exits_2(capsys):
    assert main([]) == 2


def test_determinism_byte_identical(tmp_path):
    for sub in ("a", "b"):
        d = tmp_path / sub
        d.mkdir()
        assert run(["gen-demos", "--n", 5, "--seed", 11, "--out", d / "demos.jsonl"]) == 0
        assert run(["train", "--demos", d / "demos.jsonl", "--train-steps", 60,
                    "--seed", 2, "--out", d / "p.json"]) == 0
        assert run(["rollout", "--policy", d / "p.json", "--n", 4, "--perturb", "noise",
                    "--seed", 3, "--out", d / "r.jsonl"]) == 0
    for name in ("demos.jsonl", "p.json", "r.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
