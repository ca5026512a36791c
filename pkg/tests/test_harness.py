import json
import math

import numpy as np
import pytest
from sklearn.base import clone

from embodied_ipo import cli
from embodied_ipo.env import Difficulty, Split, TaskType, generate_task
from embodied_ipo.estimator import IPOPlanner, check_tasks
from embodied_ipo.exceptions import ReplayDivergence, SignalStarvation
from embodied_ipo.harness import (
    MetricsRow,
    RunConfig,
    evaluate,
    evaluation_tasks,
    first_reaching,
    load_optimizer,
    oracle_baseline,
    read_metrics,
    replay,
    train,
    uniform_baseline,
)
from embodied_ipo.policy import load_params, log_prob
from embodied_ipo.react import read_jsonl, trajectory_from_record

# uniform policy, greedy off, Normal difficulty, 64 Seen tasks, seed 0 (measured)
UNIFORM_NORMAL_BASELINE = 0.0

INI = """
[ipo]
optimizer = adam
beta = 0.001
lr_schedule = linear
batch_tasks = 4
group_size = 3

[env]
difficulty = Easy
seen_pool = 0:200
unseen_pool = 0:200

[schedule]
total_updates = 3
master_seed = 5
eval_every = 2
eval_episodes = 6

[logging]
output_dir = run
checkpoint_every = 2
"""


@pytest.fixture()
def ini(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(INI)
    return path


@pytest.fixture()
def small_run(ini):
    config = RunConfig.from_ini(ini)
    return config, train(config)


def test_config_parsing(ini):
    config = RunConfig.from_ini(ini, {"schedule.master_seed": 9})
    assert config.ipo.optimizer == "adam"
    assert config.ipo.batch_tasks == 4
    assert config.schedule.master_seed == 9
    assert config.env.difficulty is Difficulty.EASY
    assert not set(config.env.seen_pool) & set(config.env.unseen_pool)
    assert all(s % 5 != 4 for s in config.env.seen_pool)
    assert all(s % 5 == 4 for s in config.env.unseen_pool)


def test_config_rejects_unknown_keys(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[ipo]\nlearning_rat = 0.1\n")
    with pytest.raises(ValueError):
        RunConfig.from_ini(bad)
    bad.write_text("[extra]\nx = 1\n")
    with pytest.raises(ValueError):
        RunConfig.from_ini(bad)


def test_shipped_config_loads():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("desk.ini", "desk_normal.ini"):
        config = RunConfig.from_ini(root / name)
        assert config.schedule.total_updates <= 500
        assert config.ipo.group_size == 5 and config.ipo.batch_tasks == 16 and config.ipo.max_steps == 30


def test_train_writes_run_directory(small_run):
    config, result = small_run
    out = config.output_dir
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header.split(",") == MetricsRow.header()
    assert MetricsRow.header()[:10] == [
        "update_index", "mean_reward", "mean_response_length", "mean_total_steps", "mean_invalid_steps",
        "clip_fraction", "kl_term", "eval_seen_rate", "eval_unseen_rate", "generalization_gap",
    ]
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 3
    for row in rows:
        assert row.mean_total_steps >= row.mean_invalid_steps >= 0
    evaluated = [r for r in rows if not math.isnan(r.eval_seen_rate)]
    assert evaluated
    for r in evaluated:
        assert r.generalization_gap == r.eval_unseen_rate - r.eval_seen_rate
    assert {p.name for p in (out / "checkpoints").iterdir()} >= {
        "policy_00000.txt", "policy_00002.txt", "policy_00003.txt", "optimizer_00003.npz"
    }
    assert result.checkpoint.name == "policy_00003.txt"
    params, header = load_params(result.checkpoint)
    assert header["step_index"] == 3
    assert np.array_equal(params.weights, result.params.weights)
    state = load_optimizer(out / "checkpoints" / "optimizer_00003.npz")
    assert state.t == 3


def test_training_is_reproducible(ini, tmp_path):
    a = RunConfig.from_ini(ini)
    b = RunConfig.from_ini(ini)
    b.logging.output_dir = str(tmp_path / "other")
    train(a)
    train(b)
    for rel in ("metrics.csv", "logs/train.jsonl", "checkpoints/policy_00003.txt"):
        assert (a.output_dir / rel).read_bytes() == (b.output_dir / rel).read_bytes()


def test_logged_trajectories_rescore_under_their_checkpoint(small_run):
    config, _ = small_run
    records = read_jsonl(config.output_dir / "logs" / "train.jsonl")
    first = [r for r in records if r["update"] == 0]
    assert len(first) == 4 * 3
    params, _ = load_params(config.output_dir / "checkpoints" / "policy_00000.txt")
    for rec in first:
        traj = trajectory_from_record(rec)
        for t, turn in enumerate(traj.turns):
            assert abs(log_prob(params, traj.prefix(t), turn.response, recompute=True) - turn.response.total_log_prob) <= 1e-12


def test_replay_of_logged_trajectory(small_run):
    config, _ = small_run
    log = config.output_dir / "logs" / "train.jsonl"
    transcript = replay(log, 0)
    assert "[Observation]" in transcript and "[Response]" in transcript
    assert replay(log, 0) == transcript


def test_replay_detects_mutated_action(small_run, tmp_path):
    config, _ = small_run
    records = read_jsonl(config.output_dir / "logs" / "train.jsonl")
    rec = next(r for r in records if any(t["valid"] for t in r["turns"]))
    k = next(i for i, t in enumerate(rec["turns"]) if t["valid"] and t["action"] != "inventory")
    rec["turns"][k]["action"] = "inventory"
    path = tmp_path / "mutated.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ReplayDivergence) as err:
        replay(path, 0)
    assert err.value.turn == k + 1


def test_replay_across_checkpoint_reload(small_run, tmp_path):
    config, result = small_run
    params, _ = load_params(result.checkpoint)
    log_a, log_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    evaluate(result.params, Split.SEEN, episodes=4, log_path=log_a)
    evaluate(params, Split.SEEN, episodes=4, log_path=log_b)
    assert [replay(log_a, i) for i in range(4)] == [replay(log_b, i) for i in range(4)]


def test_evaluation_tasks_are_balanced_and_split_pure():
    for split in Split:
        tasks = evaluation_tasks(split, 64)
        assert len(tasks) == 64
        counts = [sum(t.task_type is tt for t in tasks) for tt in TaskType]
        assert max(counts) - min(counts) <= 1
        assert all(t.split is split for t in tasks)


def test_evaluate_is_side_effect_free(small_run):
    _, result = small_run
    a = evaluate(result.params, Split.SEEN, episodes=12)
    b = evaluate(result.params, Split.SEEN, episodes=12)
    assert a.rate == b.rate and a.per_type == b.per_type
    s1 = evaluate(result.params, Split.SEEN, episodes=12, greedy=False, seed=3)
    s2 = evaluate(result.params, Split.SEEN, episodes=12, greedy=False, seed=3)
    assert s1.rate == s2.rate


def test_oracle_baseline_is_perfect():
    for split in Split:
        for difficulty in Difficulty:
            res = oracle_baseline(split, episodes=24, difficulty=difficulty)
            assert res.rate == 1.0
            assert all(v == 1.0 for v in res.per_type.values())


def test_uniform_baseline_on_normal():
    res = uniform_baseline(Split.SEEN, greedy=False, difficulty=Difficulty.NORMAL)
    assert res.rate == UNIFORM_NORMAL_BASELINE
    assert res.rate < 0.5


def test_starvation_aborts(tmp_path):
    config = RunConfig.from_mapping(
        {
            "ipo": {"batch_tasks": "1", "group_size": "2", "max_steps": "1"},
            "env": {"task_types": "PickTwo", "difficulty": "Normal", "seen_pool": "0:50"},
            "schedule": {"total_updates": "60"},
        }
    )
    with pytest.raises(SignalStarvation):
        train(config, write=False)


def test_first_reaching():
    rows = [MetricsRow(i, r, 0, 1, 0, 0, 0) for i, r in enumerate([0.1, 0.7, 0.2, 0.6, 0.8, 0.9])]
    assert first_reaching(rows, 0.6) == 1
    assert first_reaching(rows, 0.6, window=2) == 4
    assert first_reaching(rows, 0.95) is None


def test_cli_train_eval_replay(ini, tmp_path, capsys):
    out = tmp_path / "cli_run"
    assert cli.main(["train", "--config", str(ini), "--seed", "3", "--output-dir", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["updates"] == 3
    ckpt = summary["checkpoint"]
    assert cli.main(["eval", "--checkpoint", ckpt, "--split", "unseen", "--greedy", "--episodes", "6"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["split"] == "Unseen" and 0.0 <= res["rate"] <= 1.0
    assert cli.main(["replay", "--log", str(out / "logs" / "train.jsonl"), "--index", "2"]) == 0
    assert "[Response]" in capsys.readouterr().out


def test_check_tasks():
    spec, _ = generate_task(3, TaskType.COOL)
    tasks = check_tasks([(3, "Cool"), (6, 0), spec])
    assert tasks[0] == spec
    assert tasks[1].task_type is TaskType.PICK
    with pytest.raises(ValueError):
        check_tasks([])
    with pytest.raises(ValueError):
        check_tasks([(1.5, "Pick")])
    with pytest.raises(ValueError):
        check_tasks([(1, "Fly")])


def test_estimator_api():
    est = IPOPlanner(total_updates=2, batch_tasks=3, group_size=2)
    assert clone(est).get_params() == est.get_params()
    X = [(s, tt.value) for s in range(10) for tt in TaskType if s % 5 != 4]
    est.fit(X)
    assert len(est.history_) == 2
    pred = est.predict(X[:6])
    assert pred.shape == (6,) and set(pred) <= {0.0, 1.0}
    assert est.score(X[:6]) == pred.mean()
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        IPOPlanner().predict(X[:1])
    with pytest.raises(ValueError):
        IPOPlanner().fit([(4, "Pick")])
