import csv
import json

import pytest

from deletion_lab.cli import ConfigError, build_config, config_hash, load_config_file, main, parse_seeds

TINY_RL = ["contexts.train=4", "contexts.eval=2", "plan.rounds=2", "plan.episodes_per_round=4",
           "plan.train.steps=5", "plan.train.batch_size=4", "plan.estimator.widths=[8]", "spec.horizon=30",
           "eval_episodes=2"]


def sets(items):
    return [x for item in items for x in ("--set", item)]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_parse_seeds():
    assert parse_seeds("3") == [3]
    assert parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert parse_seeds("1,4,9") == [1, 4, 9]
    assert parse_seeds([2, 3]) == [2, 3]
    for bad in ("", "a..b", "5..1"):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


def test_hash_ignores_key_order():
    cfg = build_config("corollary-sweep")
    shuffled = dict(reversed(list(cfg.items())))
    assert config_hash(cfg) == config_hash(shuffled)
    assert config_hash(cfg) != config_hash({**cfg, "instances": 7})


def test_overrides_and_unknown_fields():
    cfg = build_config("sweep-alpha", {"plan": {"alpha": 0.5}}, ["plan.train.lr=0.003", "spec.horizon=20"])
    assert cfg["plan"]["alpha"] == 0.5 and cfg["plan"]["train"]["lr"] == 0.003 and cfg["spec"]["horizon"] == 20
    with pytest.raises(ConfigError, match="plan.nope"):
        build_config("sweep-alpha", {"plan": {"nope": 1}})
    with pytest.raises(ConfigError, match="unknown field"):
        build_config("sweep-alpha", overrides=["plan.train.bogus=1"])
    with pytest.raises(ConfigError):
        build_config("sweep-alpha", overrides=["plan.alpha"])
    with pytest.raises(ConfigError, match="valid kinds"):
        build_config("plot-everything")


def test_bad_yaml_reports_line(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("kind: corollary-sweep\ninstances: [1, 2\nd: 3\n")
    with pytest.raises(ConfigError, match="line"):
        load_config_file(p)


def test_unknown_kind_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
    assert "verify-theorem" in capsys.readouterr().err
    assert main([]) == 2


def test_config_error_exit_code(tmp_path):
    assert main(["corollary-sweep", "--out", str(tmp_path), "--set", "nope=1"]) == 2
    assert main(["train-adaptive", "--out", str(tmp_path), "--set", "plan.strategy=oldest"] + sets(TINY_RL)) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path):
    assert main(["train-adaptive", "--out", str(tmp_path), "--set", "spec.dt=1e200"] + sets(TINY_RL)) == 3


def test_verify_theorem_run(tmp_path, capsys):
    assert main(["verify-theorem", "--instances", "10", "--seed", "7", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "reports.jsonl").read_text().splitlines()
    assert len(lines) == 10
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["sound"] and summary["counterexamples"] == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["kind"] == "verify-theorem" and man["seeds"] == [7] and man["exit_code"] == 0
    assert man["config_hash"] == config_hash(man["config"])


def test_verify_theorem_from_instance_file(tmp_path):
    from deletion_lab.erm import random_ridge_instance
    from deletion_lab.numerics import make_rng

    rng = make_rng(0)
    path = tmp_path / "inst.jsonl"
    path.write_text("".join(json.dumps(random_ridge_instance(rng, N=6).to_dict()) + "\n" for _ in range(3)))
    assert main(["verify-theorem", "--instances-file", str(path), "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "reports.jsonl").read_text().splitlines()) == 3


def test_corollary_sweep_columns(tmp_path):
    assert main(["corollary-sweep", "--instances", "5", "--seed", "2", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "corollary_seed2.csv")
    assert len(rows) == 5
    assert list(rows[0]) == ["d", "N", "R", "SNR", "lam", "D", "C", "margin", "expected_drop",
                             "realized_drop", "pass"]
    assert all(r["pass"] == "True" for r in rows)


def test_survival_and_extra_class(tmp_path):
    assert main(["survival-table", "--set", "replays=200", "--out", str(tmp_path / "s")]) == 0
    rows = read_csv(tmp_path / "s" / "survival.csv")
    assert [r["round"] for r in rows] == ["1", "2", "3", "4", "5"]
    assert float(rows[0]["empirical"]) == 1.0
    assert main(["extra-class", "--seeds", "0..1", "--set", "lams=[1.0, 100.0]", "--out", str(tmp_path / "e")]) == 0
    assert len(read_csv(tmp_path / "e" / "extra_class.csv")) == 4


def test_sweep_alpha_pipeline(tmp_path):
    args = ["sweep-alpha", "--env", "pendulum", "--seeds", "1..2", "--set", "alphas=[0.5, 1.0]",
            "--out", str(tmp_path)] + sets(TINY_RL)
    assert main(args) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert list(rows[0])[:4] == ["alpha", "seed", "max_gap", "mean_gap"]
    assert [(r["alpha"], r["seed"]) for r in rows] == [("0.5", "1"), ("0.5", "2"), ("1.0", "1"), ("1.0", "2")]
    # rerunning from the manifest reproduces the table
    man = json.loads((tmp_path / "manifest.json").read_text())
    cfg = tmp_path / "again.yaml"
    cfg.write_text(json.dumps({"kind": "sweep-alpha", **man["config"]}))
    assert main(["run", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert read_csv(tmp_path / "again" / "sweep.csv") == rows


def test_train_adaptive_and_ablation(tmp_path):
    assert main(["train-adaptive", "--out", str(tmp_path / "t")] + sets(TINY_RL)) == 0
    curve = read_csv(tmp_path / "t" / "loss_seed0.csv")
    assert list(curve[0]) == ["round", "step", "loss"] and len(curve) == 10
    assert (tmp_path / "t" / "estimator_seed0.json").exists()
    assert main(["ablate-strategies", "--seeds", "0", "--out", str(tmp_path / "a")] + sets(TINY_RL)) == 0
    rows = read_csv(tmp_path / "a" / "ablation.csv")
    assert [r["strategy"] for r in rows] == ["stale", "random", "uniform"]


def test_exponent_overrides_are_numbers():
    cfg = build_config("sweep-alpha", overrides=["plan.train.lr=1e-3", "env=pendulum"])
    assert cfg["plan"]["train"]["lr"] == 1e-3 and cfg["env"] == "pendulum"
