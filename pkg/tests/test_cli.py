"""End-to-end command line tests driven through main()."""

import yaml

from steadybatch.cli import main
from steadybatch.sim import load_schedule, read_metrics


def write_config(path, **overrides):
    doc = {
        "w_init": 4, "g_init": 2, "iterations": 6, "k_buckets": 2,
        "dim": 3, "model_kind": "constant", "stream_seed": 5,
        "policy": "static",
    }
    doc.update(overrides)
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_generate_writes_reproducible_schedule(tmp_path, capsys):
    out1 = tmp_path / "s1.yaml"
    out2 = tmp_path / "s2.yaml"
    args = ["generate", "--w-init", "8", "--count", "3", "--seed", "7",
            "--steps", "0:10", "--k-buckets", "2"]
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert len(load_schedule(str(out1)).entries) == 3


def test_generate_count_too_high_exits_one(tmp_path, capsys):
    code = main(["generate", "--w-init", "4", "--count", "4",
                 "--steps", "0:5", "--out", str(tmp_path / "s.yaml")])
    assert code == 1
    assert "survive" in capsys.readouterr().err


def test_bad_usage_exits_one(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["run"]) == 1  # missing --config


def test_run_reference_compare_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml")
    sched = tmp_path / "sched.yaml"
    assert main(["generate", "--w-init", "4", "--count", "2", "--seed", "3",
                 "--steps", "0:6", "--k-buckets", "2",
                 "--out", str(sched)]) == 0
    run_out = tmp_path / "run.jsonl"
    ref_out = tmp_path / "ref.jsonl"
    assert main(["run", "--config", cfg, "--schedule", str(sched),
                 "--out", str(run_out)]) == 0
    assert main(["reference", "--config", cfg, "--out", str(ref_out)]) == 0
    # degenerate stream: the run is bitwise equal to its oracle
    assert main(["compare", "--run", str(run_out), "--ref", str(ref_out)]) == 0
    out = capsys.readouterr().out
    assert "max |loss delta|: 0" in out
    assert "verdict: PASS" in out


def test_run_without_schedule_matches_reference(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["run", "--config", cfg, "--out", str(a)]) == 0
    assert main(["reference", "--config", cfg, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_compare_flags_adaptive_shortfall(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml")
    sched = tmp_path / "sched.yaml"
    assert main(["generate", "--w-init", "4", "--count", "1", "--seed", "1",
                 "--steps", "1:2", "--k-buckets", "2", "--weights", "1:0:0",
                 "--out", str(sched)]) == 0
    run_out = tmp_path / "adaptive.jsonl"
    ref_out = tmp_path / "ref.jsonl"
    assert main(["run", "--config", cfg, "--schedule", str(sched),
                 "--policy", "adaptive", "--out", str(run_out)]) == 0
    assert main(["reference", "--config", cfg, "--out", str(ref_out)]) == 0
    code = main(["compare", "--run", str(run_out), "--ref", str(ref_out),
                 "--tol-loss", "1e9"])
    assert code == 2
    out = capsys.readouterr().out
    assert "invariant violations:" in out
    assert "verdict: FAIL" in out
    # the adaptive run really did commit short batches
    _, rows = read_metrics(str(run_out))
    assert any(r["contrib_total"] < 8 for r in rows)


def test_compare_refuses_mismatched_configs(tmp_path, capsys):
    a_cfg = write_config(tmp_path / "a.yaml")
    b_cfg = write_config(tmp_path / "b.yaml", stream_seed=99)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["reference", "--config", a_cfg, "--out", str(a)]) == 0
    assert main(["reference", "--config", b_cfg, "--out", str(b)]) == 0
    assert main(["compare", "--run", str(a), "--ref", str(b)]) == 1
    assert "ConfigMismatch" in capsys.readouterr().err


def test_run_all_dead_exits_three(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml", w_init=2, g_init=1,
                       policy="adaptive")
    sched_doc = {
        "schema": "schedule/v1", "w_init": 2, "ranks_per_replica": 8,
        "k_buckets": 2, "seed": 0, "count": 1, "steps": [0, 4],
        "weights": [1.0, 0.0, 0.0],
        "entries": [
            {"step": 1, "replica": 0, "local_rank": 0, "location": "before_sync"},
            {"step": 2, "replica": 1, "local_rank": 0, "location": "before_sync"},
        ],
    }
    sched = tmp_path / "sched.yaml"
    sched.write_text(yaml.safe_dump(sched_doc))
    out = tmp_path / "m.jsonl"
    code = main(["run", "--config", cfg, "--schedule", str(sched),
                 "--out", str(out)])
    assert code == 3
    meta, rows = read_metrics(str(out))
    assert meta["aborted"] is True
    assert len(rows) == 2


def test_config_parse_error_names_the_key(tmp_path, capsys):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({"w_init": 4, "g_init": 2, "iterations": 3,
                                 "bucket_count": 9}))
    assert main(["run", "--config", str(p)]) == 1
    assert "bucket_count" in capsys.readouterr().err


def test_walkthrough_passes_and_prints_every_check(capsys):
    assert main(["walkthrough"]) == 0
    out = capsys.readouterr().out
    assert "all 20 checks passed" in out
    assert "FAIL" not in out
    for needle in ("248", "23", "256", "28"):
        assert needle in out
