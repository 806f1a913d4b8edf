import json

import pytest

from proteus.cli import main
from proteus.data import load_container
from proteus.eval import read_ppm
from proteus.train import METRICS_FIELDS, read_metrics

TINY = {"epochs": 2, "batch_size": 16, "teacher": {"dim": 16, "depth": 2, "heads": 2},
        "student": {"dim": 16, "depth": 1, "heads": 2}, "schedule": {"warmup_steps": 2}}


@pytest.fixture
def toy(tmp_path):
    path = tmp_path / "toy.pxds"
    assert main(["make-dataset", "toy", "--classes", "4", "--per-class", "8", "--seed", "0", "-o", str(path)]) == 0
    return path


def write_cfg(tmp_path, name="c.json", **over):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_make_dataset_toy_count(tmp_path):
    out = tmp_path / "toy.pxds"
    assert main(["make-dataset", "toy", "--classes", "10", "--per-class", "50", "--seed", "0", "-o", str(out)]) == 0
    assert len(load_container(out)) == 500


def test_make_dataset_other_kinds(tmp_path, toy):
    assert main(["make-dataset", "subsample", "--input", str(toy), "--fraction", "0.5", "-o", str(tmp_path / "s.pxds")]) == 0
    assert load_container(tmp_path / "s.pxds").class_count == 2
    assert main(["make-dataset", "merge", "--inputs", str(toy), str(toy), "-o", str(tmp_path / "m.pxds")]) == 0
    assert len(load_container(tmp_path / "m.pxds")) == 64
    assert main(["make-dataset", "single", "--count", "10", "-o", str(tmp_path / "one.pxds")]) == 0
    assert len(load_container(tmp_path / "one.pxds")) == 10


def test_distill_twice_is_byte_identical(tmp_path, toy):
    cfg = write_cfg(tmp_path, debug=True)
    for out in ("a", "b"):
        assert main(["distill", "--config", str(cfg), "--data", str(toy), "--out", str(tmp_path / out)]) == 0
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 4 and set(rows[0]) == set(METRICS_FIELDS)
    assert all(r["wall_ms"] == 0.0 for r in rows)


def test_run_reconstructable_from_emitted_config(tmp_path, toy):
    cfg = write_cfg(tmp_path)
    assert main(["distill", "--config", str(cfg), "--data", str(toy), "--out", str(tmp_path / "a")]) == 0
    emitted = json.loads((tmp_path / "a" / "config.json").read_text())
    assert emitted["seed"] == 0 and emitted["schedule"]["total_steps"] == 4
    emitted["out"] = str(tmp_path / "b")
    (tmp_path / "again.json").write_text(json.dumps(emitted))
    assert main(["distill", "--config", str(tmp_path / "again.json")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_full_pipeline(tmp_path, toy):
    cfg = write_cfg(tmp_path)
    assert main(["train-teacher", "--config", str(cfg), "--data", str(toy), "--out", str(tmp_path / "t")]) == 0
    teacher = tmp_path / "t" / "checkpoint.prtc"
    kd = write_cfg(tmp_path, "kd.json", objective={"kind": "kd", "use_ce": True})
    assert main(["distill", "--config", str(kd), "--data", str(toy), "--teacher", str(teacher),
                 "--out", str(tmp_path / "kd")]) == 0
    inh = write_cfg(tmp_path, "inh.json", init="inherit")
    assert main(["distill", "--config", str(inh), "--data", str(toy), "--teacher", str(teacher),
                 "--out", str(tmp_path / "d")]) == 0
    student = tmp_path / "d" / "checkpoint.prtc"
    for method in ("lbfgs", "sgd"):
        out = tmp_path / f"{method}.json"
        assert main(["probe", method, "--checkpoint", str(student), "--train", str(toy), "--test", str(toy),
                     "--max-iter", "50", "-o", str(out)]) == 0
        assert json.loads(out.read_text())["protocol"] == method
    assert main(["visualize-pca", "--checkpoint", str(student), "--data", str(toy), "--indices", "0,1",
                 "-o", str(tmp_path / "v.ppm")]) == 0
    assert read_ppm(tmp_path / "v.ppm").shape == (16, 32, 3)


def test_config_error_names_field(tmp_path, toy, capsys):
    cfg = write_cfg(tmp_path, student={"dim": 16, "heads": 3})
    assert main(["distill", "--config", str(cfg), "--data", str(toy)]) == 2
    assert "student.heads" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, toy, capsys):
    cfg = write_cfg(tmp_path, objective={"wieghts": {}})
    assert main(["distill", "--config", str(cfg), "--data", str(toy)]) == 2
    assert "objective.wieghts" in capsys.readouterr().err


def test_missing_path_is_config_error(tmp_path, capsys):
    assert main(["distill", "--data", str(tmp_path / "nope.pxds")]) == 2
    assert "data" in capsys.readouterr().err


def test_unknown_flag_prints_usage(capsys):
    assert main(["distill", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_3(tmp_path, toy):
    bad = tmp_path / "bad.prtc"
    bad.write_bytes(b"PRTC\x01\x00\x00\x00\x05")
    assert main(["probe", "lbfgs", "--checkpoint", str(bad), "--train", str(toy), "-o", str(tmp_path / "p.json")]) == 3


def test_corrupt_container_exit_3(tmp_path, toy):
    bad = tmp_path / "bad.pxds"
    bad.write_bytes(toy.read_bytes()[:-7])
    assert main(["distill", "--data", str(bad)]) == 3


def test_kd_needs_teacher_classifier(tmp_path, toy):
    cfg = write_cfg(tmp_path, objective={"kind": "kd"})
    assert main(["distill", "--config", str(cfg), "--data", str(toy)]) == 2


@pytest.mark.slow
def test_ablate_table2_quick(tmp_path, capsys):
    assert main(["ablate", "--preset", "table2", "--quick", "--out", str(tmp_path / "t2")]) == 0
    summary = json.loads((tmp_path / "t2" / "summary.json").read_text())
    assert [r["objectives"] for r in summary["rows"]] == ["token", "feat", "token+feat", "token+feat+patch"]
    assert (tmp_path / "t2" / "summary.csv").exists()


@pytest.mark.slow
def test_ablate_table1_and_inherit_quick(tmp_path, capsys):
    assert main(["ablate", "--preset", "table1", "--quick", "--out", str(tmp_path / "t1")]) == 0
    assert "held-out gap" in capsys.readouterr().out
    summary = json.loads((tmp_path / "t1" / "summary.json").read_text())
    assert len(summary["rows"]) == 5
    assert main(["ablate", "--preset", "inherit", "--quick", "--out", str(tmp_path / "inh")]) == 0
    rows = json.loads((tmp_path / "inh" / "summary.json").read_text())["rows"]
    assert [r["init"] for r in rows] == ["fresh", "inherit"]
