import numpy as np
import pytest

from proteus.autodiff import set_deterministic
from proteus.data import ToySpec, gen_toy_dataset
from proteus.distill import LossBreakdown, LossWeights, Objective
from proteus.optim import Schedule
from proteus.train import MetricsWriter, read_metrics, run_distill, train_supervised
from proteus.vit import Model, ViTConfig, init_params


def pair(seed=0):
    cfg = ViTConfig(dim=16, depth=1, heads=2)
    return Model(cfg, init_params(cfg, seed=1)).frozen(), Model(cfg, init_params(cfg, seed=2))


def test_feature_distillation_never_reads_labels():
    ds = gen_toy_dataset(ToySpec(classes=3, per_class=8))
    teacher, student = pair()
    run_distill(teacher, student, ds, Objective(), Schedule(warmup_steps=1, total_steps=3), 1, 8, 0)
    assert ds.label_reads == 0


def test_total_equals_weighted_sum_every_step(tmp_path):
    ds = gen_toy_dataset(ToySpec(classes=3, per_class=8))
    teacher, student = pair()
    w = LossWeights(0.5, 2.0, 1.5)
    with MetricsWriter(tmp_path / "m.csv") as mw:
        run_distill(teacher, student, ds, Objective(weights=w), Schedule(warmup_steps=1, total_steps=6), 2, 8, 0,
                    metrics=mw)
    for row in read_metrics(tmp_path / "m.csv"):
        assert abs(row["total"] - (0.5 * row["token"] + 2.0 * row["feat"] + 1.5 * row["patch"])) < 1e-6


def test_supervised_teacher_learns():
    ds = gen_toy_dataset(ToySpec(classes=3, per_class=16))
    cfg = ViTConfig(dim=16, depth=1, heads=2)
    model = Model(cfg, init_params(cfg))
    losses = train_supervised(model, ds, Schedule(base_lr=3e-3, warmup_steps=5, total_steps=90), 30, 16, 0)
    assert np.mean(losses[-3:]) < 0.5 * losses[0]


def test_metrics_schema_rejections(tmp_path):
    p = tmp_path / "m.csv"
    with MetricsWriter(p) as mw:
        mw.write(0, 0, 0.1, LossBreakdown(total=1.0), 3.0)
        with pytest.raises(ValueError):
            mw.write(0, 0, 0.1, LossBreakdown(), 1.0)
    assert len(read_metrics(p)) == 1
    text = p.read_text()
    for bad in (text.replace("# proteus-metrics/1", "# other"), text.replace("wall_ms", "ms"),
                text + "1,0,0.1,0,0,0,0,0,nan,0\n", text + "0,0,0.1,0,0,0,0,0,1,0\n"):
        p.write_text(bad)
        with pytest.raises(ValueError):
            read_metrics(p)


def test_wall_ms_real_without_determinism(tmp_path):
    set_deterministic(False)
    with MetricsWriter(tmp_path / "m.csv", tmp_path / "t.csv") as mw:
        mw.write(0, 0, 0.1, LossBreakdown(), 12.5)
    assert read_metrics(tmp_path / "m.csv")[0]["wall_ms"] == 12.5
    set_deterministic(True)
    with MetricsWriter(tmp_path / "m.csv", tmp_path / "t.csv") as mw:
        mw.write(0, 0, 0.1, LossBreakdown(), 12.5)
    assert read_metrics(tmp_path / "m.csv")[0]["wall_ms"] == 0.0
    assert "12.500" in (tmp_path / "t.csv").read_text()
