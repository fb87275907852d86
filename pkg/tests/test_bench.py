import csv
import io

import numpy as np
import pytest

from estf_tad import bench
from estf_tad.bench import (
    AblationReport,
    ablation_run,
    bootstrap_gap,
    loglog_slope,
    scan_scaling,
    variant_config,
)
from estf_tad.config import config_from_dict
from estf_tad.metrics import evaluate
from estf_tad.numerics import NumericError
from estf_tad.pipeline import load_datasets, run_training, validation_predictions

TINY = {
    "data": {
        "train": {
            "n_videos": 4, "frames": 8, "height": 4, "width": 4, "n_classes": 2,
            "actions_per_video": [1, 1], "duration_range": [2, 4], "min_gap": 1,
        },
        "val_videos": 3,
    },
    "backbone": {"depth": 1, "d_model": 6, "patch": [1, 2, 2], "input_shape": [8, 4, 4, 3]},
    "adapter": {"d_model": 6, "rank": 2, "pool_factor": [1, 1], "ssm": {"d_model": 2, "d_state": 2}},
    "detector": {"n_classes": 2, "n_levels": 2, "head_hidden": 4},
    "train": {"epochs": 1, "batch_size": 2, "lr": 0.01, "warmup_epochs": 0},
}


@pytest.fixture(scope="module")
def tiny_cfg():
    return config_from_dict(TINY)


@pytest.fixture(scope="module")
def tiny_report(tiny_cfg):
    return ablation_run(tiny_cfg, n_boot=10)


class TestSlope:
    @pytest.mark.parametrize("k", [1.0, 2.0, 0.5])
    def test_exact_power_law(self, k):
        t = [1024, 2048, 4096, 8192]
        assert loglog_slope(t, [3.0 * x ** k for x in t]) == pytest.approx(k, abs=1e-12)


class TestScaling:
    def test_rows_and_csv(self):
        rep = scan_scaling(lengths=(32, 64, 128), reps=2)
        assert len(rep.rows) == 3 * 2
        rows = list(csv.reader(io.StringIO(rep.to_csv())))
        assert rows[0][:4] == ["module", "T", "median_ms", "peak_bytes"]
        assert {r[0] for r in rows[1:]} == {"tb_ssm_forward", "attention_baseline"}
        assert all(float(r[2]) > 0 and int(r[3]) > 0 for r in rows[1:])
        assert set(rep.slopes) == {"tb_ssm_forward", "attention_baseline"}

    def test_structure_is_deterministic(self):
        a = scan_scaling(lengths=(16, 32), reps=1, modules=("tb_ssm_forward",))
        b = scan_scaling(lengths=(16, 32), reps=1, modules=("tb_ssm_forward",))
        assert [(r.module, r.length, r.peak_bytes) for r in a.rows] == [(r.module, r.length, r.peak_bytes) for r in b.rows]

    def test_unresolvable_rows_flagged_not_fatal(self, monkeypatch):
        monkeypatch.setattr(bench, "MIN_TICKS", 1e30)
        rep = scan_scaling(lengths=(16, 32), reps=1)
        assert all(r.flagged for r in rep.rows)
        assert all(s is None for s in rep.slopes.values())

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            scan_scaling(lengths=(16,), reps=0)
        with pytest.raises(ValueError):
            scan_scaling(lengths=(16,), modules=("conv",))


class TestVariants:
    def test_overrides(self, tiny_cfg):
        assert variant_config(tiny_cfg, {"spatial": False}).adapter.spatial is False
        tied = variant_config(tiny_cfg, {"ssm.tied": True})
        assert tied.adapter.ssm.tied and not tiny_cfg.adapter.ssm.tied
        assert variant_config(tiny_cfg, None).adapter is None


class TestAblation:
    def test_grid_shape(self, tiny_report):
        comp = [r.name for r in tiny_report.rows if r.group == "component"]
        strat = [r.name for r in tiny_report.rows if r.group == "strategy"]
        assert comp == ["full", "no-spatial", "no-temporal", "no-fusion", "tied-A"]
        assert strat == ["none", "attention", "TB-SSM"]
        md = tiny_report.to_markdown().splitlines()
        assert sum(1 for line in md if line.startswith("| component")) == 5
        assert sum(1 for line in md if line.startswith("| strategy")) == 3

    def test_identical_configs_share_runs(self, tiny_report):
        assert tiny_report.row("TB-SSM").same_as == "component/full"
        assert tiny_report.row("none").same_as == "component/no-temporal"
        assert tiny_report.row("TB-SSM").average_map == tiny_report.row("full").average_map

    def test_full_row_matches_standalone_run(self, tiny_cfg, tiny_report):
        data = load_datasets(tiny_cfg)
        model, _ = run_training(variant_config(tiny_cfg, {}), data)
        rep = evaluate(validation_predictions(model, tiny_cfg, data), data.val[1])
        assert rep.average_map == tiny_report.row("full").average_map

    def test_asymmetry_populated(self, tiny_report):
        a = tiny_report.asymmetry
        assert a.status == "ok"
        assert a.independent is not None and a.tied is not None
        assert a.gap == pytest.approx(a.independent - a.tied)
        assert a.ci[0] <= a.ci[1]

    def test_csv_rows(self, tiny_report):
        rows = list(csv.reader(io.StringIO(tiny_report.to_csv())))
        assert rows[0][-2:] == ["Avg.", "status"]
        assert len(rows) == 1 + 8 + len(tiny_report.reference)

    def test_failed_variant_marked_and_run_continues(self, tiny_cfg, monkeypatch):
        real = bench._train_eval

        def flaky(cfg, data):
            if cfg.adapter is not None and cfg.adapter.temporal == "attention":
                raise NumericError("non-finite loss")
            return real(cfg, data)

        monkeypatch.setattr(bench, "_train_eval", flaky)
        rep = ablation_run(tiny_cfg, asymmetry=False, reference=False)
        assert rep.row("attention").failed
        assert "failed" in rep.row("attention").status
        assert not rep.row("full").failed
        assert "failed" in rep.to_markdown()

    def test_report_roundtrip_dict(self, tiny_report):
        d = tiny_report.to_dict()
        assert len(d["rows"]) == 8 + len(tiny_report.reference)
        assert isinstance(tiny_report, AblationReport)


def test_bootstrap_identical_models_zero_gap(tiny_cfg):
    data = load_datasets(tiny_cfg)
    model, _ = run_training(tiny_cfg, data)
    preds = validation_predictions(model, tiny_cfg, data)
    lo, hi = bootstrap_gap(preds, preds, data.val[1], n_boot=20)
    assert lo == hi == 0.0


def test_bootstrap_is_seeded(tiny_cfg):
    data = load_datasets(tiny_cfg)
    model, _ = run_training(tiny_cfg, data)
    preds = validation_predictions(model, tiny_cfg, data)
    other = [p for p in preds if p.label == 0]
    a = bootstrap_gap(preds, other, data.val[1], n_boot=15, seed=1)
    b = bootstrap_gap(preds, other, data.val[1], n_boot=15, seed=1)
    assert a == b and np.isfinite(a).all()
