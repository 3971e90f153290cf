import json

import numpy as np
import pytest

from rotinv.dataset import DatasetSpec, generate_dataset
from rotinv.harness import (DivergenceError, Protocol, RunReport, TrainConfig,
                            accuracy_gap, evaluate, export_frame_field,
                            invariance_defect, run_ablation_grid,
                            run_experiment, run_perturbation_sweep,
                            train_model)
from rotinv.network import FusionModel, named_config

from conftest import TINY_MODEL

QUICK_TRAIN = TrainConfig(epochs=2, batch_size=4, lr=0.01)


@pytest.fixture(scope="module")
def quick_dataset():
    return generate_dataset(DatasetSpec(n_points=32, train_per_class=4,
                                        test_per_class=2, seed=3))


class TestProtocol:
    def test_names_parse(self):
        assert Protocol.from_name("zz").test_rotation == "z"
        assert Protocol.from_name("zso3").train_rotation == "z"
        assert Protocol.from_name("so3so3").train_rotation == "so3"

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            Protocol.from_name("zzz")

    def test_validation(self):
        with pytest.raises(ValueError):
            Protocol(train_rotation="x")
        with pytest.raises(ValueError):
            Protocol(test_rotation="none")
        with pytest.raises(ValueError):
            Protocol(repeats=0)

    def test_round_trip_name(self):
        assert Protocol.from_name("zso3").name == "zso3"


class TestTraining:
    def test_loss_decreases(self, quick_dataset):
        model = FusionModel(named_config("identity-frames", **TINY_MODEL))
        records = train_model(model, quick_dataset, Protocol("none", "z"),
                              TrainConfig(epochs=6, batch_size=4, lr=0.01),
                              seed=0)
        assert records[-1]["mean_loss"] < records[0]["mean_loss"]

    def test_divergence_raises_with_report(self, quick_dataset):
        cfg = named_config("identity-frames", **TINY_MODEL)
        huge = TrainConfig(epochs=4, batch_size=4, lr=1e18, clip_norm=0.0)
        with np.errstate(all="ignore"), pytest.raises(DivergenceError) as err:
            run_experiment(cfg, Protocol("none", "z", repeats=1),
                           quick_dataset, huge, seed=0)
        assert err.value.report.status == "diverged"

    def test_jsonl_sink_records(self, quick_dataset):
        model = FusionModel(named_config("fusion", **TINY_MODEL))
        records = []
        train_model(model, quick_dataset, Protocol("z", "so3"), QUICK_TRAIN,
                    seed=0, jsonl_sink=records.append)
        assert len(records) == 2 * 4  # epochs x batches
        first = records[0]
        for key in ("step", "epoch", "lr", "losses", "consistency_axis1",
                    "consistency_axis2", "invariance_defect"):
            assert key in first
        assert first["invariance_defect"] is not None  # probed on first batch
        assert json.dumps(records[0])  # serializable


class TestRunExperiment:
    def test_report_replay_bit_identical(self, quick_dataset):
        cfg = named_config("fusion", **TINY_MODEL)
        protocol = Protocol("z", "so3", repeats=2)
        a = run_experiment(cfg, protocol, quick_dataset, QUICK_TRAIN, seed=1)
        b = run_experiment(cfg, protocol, quick_dataset, QUICK_TRAIN, seed=1)
        assert a.replay_digest() == b.replay_digest()

    def test_report_serialization_roundtrip(self, quick_dataset):
        cfg = named_config("identity-frames", **TINY_MODEL)
        report = run_experiment(cfg, Protocol("none", "z", repeats=1),
                                quick_dataset, QUICK_TRAIN, seed=2)
        back = RunReport.from_json(report.to_json())
        assert back.accuracy == report.accuracy
        assert back.replay_digest() == report.replay_digest()

    def test_accuracy_gap_requires_paired_seeds(self, quick_dataset):
        cfg = named_config("identity-frames", **TINY_MODEL)
        a = run_experiment(cfg, Protocol("none", "z", repeats=1),
                           quick_dataset, QUICK_TRAIN, seed=1)
        b = run_experiment(cfg, Protocol("none", "z", repeats=1),
                           quick_dataset, QUICK_TRAIN, seed=2)
        with pytest.raises(ValueError):
            accuracy_gap(a, b)
        assert accuracy_gap(a, a) == 0.0


class TestAblationGrid:
    def test_rows_share_dataset_and_seed(self, quick_dataset):
        reports = run_ablation_grid(["identity-frames", "baseline"],
                                    Protocol("none", "z", repeats=1),
                                    quick_dataset, QUICK_TRAIN, seed=4,
                                    **TINY_MODEL)
        assert [r.model_config["row"] for r in reports] == ["identity-frames",
                                                            "baseline"]
        assert all(r.seed == 4 for r in reports)
        assert all(r.status == "ok" for r in reports)

    def test_frame_rows_complete_without_degenerate_aborts(self, quick_dataset):
        reports = run_ablation_grid(
            ["frames-handcrafted", "frames-gram-schmidt", "frames-lcrf"],
            Protocol("z", "so3", repeats=1), quick_dataset, QUICK_TRAIN,
            seed=0, **TINY_MODEL)
        assert all(r.status == "ok" for r in reports)
        for r in reports:
            assert "consistency_axis2" in r.final_diagnostics


class TestEvaluation:
    def test_z_rotations_keep_vertical_axis(self, quick_dataset):
        # the z protocol must never move the third axis: train with z
        # rotations and compare against manual z rotations of the points
        from rotinv.harness import _rotate_batch
        rng = np.random.default_rng(0)
        pts = np.stack([c.points for c in quick_dataset.test])
        rotated = _rotate_batch(pts, "z", rng)
        np.testing.assert_allclose(rotated[..., 2], pts[..., 2], atol=1e-12)

    def test_invariance_defect_helper(self, quick_dataset):
        model = FusionModel(named_config("full", **TINY_MODEL))
        defect = invariance_defect(model, quick_dataset.test[:2],
                                   n_rotations=5, seed=0)
        assert defect <= 1e-6
        sensitive = FusionModel(named_config("identity-frames", **TINY_MODEL))
        assert invariance_defect(sensitive, quick_dataset.test[:2],
                                 n_rotations=5, seed=0) > 1e-3


class TestPerturbationSweep:
    def test_zero_perturbation_reproduces_clean_accuracy(self, quick_dataset):
        model = FusionModel(named_config("fusion", **TINY_MODEL))
        rows = run_perturbation_sweep(model, quick_dataset, seed=0,
                                      sigmas=(0.0, 0.02), drops=(0,))
        clean = evaluate(model, quick_dataset.test, quick_dataset.test_labels,
                         "so3", seed=0)
        noise_rows = [r for r in rows if r["kind"] == "noise"]
        assert noise_rows[0]["sigma"] == 0.0
        assert noise_rows[0]["accuracy"] == pytest.approx(clean)

    def test_drop_counts_rescaled(self, quick_dataset):
        model = FusionModel(named_config("fusion", **TINY_MODEL))
        rows = run_perturbation_sweep(model, quick_dataset, seed=0,
                                      sigmas=(), drops=(0, 100, 200, 300))
        drops = [r["n_drop"] for r in rows]
        # 32-point clouds: the 1024-point convention rescales to 0,3,6,9
        assert drops == [0, 3, 6, 9]


class TestFrameExport:
    def test_files_written(self, tmp_path, quick_dataset):
        model = FusionModel(named_config("full", **TINY_MODEL))
        csv_path, ply_path = export_frame_field(model, quick_dataset.test[0],
                                                tmp_path / "field")
        csv_lines = open(csv_path).read().splitlines()
        assert len(csv_lines) == quick_dataset.test[0].n + 1
        assert open(ply_path).readline().strip() == "ply"
