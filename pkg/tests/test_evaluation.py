import math

import numpy as np
import numpy.testing as npt
import pytest

from tiny import tiny_setup
from distinqt.data import KpiScale
from distinqt.evaluation import (
    CheckpointModel, compute_mae, persistence_baseline, read_horizon_csv, summary_rows,
    write_horizon_csv, write_summary_csv,
)
from distinqt.protocol import DistributedTrainer


def loop_mae(pred, truth):
    """Plain-loop reference: pooled mean, population std, per-step curve."""
    n, p = len(pred), len(pred[0])
    errs = [abs(pred[i][j] - truth[i][j]) for i in range(n) for j in range(p)]
    mean = sum(errs) / len(errs)
    std = math.sqrt(sum((e - mean) ** 2 for e in errs) / len(errs))
    curve = [sum(abs(pred[i][j] - truth[i][j]) for i in range(n)) / n for j in range(p)]
    return mean, std, curve


class TestMae:
    def test_against_loop_oracle(self, rng):
        pred, truth = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        rep = compute_mae(pred, truth)
        mean, std, curve = loop_mae(pred.tolist(), truth.tolist())
        assert rep.overall_mae == pytest.approx(mean, rel=1e-12)
        assert rep.overall_std == pytest.approx(std, rel=1e-12)
        npt.assert_allclose(rep.per_horizon_mae, curve, rtol=1e-12)
        assert rep.last_step_mae == pytest.approx(curve[-1], rel=1e-12)

    def test_overall_is_mean_of_curve(self, rng):
        rep = compute_mae(rng.normal(size=(50, 2, 7)), rng.normal(size=(50, 2, 7)))
        assert rep.overall_mae == pytest.approx(rep.per_horizon_mae.mean(), abs=1e-12)
        assert rep.n_windows == 100

    def test_constant_offset(self):
        truth = np.linspace(0, 5, 40).reshape(8, 5)
        rep = compute_mae(truth + 0.75, truth)
        assert rep.overall_mae == pytest.approx(0.75, abs=1e-12)
        assert rep.overall_std == pytest.approx(0.0, abs=1e-12)
        npt.assert_allclose(rep.per_horizon_mae, 0.75, atol=1e-12)

    def test_denormalized_mbps(self):
        # scaled error 0.1 on a 0..20 Mbps scale is 2 Mbps
        truth = np.full((4, 3), 0.5)
        rep = compute_mae(truth + 0.1, truth, KpiScale(0.0, 20.0))
        assert rep.overall_mae == pytest.approx(2.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            compute_mae(np.zeros((2, 3)), np.zeros((2, 4)))
        with pytest.raises(ValueError, match="expected"):
            compute_mae(np.zeros(3), np.zeros(3))


class TestPersistence:
    def test_repeats_last_value(self):
        out = persistence_baseline(np.array([[1.0, 2.0], [3.0, 4.0]]), 3)
        assert out.shape == (2, 2, 3)
        npt.assert_array_equal(out[1, 0], [3.0, 3.0, 3.0])

    def test_constant_series_zero_error(self):
        last = np.full(6, 7.5)
        rep = compute_mae(persistence_baseline(last, 10), np.full((6, 10), 7.5))
        assert rep.overall_mae == 0.0 and rep.last_step_mae == 0.0

    def test_slope_last_step_closed_form(self):
        p, slope = 10, 0.1
        last = np.linspace(2.0, 9.0, 20)
        truth = last[:, None] + slope * np.arange(1, p + 1)[None, :]
        rep = compute_mae(persistence_baseline(last, p), truth)
        assert rep.last_step_mae == pytest.approx(slope * p, abs=1e-12)

    def test_linear_trend_error_grows_with_horizon(self):
        # kpi rising by 1 per step: persistence is off by j at step j
        last = np.arange(5.0)
        truth = last[:, None] + np.arange(1, 5)[None, :]
        rep = compute_mae(persistence_baseline(last, 4), truth)
        npt.assert_array_equal(rep.per_horizon_mae, [1.0, 2.0, 3.0, 4.0])
        assert rep.overall_mae == 2.5


class TestFiles:
    def test_horizon_csv_golden(self, tmp_path):
        rep = compute_mae(np.array([[1.0, 2.0], [3.0, 5.0]]), np.zeros((2, 2)))
        path = tmp_path / "h.csv"
        write_horizon_csv(path, rep, 200)
        assert path.read_bytes() == (
            b"horizon_step_ms,mae_mbps,std_mbps\n"
            b"200,2.000000,1.000000\n"
            b"400,3.500000,1.500000\n")
        rows = read_horizon_csv(path)
        assert rows[1]["horizon_step_ms"] == "400"

    def test_summary_csv(self, tmp_path):
        rep = compute_mae(np.ones((2, 2)), np.zeros((2, 2)))
        path = tmp_path / "s.csv"
        write_summary_csv(path, summary_rows({"run": rep}))
        lines = path.read_text().splitlines()
        assert lines[0] == "name,overall_mae,overall_std,last_step_mae,last_step_std,n_windows"
        assert lines[1] == "run,1.0,0.0,1.0,0.0,2"

    def test_report_dict_is_json_ready(self):
        d = compute_mae(np.ones((2, 2)), np.zeros((2, 2))).to_dict()
        assert d["per_horizon_mae"] == [1.0, 1.0]


class TestCheckpointModel:
    def test_matches_trainer_predictions(self):
        topo, cfg, prep = tiny_setup(n_ues=2, topo_ues=2)
        tr = DistributedTrainer(topo, cfg, prep.train, prep.val, seed=3)
        try:
            tr.fit(max_epochs=2, patience=5)
            expected = tr.predict("val")
            tensors = tr.checkpoint_tensors()
        finally:
            tr.close()
        model = CheckpointModel(tensors, cfg, topo)
        npt.assert_allclose(model.predict(prep.val, chunk=7), expected, rtol=0, atol=1e-12)
        npt.assert_array_equal(model.targets(prep.val), prep.val.stacked_targets())
        npt.assert_array_equal(model.last_kpi(prep.val), prep.val.stacked_last_kpi())
