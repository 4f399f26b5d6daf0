import numpy as np
import pandas as pd
import pytest

from src.augmentation import mask_forces
from src.errors import ShapeMismatch
from src.metrics import (
    EvalReport,
    evaluate_mae,
    frame_mae,
    read_eval_csv,
    report_from_maps,
    write_eval_csv,
)
from src.model import ModelConfig, build

TINY = ModelConfig(down_blocks=2, layers_per_block=1, growth_rate=2, first_conv_filters=3,
                   up_conv_filters=4, dropout_rate=0.2)


class TestFrameMae:
    def test_identical_maps(self, rng):
        truth = rng.uniform(0, 100, size=(16, 16))
        assert frame_mae(truth, truth) == 0.0

    def test_constant_offset(self, rng):
        truth = rng.uniform(0, 100, size=(16, 16))
        assert frame_mae(truth + 3.5, truth) == pytest.approx(3.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            frame_mae(np.zeros((4, 4)), np.zeros((4, 5)))


class TestEvalReport:
    def test_summary_is_population(self):
        report = EvalReport((1.0, 2.0, 3.0, 6.0), name="val")
        assert report.mean == pytest.approx(3.0)
        assert report.std == pytest.approx(np.sqrt(3.5))

    def test_report_from_maps(self, rng):
        truth = [rng.uniform(0, 10, size=(8, 8)) for _ in range(3)]
        report = report_from_maps([t + c for t, c in zip(truth, (1.0, 2.0, 3.0))], truth)
        assert report.maes == pytest.approx((1.0, 2.0, 3.0))

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            report_from_maps([np.zeros((2, 2))], [])

    def test_csv_rows(self, tmp_path):
        report = EvalReport((0.5, 1.25, 2.0), name="test")
        path = tmp_path / "eval.csv"
        write_eval_csv(report, path)

        df = pd.read_csv(path, dtype={"frame_index": str})
        assert df["frame_index"].tolist() == ["0", "1", "2", "mean", "std"]
        assert df["mae"].iloc[-2] == pytest.approx(report.mean)
        assert df["mae"].iloc[-1] == pytest.approx(report.std)

        back = read_eval_csv(path)
        assert back.maes == report.maes
        assert back.name == "eval"


class TestEvaluate:
    def test_one_row_per_frame_and_deterministic(self, small_frameset):
        model = build(TINY, 0)
        a = evaluate_mae(model, small_frameset, samples=2, seed=1, name="small")
        b = evaluate_mae(model, small_frameset, samples=2, seed=1, name="small")
        assert len(a.maes) == len(small_frameset)
        assert a.maes == b.maes
        assert all(np.isfinite(m) and m >= 0 for m in a.maes)

    def test_tukey_alpha_reaches_the_truth_mask(self, small_frameset):
        model = build(TINY, 0)
        wide = evaluate_mae(model, small_frameset, samples=2, seed=1, tukey_alpha=0.5)
        premasked = evaluate_mae(model, mask_forces(small_frameset, 0.5), samples=2, seed=1)
        default = evaluate_mae(model, small_frameset, samples=2, seed=1)
        assert wide.maes == premasked.maes
        assert wide.maes != default.maes
