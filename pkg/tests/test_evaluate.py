import numpy as np
import pytest

from rpae.evaluate import evaluate, image_scores, roc_auc, summarize, top_proposal_iou
from rpae.model import BaselineModel, ModelConfig, RpaeModel
from rpae.synthdata import Dataset, generate_dataset


class TestRocAuc:
    def test_perfect(self):
        assert roc_auc([0.1, 0.2], [0.3, 0.4]) == 1.0

    def test_inverted(self):
        assert roc_auc([0.3, 0.4], [0.1, 0.2]) == 0.0

    def test_ties_count_half(self):
        assert roc_auc([0.5, 0.5], [0.5]) == 0.5

    def test_hand_case(self):
        # 0.35 beats both negatives, 0.2 beats only 0.1: 3 of 4 pairs
        assert roc_auc([0.1, 0.3], [0.35, 0.2]) == pytest.approx(0.75)

    def test_empty(self):
        with pytest.raises(ValueError):
            roc_auc([], [0.1])


class TestSummarize:
    def test_fields(self):
        scores = {"healthy": np.array([0.1, 0.2]), "on_track": np.array([0.4, 0.6]),
                  "off_track": np.array([0.1, 0.15]), "priority_pairs": np.array([0.5, 0.2, 0.1, 0.3])}
        s = summarize(scores, 0.25)
        assert s.auc == 1.0
        assert s.scenario1_ratio == pytest.approx(0.5 / 0.125)
        assert s.scenario2_win_rate == 0.5
        assert s.flag_rate["on_track"] == 1.0 and s.flag_rate["healthy"] == 0.0


@pytest.fixture(scope="module")
def null_data():
    return generate_dataset(10, 50, seed=11)


class TestEvaluate:
    def test_null_model_auc(self, null_data):
        model = RpaeModel(ModelConfig(seed=1))
        auc = roc_auc(image_scores(model, null_data.eval["healthy"]),
                      image_scores(model, null_data.eval["on_track"]))
        assert abs(auc - 0.5) <= 0.15

    def test_report_fields(self, tiny_dataset):
        report = evaluate(RpaeModel(), tiny_dataset, BaselineModel())
        d = report.to_dict()
        assert set(d) == {"rpae", "mean_top_iou", "baseline"}
        for summary in (d["rpae"], d["baseline"]):
            assert set(summary) == {"class_mean", "auc", "scenario1_ratio",
                                    "scenario2_win_rate", "threshold", "flag_rate"}
            assert 0 <= summary["auc"] <= 1 and summary["scenario1_ratio"] >= 0
        assert len(report.per_image) == 16
        assert set(report.per_image[0]) == {"class", "index", "thi", "top_iou", "baseline_error"}
        assert 0 <= d["mean_top_iou"] <= 1

    def test_missing_split(self, tiny_dataset):
        with pytest.raises(ValueError, match="lacks"):
            evaluate(RpaeModel(), Dataset(tiny_dataset.train, {}))

    def test_top_iou_without_proposals(self, tiny_dataset):
        model = RpaeModel(ModelConfig(objectness_threshold=1.0))
        assert top_proposal_iou(model, tiny_dataset.eval["healthy"][0]) == 0.0
