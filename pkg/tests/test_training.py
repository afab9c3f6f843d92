import csv

import numpy as np
import pytest

from rpae import nn
from rpae.geometry import Box, encode_array, iou_matrix
from rpae.model import BaselineModel, RpaeModel, RpnOutput
from rpae.training import (IGNORE, NEGATIVE, POSITIVE, AnchorLabels, TrainConfig,
                           batch_loss, jitter_boxes, match_anchors, reconstruction_loss,
                           rpn_loss, total_loss, train, train_baseline)

from conftest import small_config


def all_ignore(m):
    return AnchorLabels(np.full(m, IGNORE), np.full(m, -1), np.full(m, -1), np.zeros((m, 4)))


def constant_decoders(model, values):
    """Zero the last layer of decoder k so it emits ``values[k]`` everywhere."""
    for dec, v in zip(model.decoders, values):
        w, b = dec.parameters()[-2:]
        w.value[...] = 0
        b.value[...] = np.log(v / (1 - v))


class TestMatchAnchors:
    anchors = np.array([[0, 0, 4, 4], [20, 20, 24, 24], [0, 0, 4, 8], [0, 0, 8, 8.0]])

    def test_identical_is_positive(self):
        labels = match_anchors(self.anchors, [(Box(0, 0, 4, 4), 1)])
        assert labels.labels[0] == POSITIVE
        assert labels.gt_index[0] == 0 and labels.category[0] == 1
        np.testing.assert_allclose(labels.box_targets[0], 0, atol=1e-12)

    def test_disjoint_is_negative(self):
        labels = match_anchors(self.anchors, [(Box(0, 0, 4, 4), 1)])
        assert labels.labels[1] == NEGATIVE and labels.gt_index[1] == -1

    def test_middle_is_ignored(self):
        # anchor 2 overlaps the gt with IoU exactly 0.5 and is not its best match
        labels = match_anchors(self.anchors, [(Box(0, 0, 4, 4), 0)])
        assert iou_matrix(self.anchors[2:3], np.array([[0, 0, 4, 4.0]]))[0, 0] == 0.5
        assert labels.labels[2] == IGNORE

    def test_no_gts(self):
        labels = match_anchors(self.anchors, [])
        assert (labels.labels == NEGATIVE).all()

    def test_best_match_forcing(self):
        # best IoU for this gt is 1/4, below both thresholds
        gt = Box(0, 0, 2, 2)
        labels = match_anchors(self.anchors, [(gt, 0)])
        assert labels.labels[0] == POSITIVE
        np.testing.assert_allclose(labels.box_targets[0],
                                   encode_array(self.anchors[:1], np.array([[0, 0, 2, 2.0]]))[0])

    def test_every_gt_has_positive(self, small_model, small_gts):
        labels = match_anchors(small_model.anchors, small_gts)
        for j in range(len(small_gts)):
            assert ((labels.labels == POSITIVE) & (labels.gt_index == j)).any()
        assert set(np.unique(labels.labels)) <= {POSITIVE, NEGATIVE, IGNORE}

    def test_sampling(self, small_model, small_gts, rng):
        labels = match_anchors(small_model.anchors, small_gts)
        s = labels.sampled(rng, 10, 3)
        assert (s.labels == POSITIVE).sum() <= 3
        assert (s.labels != IGNORE).sum() <= 10
        assert (s.labels[s.labels != IGNORE] == labels.labels[s.labels != IGNORE]).all()


def perfect_rpn(model, labels):
    m = len(model.anchors)
    hf, wf = model.config.feature_shape
    obj = (labels.labels == POSITIVE).astype(float)
    logits = np.zeros((m, 2))
    pos = labels.labels == POSITIVE
    logits[pos, labels.category[pos]] = 30.0
    o, d, c = RpnOutput.unflat(obj, labels.box_targets, logits, model.config.num_anchors, hf, wf)
    return RpnOutput(o[None], d[None], c[None])


class TestRpnLoss:
    def test_perfect_predictions(self, small_model, small_gts):
        labels = match_anchors(small_model.anchors, small_gts)
        assert rpn_loss(perfect_rpn(small_model, labels), labels, 3) < 1e-3

    def test_all_ignore(self, small_model):
        m = len(small_model.anchors)
        rpn = small_model.rpn_forward(small_model.encode(np.zeros((1, 1, 16, 16))))
        assert rpn_loss(rpn, all_ignore(m), 3) == 0.0

    def test_no_positives_only_objectness(self, small_model):
        labels = match_anchors(small_model.anchors, [])
        rpn = small_model.rpn_forward(small_model.encode(np.zeros((1, 1, 16, 16))))
        obj = rpn.flat(0, 3)[0]
        assert rpn_loss(rpn, labels, 3) == pytest.approx(nn.bce(obj, np.zeros_like(obj)))


class TestReconstructionLoss:
    def test_hand_case(self):
        model = RpaeModel(small_config())
        constant_decoders(model, [np.sqrt(0.2), np.sqrt(0.1)])
        gts = [(Box(4, 0, 12, 16), 0), (Box(0, 0, 4, 16), 1)]
        value = reconstruction_loss(model, np.zeros((1, 1, 16, 16)), gts)
        # priorities 5 and 1: (5 * 0.2 + 1 * 0.1) / 6
        assert value == pytest.approx(1.1 / 6, rel=1e-5)

    def test_exact_reproduction(self):
        model = RpaeModel(small_config())
        constant_decoders(model, [0.5, 0.5])
        assert reconstruction_loss(model, np.full((1, 1, 16, 16), 0.5),
                                   [(Box(4, 0, 12, 16), 0)]) < 1e-12

    def test_empty(self, small_model):
        assert reconstruction_loss(small_model, np.zeros((1, 1, 16, 16)), []) == 0.0

    def test_absent_category_decoder_gets_no_gradient(self, small_model):
        small_model.zero_grad()
        img = np.random.default_rng(0).uniform(size=(1, 1, 16, 16))
        batch_loss(small_model, img, [[(Box(4, 0, 12, 16), 0)]],
                   [all_ignore(len(small_model.anchors))], 1.0, backward=True)
        assert all((p.grad == 0).all() for p in small_model.decoders[1].parameters())
        assert any((p.grad != 0).any() for p in small_model.decoders[0].parameters())


class TestTotalLoss:
    def image(self):
        return np.random.default_rng(2).uniform(size=(1, 1, 16, 16))

    def test_lambda_zero_is_rpn_loss(self, small_model, small_gts):
        img = self.image()
        labels = match_anchors(small_model.anchors, small_gts)
        rpn = small_model.rpn_forward(small_model.encode(img))
        assert total_loss(small_model, img, small_gts, 0.0) == pytest.approx(
            rpn_loss(rpn, labels, 3), rel=1e-12)

    @pytest.mark.parametrize("lam", [0.5, 1.0, 3.0])
    def test_component_sum(self, small_model, small_gts, lam):
        img = self.image()
        base = total_loss(small_model, img, small_gts, 0.0)
        recon = reconstruction_loss(small_model, img, small_gts)
        assert total_loss(small_model, img, small_gts, lam) == pytest.approx(
            base + lam * recon, rel=1e-6)
        assert total_loss(small_model, img, small_gts, lam) >= 0

    def test_finite_differences(self, small_model, small_gts):
        from rpae.verify import check_total_loss
        for seed in (8, 9, 10):
            result = check_total_loss(seed)
            assert result.passed, result


class TestJitter:
    def test_stays_inside(self, rng):
        boxes = [(Box(0, 0, 4, 64), 1), (Box(20, 0, 44, 64), 0)]
        for _ in range(50):
            for b, c in jitter_boxes(rng, boxes, 4.0, 64, 64):
                assert 0 <= b.x_min < b.x_max <= 64 and 0 <= b.y_min < b.y_max <= 64

    def test_zero_amount(self, rng):
        boxes = [(Box(1, 2, 5, 9), 1)]
        assert jitter_boxes(rng, boxes, 0.0, 16, 16) == boxes


@pytest.fixture(scope="module")
def short_runs(tiny_dataset):
    cfg = TrainConfig(epochs=2, batch_size=4)
    run = lambda: train(RpaeModel(), tiny_dataset.train, cfg)  # noqa: E731
    return run(), run()


class TestTrain:
    def test_deterministic(self, short_runs):
        (a, rows_a), (b, rows_b) = short_runs
        assert rows_a == rows_b
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p.value, q.value)

    def test_log_rows(self, short_runs):
        rows = short_runs[0][1]
        assert [r["epoch"] for r in rows] == [1, 2]
        for r in rows:
            assert r["total"] == pytest.approx(r["rpn_loss"] + r["recon_loss"])

    def test_lambda_zero_leaves_decoders(self, tiny_dataset):
        init = RpaeModel()
        model, _ = train(RpaeModel(), tiny_dataset.train[:4], TrainConfig(epochs=1, lam=0.0))
        for d0, d1 in zip(init.decoders, model.decoders):
            for p, q in zip(d0.parameters(), d1.parameters()):
                np.testing.assert_array_equal(p.value, q.value)
        assert not np.array_equal(init.encoder_parameters()[0].value,
                                  model.encoder_parameters()[0].value)

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            train(RpaeModel(), [], TrainConfig(epochs=1))

    def test_loss_log_csv(self, tiny_dataset, tmp_path):
        path = tmp_path / "loss.csv"
        train(RpaeModel(), tiny_dataset.train[:2], TrainConfig(epochs=2), log_path=path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["epoch", "rpn_loss", "recon_loss", "total"]
        assert len(rows) == 2

    @pytest.mark.parametrize("kw", [dict(neg_iou=0.8), dict(lam=-1), dict(epochs=0),
                                    dict(max_positives=40)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrainBaseline:
    def test_reproducible_and_learns(self, tiny_dataset):
        cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=3e-3)
        a, rows_a = train_baseline(BaselineModel(), tiny_dataset.train, cfg)
        b, rows_b = train_baseline(BaselineModel(), tiny_dataset.train, cfg)
        assert rows_a == rows_b
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p.value, q.value)
        img = tiny_dataset.train[0].image
        assert nn.mse(a.forward(img), img) < nn.mse(BaselineModel().forward(img), img)

    def test_empty(self):
        with pytest.raises(ValueError):
            train_baseline(BaselineModel(), [], TrainConfig(epochs=1))
