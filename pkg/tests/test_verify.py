import numpy as np

from rpae import verify
from rpae.geometry import Box


class TestOracles:
    def test_raster_iou_hand(self):
        assert verify.raster_iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == 1 / 7
        assert verify.raster_iou(Box(0, 0, 1, 1), Box(0.5, 0, 1.5, 1)) == 1 / 3

    def test_greedy_oracle_hand(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30.0]])
        assert verify.greedy_nms_oracle(boxes, np.array([0.9, 0.8, 0.7]), 0.5) == [0, 2]
        assert verify.greedy_nms_oracle(boxes, np.array([0.5, 0.5, 0.5]), 0.9) == [0, 1, 2]


class TestSuite:
    def test_all_pass_quickly(self):
        lines = []
        ok, results, seconds = verify.run_all(lines.append)
        assert ok, [r.line() for r in results if not r.passed]
        assert seconds < 60
        assert len(lines) == len(results) >= 16
        names = {r.name for r in results}
        assert {"conv2d", "conv_transpose2d", "roi_pool", "total_loss", "iou_raster",
                "nms_bruteforce", "encode_decode"} <= names

    def test_result_line(self):
        r = verify.CheckResult("x", 2e-3, 1e-3, 5)
        assert not r.passed and r.line().startswith("FAIL x")
