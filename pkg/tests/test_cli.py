import csv
import json

import numpy as np
import pytest

import rpae.nn
from rpae.cli import main, parse_config
from rpae.synthdata import load_png


def files(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data plus one trained RPAE and one baseline checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--train", "10", "--eval", "3", "--seed", "2"]) == 0
    config = root / "config.json"
    config.write_text(json.dumps({"epochs": 1, "batch_size": 5, "priority_on_track": 4.0}))
    assert main(["train", "--data", str(data), "--config", str(config),
                 "--out", str(root / "m.ckpt")]) == 0
    assert main(["train", "--data", str(data), "--config", str(config),
                 "--out", str(root / "b.ckpt"), "--baseline"]) == 0
    return root


class TestGenData:
    def test_counts(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--train", "8", "--eval", "4"]) == 0
        assert capsys.readouterr().out.strip() == str(tmp_path / "manifest.json")
        names = files(tmp_path)
        assert len([n for n in names if n.startswith("train/")]) == 16
        assert len([n for n in names if n.startswith("eval/")]) == 32
        for cls in ("healthy", "on_track", "off_track", "priority_pairs"):
            assert len([n for n in names if n.startswith(f"eval/{cls}/")]) == 8

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            main(["gen-data", "--out", str(tmp_path / d), "--train", "3", "--eval", "2"])
        a, b = files(tmp_path / "a"), files(tmp_path / "b")
        assert a == b
        for n in a:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_missing_out(self, capsys):
        assert main(["gen-data", "--train", "2"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_no_command(self):
        assert main([]) == 2

    def test_negative_count(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--train", "-1"]) == 2

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["gen-data", "--out", str(blocker / "sub"), "--train", "1", "--eval", "0"]) == 1
        assert "cannot write" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, workspace):
        assert (workspace / "m.ckpt").exists() and (workspace / "b.ckpt").exists()
        with open(workspace / "m.loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["epoch", "rpn_loss", "recon_loss", "total"] and len(rows) == 1

    def test_unknown_config_key(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"epochs": 1, "learnin_rate": 0.1}))
        code = main(["train", "--data", str(workspace / "data"), "--config", str(bad),
                     "--out", str(tmp_path / "x.ckpt")])
        err = capsys.readouterr().err
        assert code == 1 and "bad.json" in err and "learnin_rate" in err

    def test_malformed_dataset(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "x.ckpt")])
        assert code == 1 and str(tmp_path) in capsys.readouterr().err


class TestConfig:
    def test_split(self):
        model_cfg, train_cfg = parse_config({"seed": 4, "epochs": 2, "latent_channels": 8,
                                             "priority_track_side": 0.5,
                                             "anchor_shapes": [[8, 8], [4, 16]]})
        assert model_cfg.seed == train_cfg.seed == 4
        assert train_cfg.epochs == 2 and model_cfg.latent_channels == 8
        assert [c.priority for c in model_cfg.categories] == [5.0, 0.5]
        assert model_cfg.anchors.shapes == ((8, 8), (4, 16))

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown config keys: priority_sky"):
            parse_config({"priority_sky": 1.0})


class TestScore:
    def score(self, workspace, capsys, *extra, image="eval/on_track/00000.png"):
        code = main(["score", "--model", str(workspace / "m.ckpt"),
                     "--image", str(workspace / "data" / image), *extra])
        return code, capsys.readouterr()

    def test_schema(self, workspace, capsys):
        code, out = self.score(workspace, capsys)
        assert code == 0
        d = json.loads(out.out)
        assert set(d) == {"thi", "severity", "flagged", "threshold", "fallback_used", "regions"}
        for r in d["regions"]:
            assert set(r) == {"box", "category", "error", "weight"}
            assert r["category"] in ("on_track", "track_side")
        assert 0 <= d["severity"] <= 1

    def test_explicit_threshold(self, workspace, capsys):
        code, out = self.score(workspace, capsys, "--threshold", "1e-9")
        d = json.loads(out.out)
        assert code == 0 and d["threshold"] == 1e-9 and d["flagged"]

    def test_size_mismatch(self, workspace, tmp_path, capsys):
        from PIL import Image
        Image.fromarray(np.zeros((32, 48), np.uint8), mode="L").save(tmp_path / "s.png")
        code = main(["score", "--model", str(workspace / "m.ckpt"),
                     "--image", str(tmp_path / "s.png")])
        assert code == 1 and "does not match" in capsys.readouterr().err

    def test_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "x.ckpt").write_bytes(b"junk")
        code = main(["score", "--model", str(tmp_path / "x.ckpt"), "--image", "nope.png"])
        assert code == 1 and "x.ckpt" in capsys.readouterr().err

    def test_png_scaling(self, workspace):
        img = load_png(workspace / "data" / "train" / "00000.png")
        assert img.dtype == np.float32 and img.max() <= 1.0
        assert np.allclose(img * 255, np.round(img * 255))


class TestEval:
    def test_outputs(self, workspace, tmp_path, capsys):
        code = main(["eval", "--model", str(workspace / "m.ckpt"), "--data",
                     str(workspace / "data"), "--baseline-model", str(workspace / "b.ckpt"),
                     "--out", str(tmp_path)])
        printed = json.loads(capsys.readouterr().out)
        assert code == 0
        report = json.loads((tmp_path / "eval_report.json").read_text())
        assert printed == report
        assert set(report["rpae"]) == set(report["baseline"]) == {
            "class_mean", "auc", "scenario1_ratio", "scenario2_win_rate", "threshold",
            "flag_rate"}
        with open(tmp_path / "eval_scores.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["class", "index", "thi", "top_iou", "baseline_error"]
        assert len(rows) == 12

    def test_missing_split(self, workspace, tmp_path, capsys):
        data = tmp_path / "data"
        main(["gen-data", "--out", str(data), "--train", "10", "--eval", "0"])
        code = main(["eval", "--model", str(workspace / "m.ckpt"), "--data", str(data),
                     "--out", str(tmp_path)])
        assert code == 1 and "lacks splits" in capsys.readouterr().err

    def test_wrong_kind(self, workspace, tmp_path):
        assert main(["eval", "--model", str(workspace / "b.ckpt"), "--data",
                     str(workspace / "data"), "--out", str(tmp_path)]) == 1


class TestVerify:
    def test_clean(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "checks passed" in out

    def test_sabotaged_backward(self, monkeypatch, capsys):
        real = rpae.nn.conv2d_backward

        def broken(dout, cache):
            dx, dw, db = real(dout, cache)
            return dx, dw * 1.01, db

        monkeypatch.setattr(rpae.nn, "conv2d_backward", broken)
        assert main(["verify"]) == 1
        assert "FAIL conv2d" in capsys.readouterr().out
