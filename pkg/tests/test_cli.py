"""Command-line surface: subcommands, exit codes, artifact layout,
determinism of rerun outputs."""

import csv
import json
import os

import numpy as np
import pytest

from conftest import bias_model
from retscreen.checkpoint import save_checkpoint
from retscreen.cli import main
from retscreen.ensemble import save_ensemble_manifest


def run(argv):
    return main(argv)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run(["synth", "--n-patients", "30", "--seed", "3", "--out", str(out),
                "--distribution", "0.4,0.2,0.2,0.1,0.1"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_dataset):
    """A tiny trained pipeline shared by the CLI chain tests."""
    work = tmp_path_factory.mktemp("models")
    manifest = str(small_dataset / "manifest.jsonl")
    lat = str(work / "lat.rsck")
    assert run(["train", "--task", "laterality", "--manifest", manifest,
                "--out", lat, "--seed", "1", "--input-size", "16",
                "--stages", "2", "--base-channels", "4", "--epochs", "3",
                "--patience", "1"]) == 0
    cands = []
    for i, seed in enumerate((5, 6)):
        ckpt = str(work / f"ref{i}.rsck")
        assert run(["train", "--task", "referable", "--manifest", manifest,
                    "--out", ckpt, "--seed", str(seed), "--input-size", "16",
                    "--stages", "2", "--base-channels", "4", "--epochs", "3",
                    "--patience", "1"]) == 0
        cands.append(ckpt)
    ens = str(work / "referable.json")
    assert run(["ensemble", "--task", "referable", "--manifest", manifest,
                "--candidates", *cands, "--out", ens, "--seed", "1"]) == 0
    return {"work": work, "manifest": manifest, "laterality": lat,
            "ensemble": ens, "candidates": cands}


class TestSynth:
    def test_layout_and_provenance(self, small_dataset):
        assert (small_dataset / "manifest.jsonl").exists()
        assert (small_dataset / "provenance.json").exists()
        images = [f for f in os.listdir(small_dataset / "images")
                  if f.endswith(".png") and not f.endswith(".mask.png")]
        assert len(images) == 120  # 4 images per patient
        prov = read_json(small_dataset / "provenance.json")
        assert prov["command"] == "synth"
        assert prov["seed"] == 3

    def test_rerun_byte_identical(self, tmp_path):
        argv = ["synth", "--n-patients", "3", "--seed", "9",
                "--out", str(tmp_path / "d")]
        assert run(argv) == 0
        files = ["manifest.jsonl", "provenance.json"] + [
            os.path.join("images", f)
            for f in os.listdir(tmp_path / "d" / "images")]
        first = {f: (tmp_path / "d" / f).read_bytes() for f in files}
        assert run(argv) == 0  # identical command, same destination
        for f in files:
            assert (tmp_path / "d" / f).read_bytes() == first[f], f


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert run(["synth", "--n-patients", "2", "--out", "x", "--bogus"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_subcommand_is_usage_error(self):
        assert run([]) == 1

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        assert run(["eval", "--pred", str(tmp_path / "none.csv"),
                    "--labels", str(tmp_path / "none.jsonl"),
                    "--out", str(tmp_path / "r.json")]) == 2
        assert "error" in capsys.readouterr().err

    def test_bad_prediction_header_is_data_error(self, tmp_path):
        pred = tmp_path / "p.csv"
        pred.write_text("wrong,header\n1,2\n")
        assert run(["eval", "--pred", str(pred), "--labels", str(pred),
                    "--out", str(tmp_path / "r.json")]) == 2


class TestTrainEnsembleInfer:
    def test_train_artifacts(self, trained):
        assert os.path.exists(trained["laterality"])
        assert os.path.exists(trained["laterality"] + ".history.csv")
        prov = read_json(trained["laterality"] + ".provenance.json")
        assert prov["command"] == "train"
        with open(trained["candidates"][0] + ".history.csv") as fh:
            header = fh.readline().strip()
        assert header == "epoch,train_loss,val_metric,select_changes"

    def test_ensemble_manifest(self, trained):
        doc = read_json(trained["ensemble"])
        assert doc["combination"] == "mean"
        assert 1 <= len(doc["members"]) <= 2
        assert doc["selection_log"][0]["round"] == 1
        assert "threshold" in doc

    def test_infer_outputs(self, trained, tmp_path):
        out = tmp_path / "reports"
        assert run(["infer", "--manifest", trained["manifest"],
                    "--laterality", trained["laterality"],
                    "--referable", trained["ensemble"],
                    "--out", str(out), "--limit", "3"]) == 0
        reports = [json.loads(line) for line in
                   (out / "reports.jsonl").read_text().splitlines()]
        assert len(reports) == 3
        for report in reports:
            for row in report["images"]:
                assert row["latency_ms"]["total"] > 0
        with open(out / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert set(rows[0]) == {"exam_id", "eye", "score", "decision",
                                "latency_ms"}
        with open(out / "predictions.csv") as fh:
            preds = list(csv.DictReader(fh))
        assert set(preds[0]) == {"unit_id", "score"}
        assert (out / "heatmaps").is_dir()
        assert len(os.listdir(out / "heatmaps")) > 0

    def test_eval_on_infer_predictions(self, trained, tmp_path, capsys):
        out = tmp_path / "full"
        assert run(["infer", "--manifest", trained["manifest"],
                    "--laterality", trained["laterality"],
                    "--referable", trained["ensemble"],
                    "--out", str(out), "--no-heatmaps"]) == 0
        capsys.readouterr()
        report_path = tmp_path / "eval.json"
        code = run(["eval", "--pred", str(out / "predictions.csv"),
                    "--labels", trained["manifest"], "--delong",
                    "--roc-csv", str(tmp_path / "roc.csv"),
                    "--out", str(report_path)])
        assert code == 0
        printed = capsys.readouterr().out
        assert "(95% CI:" in printed
        report = read_json(report_path)
        assert 0.0 <= report["auc"] <= 1.0
        assert report["ci95"][0] <= report["auc"] <= report["ci95"][1]
        with open(tmp_path / "roc.csv") as fh:
            pts = list(csv.DictReader(fh))
        assert pts[0]["fpr"] == "0.000000"


class TestEvalCompareTsne:
    def _write_manifest(self, path, n=40):
        lines = []
        for i in range(n):
            grade = 2 if i % 2 else 0
            lines.append(json.dumps({
                "patient_id": f"p{i}", "exam_id": f"e{i}",
                "images": [{"path": f"img{i}.png"}],
                "eyes": {"left": {"grade": grade, "me": False, "gradable": True,
                                  "grader_count": 2}}}))
        path.write_text("\n".join(lines) + "\n")

    def _write_pred(self, path, n=40, noise=0.0, seed=0):
        rng = np.random.default_rng(seed)
        rows = ["unit_id,score"]
        for i in range(n):
            base = 0.8 if i % 2 else 0.2
            rows.append(f"e{i}:left,{base + noise * rng.uniform(-1, 1):.4f}")
        path.write_text("\n".join(rows) + "\n")

    def test_eval_operating_point(self, tmp_path, capsys):
        self._write_manifest(tmp_path / "m.jsonl")
        self._write_pred(tmp_path / "p.csv")
        assert run(["eval", "--pred", str(tmp_path / "p.csv"),
                    "--labels", str(tmp_path / "m.jsonl"),
                    "--operating-point", "specificity=0.87",
                    "--out", str(tmp_path / "r.json")]) == 0
        report = read_json(tmp_path / "r.json")
        assert report["auc"] == 1.0
        assert report["operating_point"]["sensitivity"] == 1.0

    def test_eval_rerun_byte_identical(self, tmp_path):
        self._write_manifest(tmp_path / "m.jsonl")
        self._write_pred(tmp_path / "p.csv", noise=0.05)
        blobs = []
        for sub in ("r1.json", "r2.json"):
            assert run(["eval", "--pred", str(tmp_path / "p.csv"),
                        "--labels", str(tmp_path / "m.jsonl"), "--delong",
                        "--out", str(tmp_path / sub)]) == 0
            blobs.append((tmp_path / sub).read_bytes())
        assert blobs[0] == blobs[1]

    def test_compare(self, tmp_path, capsys):
        self._write_manifest(tmp_path / "m.jsonl")
        self._write_pred(tmp_path / "a.csv", noise=0.01, seed=1)
        self._write_pred(tmp_path / "b.csv", noise=0.45, seed=2)
        assert run(["compare", "--pred-a", str(tmp_path / "a.csv"),
                    "--pred-b", str(tmp_path / "b.csv"),
                    "--labels", str(tmp_path / "m.jsonl"),
                    "--out", str(tmp_path / "c.json")]) == 0
        report = read_json(tmp_path / "c.json")
        assert report["auc_a"] >= report["auc_b"]
        assert 0.0 <= report["p"] <= 1.0
        assert "z =" in capsys.readouterr().out

    def test_compare_mismatched_units(self, tmp_path):
        self._write_manifest(tmp_path / "m.jsonl")
        self._write_pred(tmp_path / "a.csv")
        self._write_pred(tmp_path / "b.csv", n=20)
        assert run(["compare", "--pred-a", str(tmp_path / "a.csv"),
                    "--pred-b", str(tmp_path / "b.csv"),
                    "--labels", str(tmp_path / "m.jsonl"),
                    "--out", str(tmp_path / "c.json")]) == 2

    def test_tsne_command(self, tmp_path):
        rng = np.random.default_rng(4)
        rows = ["id,label," + ",".join(f"f{i}" for i in range(4))]
        for i in range(30):
            cluster = i % 2
            vec = rng.normal(size=4) + cluster * 8.0
            rows.append(f"s{i},{cluster}," + ",".join(f"{v:.4f}" for v in vec))
        (tmp_path / "feat.csv").write_text("\n".join(rows) + "\n")
        assert run(["tsne", "--features", str(tmp_path / "feat.csv"),
                    "--perplexity", "5", "--iters", "300", "--seed", "2",
                    "--out", str(tmp_path / "emb.csv"),
                    "--kl-out", str(tmp_path / "kl.csv")]) == 0
        with open(tmp_path / "emb.csv") as fh:
            emb = list(csv.DictReader(fh))
        assert len(emb) == 30
        assert set(emb[0]) == {"id", "x", "y", "label"}
        with open(tmp_path / "kl.csv") as fh:
            kl = list(csv.DictReader(fh))
        assert len(kl) == 300


class TestHeatmapCommand:
    def test_single_image_overlay(self, tmp_path, small_dataset):
        ckpt = tmp_path / "m.rsck"
        save_checkpoint(bias_model([0.0, 1.0], input_size=16), ckpt)
        images = sorted(f for f in os.listdir(small_dataset / "images")
                        if not f.endswith(".mask.png"))
        img = str(small_dataset / "images" / images[0])
        out = tmp_path / "overlay.png"
        assert run(["heatmap", "--image", img, "--checkpoint", str(ckpt),
                    "--out", str(out), "--map-out", str(tmp_path / "map.png")]) == 0
        assert out.exists() and (tmp_path / "map.png").exists()

    def test_ensemble_flag(self, tmp_path, small_dataset):
        ckpt = tmp_path / "m.rsck"
        save_checkpoint(bias_model([0.0, 1.0], input_size=16), ckpt)
        ens = tmp_path / "e.json"
        save_ensemble_manifest(ens, ["m.rsck"], [], "referable")
        images = sorted(f for f in os.listdir(small_dataset / "images")
                        if not f.endswith(".mask.png"))
        img = str(small_dataset / "images" / images[0])
        assert run(["heatmap", "--image", img, "--ensemble", str(ens),
                    "--out", str(tmp_path / "o.png")]) == 0


class TestConfigFile:
    def test_config_defaults_with_flag_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_patients": 2, "seed": 5}))
        out = tmp_path / "d"
        assert run(["--config", str(cfg), "synth", "--out", str(out),
                    "--seed", "6"]) == 0
        prov = read_json(out / "provenance.json")
        assert prov["config"]["n_patients"] == 2   # from the config file
        assert prov["seed"] == 6                   # flag wins
