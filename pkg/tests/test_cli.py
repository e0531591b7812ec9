import csv
import json
import os

import pytest

from protoseg.cli import main


TINY_CONFIG = {
    "image_size": 16,
    "widths": [4, 8, 8],
    "fused_channels": 16,
    "proj_dim": 8,
    "batch_size": 4,
    "t_max": 50,
    "warmup_steps": 1,
    "ramp_steps": 40,
    "seed": 0,
}


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("clidata"))
    assert main(["gen-data", "--out", root, "--n", "16", "--seed", "4",
                 "--size", "16", "--labeled-fraction", "0.5"]) == 0
    return root


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("cfg") / "config.json")
    with open(path, "w") as fh:
        json.dump(TINY_CONFIG, fh)
    return path


@pytest.fixture(scope="module")
def trained_run(dataset_dir, config_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    code = main(["train", "--config", config_path, "--data", dataset_dir,
                 "--out", out, "--steps", "4"])
    assert code == 0
    return out


class TestGenData:
    def test_layout(self, dataset_dir):
        assert len(os.listdir(os.path.join(dataset_dir, "images"))) == 16
        assert len(os.listdir(os.path.join(dataset_dir, "masks"))) == 16
        assert os.path.exists(os.path.join(dataset_dir, "splits.csv"))

    def test_zero_samples_usage_error(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"), "--n", "0"]) == 2

    def test_bad_class_mode_usage_error(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"), "--n", "2",
                     "--classes", "five-class"]) == 2


class TestTrain:
    def test_outputs(self, trained_run):
        for name in ("losses.csv", "final_metrics.csv", "config.json",
                     "manifest.json"):
            assert os.path.exists(os.path.join(trained_run, name)), name
        assert os.path.exists(os.path.join(trained_run, "checkpoint", "state.pt"))
        with open(os.path.join(trained_run, "losses.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert rows[0]["step"] == "0"
        with open(os.path.join(trained_run, "final_metrics.csv"), newline="") as fh:
            metrics = list(csv.DictReader(fh))
        splits = {r["split"] for r in metrics}
        assert splits == {"val", "test"}

    def test_toggle_override(self, dataset_dir, config_path, tmp_path):
        out = str(tmp_path / "run")
        code = main(["train", "--config", config_path, "--data", dataset_dir,
                     "--out", out, "--steps", "3", "--toggle", "all_unsup=off"])
        assert code == 0
        with open(os.path.join(out, "config.json")) as fh:
            cfg = json.load(fh)
        assert not any(cfg[k] for k in ("use_con", "use_u", "use_aux", "use_pc"))
        with open(os.path.join(out, "losses.csv"), newline="") as fh:
            for row in csv.DictReader(fh):
                assert float(row["l_con"]) == 0.0
                assert float(row["l_pc"]) == 0.0

    def test_bad_toggle_usage_error(self, dataset_dir, config_path, tmp_path):
        code = main(["train", "--config", config_path, "--data", dataset_dir,
                     "--out", str(tmp_path / "run"), "--steps", "1",
                     "--toggle", "l_banana=on"])
        assert code == 2

    def test_unknown_config_key_usage_error(self, dataset_dir, tmp_path):
        bad = str(tmp_path / "bad.json")
        with open(bad, "w") as fh:
            json.dump({"learning_rate": 0.1}, fh)
        code = main(["train", "--config", bad, "--data", dataset_dir,
                     "--out", str(tmp_path / "run"), "--steps", "1"])
        assert code == 2

    def test_resume_continues(self, dataset_dir, config_path, trained_run,
                              tmp_path):
        out = str(tmp_path / "resumed")
        code = main(["train", "--config", config_path, "--data", dataset_dir,
                     "--out", out, "--steps", "2",
                     "--resume", os.path.join(trained_run, "checkpoint")])
        assert code == 0
        with open(os.path.join(out, "losses.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["step"] == "4"


class TestEval:
    def test_eval_checkpoint(self, dataset_dir, trained_run, tmp_path):
        out_csv = str(tmp_path / "metrics.csv")
        code = main(["eval", "--checkpoint", os.path.join(trained_run, "checkpoint"),
                     "--data", dataset_dir, "--split", "test", "--out", out_csv])
        assert code == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["class"] for r in rows] == ["1", "mean"]

    def test_missing_checkpoint(self, dataset_dir, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "nowhere"),
                     "--data", dataset_dir])
        assert code == 1

    def test_bad_split_usage_error(self, dataset_dir, trained_run):
        code = main(["eval", "--checkpoint", os.path.join(trained_run, "checkpoint"),
                     "--data", dataset_dir, "--split", "train"])
        assert code == 2


class TestAblateAndReport:
    def test_ablate_then_report(self, dataset_dir, config_path, trained_run,
                                tmp_path):
        abl_out = str(tmp_path / "abl")
        code = main(["ablate", "--config", config_path, "--data", dataset_dir,
                     "--out", abl_out, "--steps", "2", "--seeds", "0"])
        assert code == 0
        with open(os.path.join(abl_out, "ablation.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6

        rep_out = str(tmp_path / "report")
        code = main(["report", trained_run, abl_out, "--out", rep_out])
        assert code == 0
        plots = os.listdir(os.path.join(rep_out, "plots"))
        assert "consistency_schedule.png" in plots
        assert any(p.startswith("losses_") for p in plots)
        assert os.path.exists(os.path.join(rep_out, "ablation_summary.csv"))

    def test_report_no_runs(self, tmp_path):
        assert main(["report", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "rep")]) == 1

    def test_missing_subcommand_usage_error(self):
        assert main([]) == 2
