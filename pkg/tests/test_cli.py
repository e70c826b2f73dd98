import json

import numpy as np
import pytest
import torch

from dualhead.cli import main

TINY = ["--set", "dataset.n=120", "--set", "dataset.test_n=40",
        "--set", "train.epochs=4", "--set", "train.warmup_epochs=1",
        "--set", "train.t_max=3"]


def train_tiny(run_dir, *extra):
    return main(["train", "--config", "desk_blobs", "--run-dir", str(run_dir),
                 *TINY, *extra])


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("cli") / "run"
    assert train_tiny(run_dir) == 0
    return run_dir


def test_train_writes_run_directory(finished_run):
    for name in ("config_snapshot", "metrics.csv", "probs_final.csv",
                 "weights_final.csv", "noise_mask.csv", "checkpoint_final",
                 "manifest.json"):
        assert (finished_run / name).exists(), name
    manifest = json.loads((finished_run / "manifest.json").read_text())
    assert manifest["completed"] is True
    for path in manifest["artifacts"].values():
        assert json.loads(json.dumps(path))  # paths are serializable strings


def test_train_refuses_overwrite_without_force(finished_run, capsys):
    assert train_tiny(finished_run) == 1
    assert "refusing to overwrite" in capsys.readouterr().err


def test_train_force_overwrites(tmp_path):
    run_dir = tmp_path / "force"
    assert train_tiny(run_dir) == 0
    assert train_tiny(run_dir, "--force") == 0


def test_train_set_override_lands_in_snapshot(tmp_path):
    run_dir = tmp_path / "ovr"
    assert train_tiny(run_dir, "--set", "train.lr_init=0.04",
                      "--set", "loss.consistency=0.5") == 0
    snapshot = (run_dir / "config_snapshot").read_text()
    assert "train.lr_init = 0.04" in snapshot
    assert "loss.consistency = 0.5" in snapshot


def test_train_seed_flag_routes_all_seeds(tmp_path):
    run_dir = tmp_path / "seeded"
    assert train_tiny(run_dir, "--seed", "42") == 0
    snapshot = (run_dir / "config_snapshot").read_text()
    assert "train.seed = 42" in snapshot
    assert "dataset.seed = 42" in snapshot
    assert "dataset.noise.seed = 42" in snapshot


def test_train_zero_epochs_is_validation_error(tmp_path, capsys):
    code = main(["train", "--config", "desk_blobs",
                 "--run-dir", str(tmp_path / "r"), "--epochs", "0"])
    assert code == 2
    assert "warmup" in capsys.readouterr().err


def test_train_unknown_config_is_validation_error(tmp_path, capsys):
    code = main(["train", "--config", "no_such_preset",
                 "--run-dir", str(tmp_path / "r")])
    assert code == 2
    assert "no preset" in capsys.readouterr().err


def test_train_unknown_override_key(tmp_path, capsys):
    code = main(["train", "--config", "desk_blobs",
                 "--run-dir", str(tmp_path / "r"),
                 "--set", "train.bogus=1"])
    assert code == 2
    assert "unknown config key" in capsys.readouterr().err


def test_train_resume_completes_interrupted_run(tmp_path):
    from dualhead import config as config_mod
    from dualhead.data import build_dataset
    from dualhead.train import run as train_run

    run_dir = tmp_path / "resume"
    flat = dict(config_mod.PRESETS["desk_blobs"])
    flat.update({"dataset.n": "120", "dataset.test_n": "40",
                 "train.epochs": "4", "train.warmup_epochs": "1",
                 "train.t_max": "3"})
    cfg = config_mod.build_run_config(flat)
    train_set, test_set = build_dataset(cfg.dataset)
    train_run(cfg, train_set, test_set, run_dir=run_dir, stop_after_epoch=1)
    assert not (run_dir / "probs_final.csv").exists()
    assert main(["train", "--resume", "--run-dir", str(run_dir)]) == 0
    assert (run_dir / "probs_final.csv").exists()


def test_detect_default_threshold(finished_run, capsys):
    assert main(["detect", "--run-dir", str(finished_run)]) == 0
    out = capsys.readouterr().out
    assert "threshold=0.3" in out
    assert "precision=" in out
    assert (finished_run / "detect_report.csv").exists()


def test_detect_rerun_needs_force(finished_run, capsys):
    assert main(["detect", "--run-dir", str(finished_run)]) == 1
    assert "refusing to overwrite" in capsys.readouterr().err
    assert main(["detect", "--run-dir", str(finished_run), "--force"]) == 0


def test_detect_missing_dump_fails(tmp_path, capsys):
    assert main(["detect", "--run-dir", str(tmp_path / "nothing")]) == 1
    assert "train first" in capsys.readouterr().err


def test_detect_without_truth_prints_counts_only(tmp_path, capsys):
    run_dir = tmp_path / "untruthed"
    run_dir.mkdir()
    with open(run_dir / "probs_final.csv", "w") as f:
        f.write("index,noisy_label,clean_label,neg_prob_on_noisy_label,"
                "pos_prob_on_noisy_label,pos_pred,corrected_label\n")
        for i, p in enumerate([0.1, 0.9, 0.2, 0.8]):
            f.write(f"{i},0,,{p},{p},0,0\n")
    assert main(["detect", "--run-dir", str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert "flagged 2/4" in out
    assert "metrics unavailable" in out
    assert "precision" not in out
    assert not (run_dir / "detect_report.csv").exists()


def test_detect_requires_run_dir(capsys):
    assert main(["detect"]) == 2
    assert "--run-dir" in capsys.readouterr().err


def test_sweep_writes_rows_and_plot(finished_run):
    assert main(["sweep", "--run-dir", str(finished_run)]) == 0
    lines = (finished_run / "sweep.csv").read_text().splitlines()
    assert lines[0] == "h,precision,recall,f1"
    assert len(lines) == 1 + 19
    assert (finished_run / "sweep_f1.png").exists()
    # idempotent only with --force
    assert main(["sweep", "--run-dir", str(finished_run)]) == 1
    assert main(["sweep", "--run-dir", str(finished_run), "--force"]) == 0


def test_sweep_single_step_matches_detect(finished_run, capsys):
    assert main(["detect", "--run-dir", str(finished_run), "--force",
                 "--threshold", "0.25"]) == 0
    detect_out = capsys.readouterr().out
    f1_detect = float(detect_out.split("f1=")[1].split(" ")[0])
    assert main(["sweep", "--run-dir", str(finished_run), "--force",
                 "--h-min", "0.25", "--h-max", "0.25", "--steps", "1"]) == 0
    lines = (finished_run / "sweep.csv").read_text().splitlines()
    assert len(lines) == 2
    f1_sweep = float(lines[1].split(",")[3])
    assert f1_sweep == pytest.approx(f1_detect, abs=1e-4)


def test_sweep_without_truth_fails(tmp_path, capsys):
    run_dir = tmp_path / "untruthed"
    run_dir.mkdir()
    with open(run_dir / "probs_final.csv", "w") as f:
        f.write("index,noisy_label,clean_label,neg_prob_on_noisy_label,"
                "pos_prob_on_noisy_label,pos_pred,corrected_label\n")
        f.write("0,0,,0.5,0.5,0,0\n")
    assert main(["sweep", "--run-dir", str(run_dir)]) == 1
    assert "clean labels" in capsys.readouterr().err


def test_report_emits_plots_and_summary(finished_run, capsys):
    assert main(["report", "--run-dir", str(finished_run)]) == 0
    report_dir = finished_run / "report"
    for name in ("probability_histogram.png", "loss_curves.png",
                 "accuracy_curves.png", "summary.txt"):
        assert (report_dir / name).exists(), name
    out = capsys.readouterr().out
    assert "final train accuracy" in out
    assert "detection at h=0.3" in out
    assert main(["report", "--run-dir", str(finished_run)]) == 1
    assert main(["report", "--run-dir", str(finished_run), "--force"]) == 0


def test_report_empty_run_dir_fails(tmp_path, capsys):
    assert main(["report", "--run-dir", str(tmp_path / "empty")]) == 1
    assert "train first" in capsys.readouterr().err


def test_convert_sidecar_from_torch_container(tmp_path):
    blob = {"worst_label": np.array([1, 0, 2, 1]), "clean_label": np.zeros(4)}
    src = tmp_path / "labels.pt"
    torch.save(blob, src)
    out = tmp_path / "labels.sidecar"
    assert main(["convert-sidecar", "--input", str(src),
                 "--key", "worst_label", "--output", str(out)]) == 0
    assert out.read_text() == "1\n0\n2\n1\n"


def test_convert_sidecar_missing_key(tmp_path, capsys):
    src = tmp_path / "labels.pt"
    torch.save({"a": np.array([1])}, src)
    code = main(["convert-sidecar", "--input", str(src),
                 "--key", "b", "--output", str(tmp_path / "out")])
    assert code == 2
    assert "available: a" in capsys.readouterr().err


def test_convert_sidecar_from_npy(tmp_path):
    src = tmp_path / "labels.npy"
    np.save(src, np.array([3, 1, 4]))
    out = tmp_path / "out.sidecar"
    assert main(["convert-sidecar", "--input", str(src),
                 "--output", str(out)]) == 0
    assert out.read_text() == "3\n1\n4\n"


def test_convert_sidecar_missing_input(tmp_path, capsys):
    assert main(["convert-sidecar", "--input", str(tmp_path / "nope.npy"),
                 "--output", str(tmp_path / "out")]) == 1


def test_snapshot_fully_determines_the_run(finished_run, tmp_path):
    replay_dir = tmp_path / "replay"
    snapshot = finished_run / "config_snapshot"
    assert main(["train", "--config", str(snapshot),
                 "--run-dir", str(replay_dir)]) == 0

    def rows_without_seconds(p):
        lines = (p / "metrics.csv").read_text().splitlines()
        return [line.rsplit(",", 1)[0] for line in lines]

    assert rows_without_seconds(replay_dir) == rows_without_seconds(finished_run)
    assert (replay_dir / "config_snapshot").read_text() == snapshot.read_text()
