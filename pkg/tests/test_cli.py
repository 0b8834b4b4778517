import csv

import pytest

from sfda.analysis import load_feature_dump
from sfda.cli import main
from sfda.config import AdaptationConfig, load_config

TINY = ["--set", "data.synthetic_samples=32", "--set", "task.bottleneck_dim=16",
        "--set", "stage1.epochs=1", "--set", "stage2.epochs=1", "--set", "stage3.epochs=1",
        "--set", "stage1.batch_size=8", "--set", "stage2.batch_size=8", "--set", "stage3.batch_size=8"]


def run(out, *args):
    return main(["--out-dir", str(out), *TINY, *args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(out, "train-source") == 0
    assert run(out, "adapt-stda", "--source-ckpt", str(out / "checkpoints/source.pt"),
               "--target", "rot_color", "color_blur") == 0
    return out


def test_stage_outputs(trained):
    for rel in ("checkpoints/source.pt", "checkpoints/teacher_rot_color.pt", "reports/stage1.jsonl",
                "reports/stage2_color_blur.jsonl", "banks/rot_color.latest", "config.cfg",
                "figures/stage2_rot_color_accuracy.png", "figures/stage2_rot_color_accuracy.csv"):
        assert (trained / rel).exists(), rel
    rows = read_csv(trained / "summary_stage2.csv")
    assert [r["domain"] for r in rows] == ["rot_color", "color_blur"]
    assert 0 <= float(rows[0]["target_acc"]) <= 1


def test_distill_and_eval(trained):
    assert run(trained, "distill-mtda", "--target", "rot_color", "color_blur") == 0
    assert (trained / "checkpoints/student.pt").exists()
    assert run(trained, "eval", "--ckpt", str(trained / "checkpoints/student.pt"), "--domain", "rot_color") == 0
    rows = read_csv(trained / "summary_eval.csv")
    assert rows[0]["domain"] == "rot_color" and "class_3" in rows[0]


def test_analysis_commands(trained):
    ckpts = [str(trained / "checkpoints/source.pt"), str(trained / "checkpoints/teacher_rot_color.pt")]
    assert run(trained, "a-distance", "--ckpt", *ckpts, "--domain-a", "source", "--domain-b", "rot_color") == 0
    rows = read_csv(trained / "summary_a_distance.csv")
    assert len(rows) == 2 and all(0 <= float(r["a_distance"]) <= 2 for r in rows)
    assert (trained / "figures/a_distance_source_rot_color.png").exists()
    assert run(trained, "export-features", "--ckpt", ckpts[0], "--domain", "source", "--format", "npz") == 0
    assert load_feature_dump(trained / "features/source.npz").features.shape == (32, 16)


def test_ablate(trained):
    assert run(trained, "ablate", "--source-ckpt", str(trained / "checkpoints/source.pt"), "--target", "rot_color",
               "--masks", "none", "NM") == 0
    masks = [r["mask"] for r in read_csv(trained / "summary_ablation.csv")]
    assert masks == ["source-only", "NM"]
    assert (trained / "figures/ablation_rot_color.png").exists()


def test_config_file_and_seed(tmp_path):
    cfg = AdaptationConfig().override(**{"stage1.epochs": 0, "data.synthetic_samples": 16})
    path = cfg.save(tmp_path / "in.cfg")
    assert main(["--config", str(path), "--seed", "7", "--out-dir", str(tmp_path / "o"), "train-source"]) == 0
    saved = load_config(tmp_path / "o/config.cfg")
    assert saved.task.seed == 7 and saved.stage1.epochs == 0


def test_image_folder_round_trip(tmp_path, monkeypatch):
    data = tmp_path / "data"
    assert run(tmp_path / "o", "--data-root", str(data), "make-synthetic") == 0
    assert sorted(p.name for p in data.iterdir()) == ["color_blur", "rot_color", "rot_noise", "source"]
    monkeypatch.setenv("DATA_ROOT", str(data))
    assert run(tmp_path / "o2", "train-source") == 0
    assert read_csv(tmp_path / "o2/summary_stage1.csv")[0]["domain"] == "source"


def test_errors(tmp_path, capsys):
    assert run(tmp_path, "eval", "--ckpt", str(tmp_path / "missing.pt")) == 2
    assert main(["--out-dir", str(tmp_path), "--set", "stage2.batch_size=1", "train-source"]) == 2
    assert main(["--out-dir", str(tmp_path), "--set", "novalue", "train-source"]) == 2
    assert "error:" in capsys.readouterr().err
