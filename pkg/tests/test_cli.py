import json
from pathlib import Path

import pytest

from dvoxres import gradcheck as gc
from dvoxres.cli import main
from dvoxres.evaluation import CvReport

TINY = {
    "data": {"synth": {"n_per_class": 6, "seed": 1}},
    "model": {"widths": [2, 2, 4, 4, 4, 4]},
    "train": {"epochs": 1, "batch_size": 4},
    "eval": {"k": 2, "repeats": 1},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


def snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(Path(directory).rglob("*")) if p.is_file()}


def test_gradcheck_filtered(capsys):
    assert main(["gradcheck", "--ops", "deformable_conv3d", "--trials", "1"]) == 0
    out = capsys.readouterr().out
    rows = [l for l in out.splitlines() if l.startswith("deformable_conv3d")]
    assert [r.split()[1] for r in rows] == ["x", "weight", "bias", "offset_weight", "offset_bias"]
    assert "5/5" in out


def test_gradcheck_perturbed_backward_fails(monkeypatch, capsys):
    real = gc.relu_backward
    monkeypatch.setattr(gc, "relu_backward", lambda g, x: 1.05 * real(g, x))
    assert main(["gradcheck", "--ops", "relu", "--trials", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_unknown_op(capsys):
    assert main(["gradcheck", "--ops", "softmax"]) == 2
    assert "softmax" in capsys.readouterr().err


def test_usage_and_io_exit_codes(tmp_path, capsys):
    assert main(["ablate", "7 ; -", "--out", str(tmp_path)]) == 2
    assert main(["bench"]) == 2
    assert main(["bench", "--sizes", "512:64:5"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"widht": 3}}))
    assert main(["train", "--config", str(bad)]) == 2
    assert "model.widht" in capsys.readouterr().err
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps({"data": {"manifest": str(tmp_path / "nowhere.tsv")}}))
    assert main(["train", "--config", str(manifest), "--out", str(tmp_path / "o")]) == 3
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_gen_data_train_eval_pipeline(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(config), "--out", str(out)]) == 0
    manifest = out / "data" / "manifest.tsv"
    assert len(manifest.read_text().splitlines()) == 12

    from_files = tmp_path / "files.json"
    doc = dict(TINY, data={"manifest": str(manifest)})
    from_files.write_text(json.dumps(doc))
    assert main(["train", "--config", str(from_files), "--out", str(out)]) == 0
    assert (out / "model.ckpt").exists() and (out / "train_log.csv").exists()
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["data"]["manifest"] == str(manifest) and resolved["out"] == str(out)

    assert main(["eval", "--config", str(from_files), "--out", str(out)]) == 0
    assert CvReport.read_csv(out / "cv_report.csv").scores.shape == (1, 2)

    ft = tmp_path / "ft"
    doc["model"] = dict(TINY["model"], deform_conv_idx=[4])
    from_files.write_text(json.dumps(doc))
    assert main(["eval", "--config", str(from_files), "--out", str(ft), "--checkpoint", str(out / "model.ckpt")]) == 0
    assert (ft / "transfer_auc.csv").exists() and (ft / "cv_report.csv").exists()
    assert "fine-tuned" in capsys.readouterr().out


def test_ablate_table(tmp_path, config, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "- ; -", "4 ; 2", "--config", str(config), "--out", str(out)]) == 0
    table = (out / "ablation.md").read_text().splitlines()
    assert len(table) == 4
    assert table[2].startswith("| - ; - |") and "reference" in table[2]
    assert table[3].startswith("| 4 ; 2 |")
    assert (out / "ablation.csv").exists()
    assert (out / "cv_none_none.csv").exists() and (out / "cv_4_2.csv").exists()
    assert "reference" in capsys.readouterr().out


def test_bench_table(tmp_path, capsys):
    assert main(["bench", "--sizes", "6:2:3", "6:2:5", "--repeats", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert [l.split(",")[3] for l in lines[1:]] == ["81", "375"]


@pytest.mark.parametrize("argv", [["gen-data"], ["train"], ["eval"], ["ablate", "- ; -", "4 ; -"]])
def test_rerun_is_bitwise_identical(tmp_path, config, argv):
    out = tmp_path / "det"
    cmd = argv + ["--config", str(config), "--out", str(out), "--seed", "5", "--threads", "1"]
    assert main(cmd) == 0
    first = snapshot(out)
    assert main(cmd) == 0
    assert snapshot(out) == first


def test_seed_flag_changes_outputs(tmp_path, config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", str(config), "--out", str(a), "--seed", "1"]) == 0
    assert main(["gen-data", "--config", str(config), "--out", str(b), "--seed", "2"]) == 0
    assert (a / "data" / "sub-0000.vol").read_bytes() != (b / "data" / "sub-0000.vol").read_bytes()
