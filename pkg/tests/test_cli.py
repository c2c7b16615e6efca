import filecmp
import os

import numpy as np
import pytest

from frcnn.geometry import read_boxes
from frcnn.harness.cli import main
from frcnn.net import load_checkpoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--n-train", "8", "--n-test", "3",
                 "--seed", "2"]) == 0
    assert main(["train", "--data", str(root / "data" / "train.tsv"), "--out", str(root / "ck"),
                 "--iterations", "40", "--step-iter", "30"]) == 0
    return root


def test_gen_data_deterministic(tmp_path, workdir):
    assert main(["gen-data", "--out", str(tmp_path), "--n-train", "8", "--n-test", "3", "--seed", "2"]) == 0
    for name in ("train.tsv", "test.tsv", "synthetic.json"):
        assert filecmp.cmp(tmp_path / name, workdir / "data" / name, shallow=False)
    assert filecmp.cmp(tmp_path / "train" / "train00003.fm.bin",
                       workdir / "data" / "train" / "train00003.fm.bin", shallow=False)


def test_train_outputs(workdir, capsys):
    net, norm, state, meta = load_checkpoint(workdir / "ck")
    assert net.num_classes == 4 and norm is not None and state.iteration == 40
    assert meta["run"]["mode"] == "multitask"
    assert len((workdir / "ck" / "loss.tsv").read_text().splitlines()) == 41


def test_detect_and_eval(workdir, capsys):
    out = workdir / "dets"
    assert main(["detect", "--checkpoint", str(workdir / "ck"), "--data",
                 str(workdir / "data" / "test.tsv"), "--out", str(out), "--nms-threshold", "0.3"]) == 0
    files = sorted(os.listdir(out))
    assert files == [f"test0000{i}.txt" for i in range(3)]
    boxes, labels, scores = read_boxes(out / files[0])
    assert labels is not None and scores is not None and np.all((scores >= 0) & (scores <= 1))
    capsys.readouterr()
    assert main(["eval", "--detections", str(out), "--data", str(workdir / "data" / "test.tsv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "class\tAP"
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["1", "2", "3", "4", "mAP"]


def test_detect_pyramid(workdir):
    assert main(["detect", "--checkpoint", str(workdir / "ck"), "--data", str(workdir / "data" / "test.tsv"),
                 "--out", str(workdir / "dets_pyr"), "--scale", "pyramid", "--bbox-reg", "no"]) == 0


def test_eval_missing_file_is_an_error(workdir, tmp_path, capsys):
    assert main(["eval", "--detections", str(tmp_path), "--data", str(workdir / "data" / "test.tsv")]) == 1
    assert "no detection file" in capsys.readouterr().err


def test_compress(workdir, capsys):
    out = workdir / "ck_svd"
    assert main(["compress", "--checkpoint", str(workdir / "ck"), "--layer", "fc6", "--t", "8",
                 "--out", str(out)]) == 0
    net, _, _, meta = load_checkpoint(out)
    assert [layer.name for layer in net.trunk] == ["fc6_L", "fc6_U", "fc7"]
    assert net.trunk[0].W.shape[0] == 8 and meta["compressed"]["t"] == 8
    assert main(["compress", "--checkpoint", str(workdir / "ck"), "--layer", "nope", "--t", "8",
                 "--out", str(workdir / "bad")]) == 1


def test_bench_svd_small(capsys):
    assert main(["bench-svd", "--u", "64", "--v", "64", "--t", "4", "--rois", "50",
                 "--repeats", "3", "--method", "lapack"]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    assert float(out["flop_ratio"]) == 0.125
    assert float(out["speedup"]) > 0


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("smooth_l1", "cls_loss", "loc_loss", "fc_layer", "roi_pool", "end_to_end"):
        assert name in out


def test_ablate_command(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FRCNN_THREADS", "1")
    report = tmp_path / "table.tsv"
    assert main(["ablate", "--seeds", "3", "--iterations", "4", "--stage2-iterations", "4",
                 "--n-train", "4", "--n-test", "2", "--out", str(report)]) == 0
    header = report.read_text().splitlines()[0].split("\t")
    assert header == ["seed", "cls-only", "multitask-no-bbox", "stage-wise", "multitask"]
    assert main(["ablate", "--seeds", "2"]) == 1


def test_unknown_flag_exits_2(capsys):
    assert main(["train", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_missing_required_reports_error(capsys):
    assert main(["train"]) == 1
    assert "--data" in capsys.readouterr().err


def test_bad_paths_report_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err
