import numpy as np
import pytest

from vagnet.cli import build_parser, main
from vagnet.data import read_manifest, read_points
from vagnet.harness import load_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ckpt = root / "data", root / "model.ckpt"
    assert main(["gen-data", "--out", str(data), "--n-per-pair", "1", "--seed", "3"]) == 0
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--epochs", "1", "--batch", "5",
                 "--no-mcam", "--lr", "1e-3"]) == 0
    return root, data, ckpt


def test_gen_data_manifest(workspace):
    _, data, _ = workspace
    entries = read_manifest(data)
    assert len(entries) == 10 + 10 + 4
    assert {e.split for e in entries} == {"seen-train", "seen-eval", "unseen-eval"}


def test_train_writes_checkpoint(workspace, capsys):
    _, _, ckpt = workspace
    ck = load_checkpoint(ckpt)
    assert ck.epoch == 1 and not ck.config.use_mcam and ck.config.lr0 == 1e-3
    assert (ckpt.parent / "model.ckpt.log").exists()


def test_eval_report(workspace, capsys):
    _, data, ckpt = workspace
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--split", "unseen"]) == 0
    lines = capsys.readouterr().out.splitlines()
    keys = [l.split("=")[0] for l in lines]
    assert keys[:5] == ["auc", "aiou", "sim", "mae", "n_samples"]
    assert lines[4] == "n_samples=4"


def test_eval_csv(workspace, capsys):
    _, data, ckpt = workspace
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--csv"]) == 0
    head, row = capsys.readouterr().out.splitlines()
    assert len(head.split(",")) == len(row.split(","))


def test_export(workspace, capsys):
    root, data, ckpt = workspace
    sample_id = read_manifest(data)[0].id
    out = root / "heat.txt"
    assert main(["export", "--ckpt", str(ckpt), "--data", str(data), "--sample", sample_id,
                 "--out", str(out)]) == 0
    pc = read_points(out)
    assert pc.n == 512 and np.all((pc.heatmap > 0) & (pc.heatmap < 1))


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--module", "decoder_loss"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert all(l.startswith("ok ") for l in out[:-1])
    assert out[-1].startswith("worst=") and out[-1].endswith("failed=0")


@pytest.mark.parametrize("argv", [
    ["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent"],
    ["gradcheck", "--module", "nope"],
    ["train", "--data", "/nonexistent", "--out", "/tmp/x.ckpt", "--epochs", "0"],
])
def test_errors_are_one_line(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")


def test_export_unknown_sample(workspace, capsys):
    root, data, ckpt = workspace
    assert main(["export", "--ckpt", str(ckpt), "--data", str(data), "--sample", "nope",
                 "--out", str(root / "x.txt")]) == 2
    assert "KeyError" in capsys.readouterr().err


def test_no_proj_implies_no_mcam():
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o", "--no-proj"])
    assert args.no_proj and not args.no_mcam  # resolved when the config is built
