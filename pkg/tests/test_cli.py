import json
from pathlib import Path

import numpy as np
import pytest

from dare.cli import main


def run(args: list[str]) -> int:
    return main(args)


@pytest.fixture(scope="module")
def fmv_dataset(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("fmv")
    assert run(["synth", "--classes", "4", "--per-class", "32", "--mode", "fmv",
                "--dim", "8", "--margin", "4", "--seed", "7",
                "--out", str(out)]) == 0
    return out / "dataset.dfmv"


@pytest.fixture(scope="module")
def image_archive(tmp_path_factory):
    """Synthetic stereo image set plus a tree trained on mininet features."""
    data_dir = tmp_path_factory.mktemp("imgdata")
    assert run(["synth", "--classes", "2", "--per-class", "8", "--mode", "images",
                "--side", "32", "--seed", "5", "--out", str(data_dir)]) == 0
    archive = tmp_path_factory.mktemp("archive")
    assert run(["train", "--data", str(data_dir / "manifest.csv"),
                "--mode", "images", "--backbone", "mininet",
                "--backbone-seed", "3", "--topology", "mini2",
                "--hidden", "16", "--dropout", "0.5", "--lr", "0.01",
                "--epochs", "15", "--seed", "11", "--out", str(archive)]) == 0
    return data_dir, archive


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_writes_dataset_and_manifest(fmv_dataset):
    assert fmv_dataset.exists()
    run_manifest = json.loads((fmv_dataset.parent / "run_manifest.json").read_text())
    assert run_manifest["command"] == "synth"
    assert run_manifest["seed"] == 7
    assert str(fmv_dataset) in run_manifest["outputs"]


def test_synth_missing_out_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["synth", "--classes", "2"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_synth_is_byte_deterministic(tmp_path):
    flags = ["synth", "--classes", "3", "--per-class", "5", "--mode", "fmv",
             "--dim", "6", "--margin", "2", "--seed", "9"]
    assert run(flags + ["--out", str(tmp_path / "a")]) == 0
    assert run(flags + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "dataset.dfmv").read_bytes()
    b = (tmp_path / "b" / "dataset.dfmv").read_bytes()
    assert a == b


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_dare20_writes_eleven_node_files(tmp_path):
    data = tmp_path / "data"
    assert run(["synth", "--classes", "20", "--per-class", "6", "--mode", "fmv",
                "--dim", "8", "--margin", "4", "--seed", "2",
                "--out", str(data)]) == 0
    out = tmp_path / "archive"
    assert run(["train", "--data", str(data / "dataset.dfmv"),
                "--topology", "dare20", "--hidden", "16", "--epochs", "2",
                "--lr", "0.01", "--seed", "1", "--out", str(out)]) == 0
    weight_files = sorted(p.name for p in (out / "nodes").glob("*.weights"))
    assert len(weight_files) == 11
    assert "RootNet.weights" in weight_files
    losses = (out / "losses.csv").read_text().strip().splitlines()
    assert losses[0] == "node,epoch,mean_loss"
    assert len(losses) == 1 + 11 * 2  # two epochs per node


def test_train_uncovered_label_exits_3(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["synth", "--classes", "4", "--per-class", "3", "--mode", "fmv",
                "--dim", "4", "--margin", "2", "--seed", "0",
                "--out", str(data)]) == 0
    code = run(["train", "--data", str(data / "dataset.dfmv"),
                "--topology", "mini2", "--epochs", "1",
                "--out", str(tmp_path / "x")])
    assert code == 3
    assert "UncoveredLabel" in capsys.readouterr().err


def test_train_is_byte_deterministic(tmp_path):
    data = tmp_path / "data"
    assert run(["synth", "--classes", "2", "--per-class", "6", "--mode", "fmv",
                "--dim", "6", "--margin", "3", "--seed", "4",
                "--out", str(data)]) == 0
    flags = ["train", "--data", str(data / "dataset.dfmv"), "--topology", "mini2",
             "--hidden", "8", "--epochs", "3", "--lr", "0.01", "--seed", "6"]
    assert run(flags + ["--out", str(tmp_path / "a")]) == 0
    assert run(flags + ["--out", str(tmp_path / "b")]) == 0
    for rel in ("nodes/Root.weights", "losses.csv", "topology.json", "manifest.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_stub_prints_prevalence(fmv_dataset, tmp_path, capsys):
    assert run(["eval", "--data", str(fmv_dataset), "--stub-constant", "0",
                "--kfold", "2", "--seed", "0", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "CCR 25.00" in out
    assert "macro-F1" in out
    lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 4 + 1  # header + 4 classes + summary


def test_eval_kfold_on_separable_data(fmv_dataset, tmp_path, capsys):
    topo = {
        "root": "r",
        "nodes": [{
            "id": "r",
            "branches": [{"leaf": n} for n in ("start", "up", "end", "here")],
            "groups": [[n] for n in ("start", "up", "end", "here")],
        }],
    }
    topo_path = tmp_path / "flat4.json"
    topo_path.write_text(json.dumps(topo))
    assert run(["eval", "--data", str(fmv_dataset), "--topology", str(topo_path),
                "--kfold", "3", "--hidden", "16", "--batch-size", "8",
                "--epochs", "40", "--lr", "0.01",
                "--seed", "3", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    ccr = float(out.split("CCR ")[1].split()[0])
    assert ccr >= 95.0
    assert (tmp_path / "o" / "boxstats.csv").exists()


def test_eval_holdout_with_archive(image_archive, tmp_path, capsys):
    data_dir, archive = image_archive
    assert run(["eval", "--data", str(data_dir / "manifest.csv"),
                "--mode", "images", "--backbone", "mininet",
                "--backbone-seed", "3", "--archive", str(archive),
                "--seed", "0", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    ccr = float(out.split("CCR ")[1].split()[0])
    assert ccr >= 90.0  # scoring the training pairs back


def test_eval_is_byte_deterministic(fmv_dataset, tmp_path, capsys):
    flags = ["eval", "--data", str(fmv_dataset), "--stub-constant", "1",
             "--kfold", "2", "--seed", "5"]
    assert run(flags + ["--out", str(tmp_path / "a")]) == 0
    assert run(flags + ["--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    for rel in ("metrics.csv", "boxstats.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def test_predict_recovers_generating_label(image_archive, capsys):
    data_dir, archive = image_archive
    from dare.dataio import load_manifest
    manifest = load_manifest(data_dir / "manifest.csv")
    hits = 0
    for sample in manifest.samples:
        assert run(["predict", "--left", str(data_dir / sample.left),
                    "--right", str(data_dir / sample.right),
                    "--archive", str(archive)]) == 0
        line = capsys.readouterr().out.strip()
        label, path, probs = line.split("\t")
        assert path.startswith("Root")
        assert len(probs.split(",")) == 2
        hits += label == sample.label
    assert hits >= int(0.9 * len(manifest.samples))


def test_predict_resizes_mismatched_input(image_archive, tmp_path, capsys):
    data_dir, archive = image_archive
    from dare.dataio import decode_image, encode_ppm
    from dare.dataio import load_manifest
    sample = load_manifest(data_dir / "manifest.csv").samples[0]
    big = np.repeat(np.repeat(decode_image(data_dir / sample.left).pixels, 2, 0), 2, 1)
    left = tmp_path / "big_L.ppm"
    right = tmp_path / "big_R.ppm"
    encode_ppm(big, left)
    encode_ppm(np.roll(big, 2, axis=1), right)
    assert run(["predict", "--left", str(left), "--right", str(right),
                "--archive", str(archive)]) == 0
    assert "\t" in capsys.readouterr().out


def test_predict_missing_right_exits_2(image_archive, tmp_path, capsys):
    data_dir, archive = image_archive
    from dare.dataio import load_manifest
    sample = load_manifest(data_dir / "manifest.csv").samples[0]
    code = run(["predict", "--left", str(data_dir / sample.left),
                "--right", str(tmp_path / "nope.ppm"), "--archive", str(archive)])
    assert code == 2
    assert "not found" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def test_bench_reports_stages(image_archive, capsys):
    data_dir, archive = image_archive
    assert run(["bench", "--archive", str(archive),
                "--data", str(data_dir / "manifest.csv"), "--reps", "20"]) == 0
    out = capsys.readouterr().out
    for stage in ("decode", "resize", "extract", "route"):
        assert f"stage {stage}" in out
    for line in out.splitlines():
        if "median" in line and "p95" in line:
            median = float(line.split("median")[1].split("ms")[0])
            p95 = float(line.split("p95")[1].split("ms")[0])
            assert median <= p95 + 1e-9


def test_bench_single_rep_warns(image_archive, capsys):
    data_dir, archive = image_archive
    assert run(["bench", "--archive", str(archive),
                "--data", str(data_dir / "manifest.csv"), "--reps", "1"]) == 0
    assert "degenerate" in capsys.readouterr().err


def test_bench_medians_are_stable(image_archive, capsys):
    data_dir, archive = image_archive

    def total_median() -> float:
        assert run(["bench", "--archive", str(archive),
                    "--data", str(data_dir / "manifest.csv"), "--reps", "50"]) == 0
        out = capsys.readouterr().out
        line = next(l for l in out.splitlines() if l.startswith("total"))
        return float(line.split("median")[1].split("ms")[0])

    a, b = total_median(), total_median()
    assert abs(a - b) <= 0.5 * max(a, b)


# ---------------------------------------------------------------------------
# defaults
# ---------------------------------------------------------------------------

def test_train_flag_defaults():
    from dare.cli import build_parser
    args = build_parser().parse_args(
        ["train", "--data", "x", "--out", "y"])
    assert args.lr == 0.001
    assert args.momentum == 0.9
    assert args.batch_size == 32
    assert args.epochs == 50
    assert args.hidden == "4096,4096"
    assert args.dropout == 0.5
