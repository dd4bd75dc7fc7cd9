import csv

import pytest

from acelt.cli import main

TINY = [
    "--num-classes", "6", "--dim", "3", "--n-max", "30", "--imbalance", "6",
    "--hidden", "4", "--epochs", "2", "--batch-size", "16", "--test-per-class", "5",
]


def test_inspect_prints_assignment_table(capsys):
    assert main(["inspect", "--num-classes", "6", "--experts", "3", "--n-max", "100"]) == 0
    out = capsys.readouterr().out
    assert "seed = 0" in out
    assert "1       {1..6}           {}" in out
    assert "2       {3..6}           {1..2}" in out
    assert "3       {5..6}           {1..4}" in out


def test_train_then_evaluate_round_trip(tmp_path, capsys):
    out_dir = tmp_path / "run"
    assert main(["train", *TINY, "--seed", "4", "--output-dir", str(out_dir)]) == 0
    trained = capsys.readouterr().out
    assert "seed = 4" in trained
    for name in ("checkpoint.npz", "train_log.jsonl", "metrics.csv", "config.txt"):
        assert (out_dir / name).exists()
    assert len((out_dir / "train_log.jsonl").read_text().splitlines()) == 2

    again = tmp_path / "again.csv"
    assert main(["evaluate", str(out_dir / "checkpoint.npz"), "--out", str(again)]) == 0
    assert (out_dir / "metrics.csv").read_text() == again.read_text()
    evaluated = capsys.readouterr().out
    assert trained.splitlines()[1:6] == evaluated.splitlines()[1:6]


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("num_classes = 4\nexperts = 2\nseed = 7\n")
    assert main(["inspect", "--config", str(cfg), "--experts", "4", "--n-max", "80"]) == 0
    out = capsys.readouterr().out
    assert "seed = 7" in out and "experts 4" in out


def test_generate_writes_files(tmp_path):
    out_dir = tmp_path / "data"
    assert main(["generate", *TINY, "--output-dir", str(out_dir)]) == 0
    with open(out_dir / "test.csv") as fh:
        assert len(list(csv.reader(fh))) == 6 * 5  # headerless feature,...,label rows
    assert (out_dir / "profile.json").exists()


def test_ablate_three_cells(tmp_path):
    out_dir = tmp_path / "grid"
    args = ["ablate", *TINY, "--output-dir", str(out_dir), "--variants", "ace,no_com,ssc",
            "--schemes", "linear", "--seeds", "0"]
    assert main(args) == 0
    with open(out_dir / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_bad_input_exits_nonzero(capsys, tmp_path):
    assert main(["inspect", "--experts", "0"]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["inspect", "--epochs", "lots"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 1\n")
    assert main(["inspect", "--config", str(bad)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["inspect", "--no-such-flag", "1"])
    assert exc.value.code != 0
