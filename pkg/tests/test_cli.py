"""End-to-end command-line flows on a small generated benchmark."""

import csv
import json

import numpy as np
import pytest

from dgseg.cli import main, parse_config_file
from dgseg.experiments import read_results_csv
from dgseg.network import load_checkpoint


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["gen-data", "--out", str(out), "--domains", "3", "--per-domain", "6", "--seed", "1"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, data_dir):
    ckpt = tmp_path_factory.mktemp("cli") / "model.ckpt"
    log = ckpt.with_suffix(".log.csv")
    rc = main(
        [
            "train", "--data", str(data_dir), "--holdout", "2", "--method", "mldg",
            "--epochs", "1", "--batch-size", "6", "--seed", "0",
            "--log", str(log), "--out", str(ckpt),
        ]
    )
    assert rc == 0
    return ckpt


def test_gen_data_layout(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert [d["id"] for d in manifest["domains"]] == [0, 1, 2]
    assert all(d["count"] == 6 for d in manifest["domains"])
    assert len(list((data_dir / "domain_0").glob("img_*.bin"))) == 6
    assert len(list((data_dir / "domain_0").glob("msk_*.bin"))) == 6


def test_gen_data_rejects_too_many_domains(tmp_path, capsys):
    rc = main(["gen-data", "--out", str(tmp_path / "x"), "--domains", "9"])
    assert rc == 2
    assert "preset styles" in capsys.readouterr().err


def test_train_writes_checkpoint_and_log(checkpoint):
    params = load_checkpoint(checkpoint)
    assert params.config.num_classes == 4
    with open(checkpoint.with_suffix(".log.csv")) as f:
        rows = list(csv.reader(f))
    assert rows[0][:4] == ["step", "epoch", "lr", "L_ds"]
    assert len(rows) > 1


def test_eval_writes_one_results_row(tmp_path, data_dir, checkpoint):
    out = tmp_path / "results.csv"
    rc = main(
        [
            "eval", "--ckpt", str(checkpoint), "--data", str(data_dir), "--holdout", "2",
            "--test", "sib", "--m", "2", "--q", "8",
            "--train-method", "mldg", "--out", str(out),
        ]
    )
    assert rc == 0
    rows = read_results_csv(out)
    assert len(rows) == 1
    row = rows[0]
    assert row["method_train"] == "mldg" and row["method_test"] == "sib"
    assert 0.0 <= float(row["miou"]) <= 1.0
    assert len(row["per_class_ious"].split(";")) == 4


def test_eval_adabn(tmp_path, data_dir, checkpoint):
    out = tmp_path / "adabn.csv"
    rc = main(
        [
            "eval", "--ckpt", str(checkpoint), "--data", str(data_dir), "--holdout", "2",
            "--test", "adabn", "--out", str(out),
        ]
    )
    assert rc == 0
    assert 0.0 <= float(read_results_csv(out)[0]["miou"]) <= 1.0


def test_ablate_grid(tmp_path, data_dir):
    config = tmp_path / "grid.cfg"
    config.write_text(
        "# tiny grid\n"
        f"data = {data_dir}\n"
        "holdout = 2\n"
        "train_methods = agg\n"
        "test_methods = bn, tn\n"
        "seeds = 0, 1\n"
        "epochs = 1\n"
        "batch_size = 6\n"
        "m = 2\n"
    )
    out = tmp_path / "grid_out"
    rc = main(["ablate", "--config", str(config), "--out", str(out)])
    assert rc == 0
    rows = read_results_csv(out / "results.csv")
    assert len(rows) == 4  # 1 train method x 2 seeds x 2 test methods
    with open(out / "summary.csv") as f:
        summary = list(csv.reader(f))
    assert summary[0] == ["method_train", "method_test", "mean_miou", "std_miou"]
    assert len(summary) == 3  # header + 2 cells
    for row in summary[1:]:
        assert 0.0 <= float(row[2]) <= 1.0


def test_ablate_sweep(tmp_path, data_dir):
    config = tmp_path / "sweep.cfg"
    config.write_text(
        f"data = {data_dir}\n"
        "holdout = 2\n"
        "train_methods = agg\n"
        "test_methods = tn\n"
        "seeds = 0\n"
        "epochs = 1\n"
        "batch_size = 6\n"
        "sweep = m\n"
        "sweep_values = 1, 3\n"
    )
    out = tmp_path / "sweep_out"
    rc = main(["ablate", "--config", str(config), "--out", str(out)])
    assert rc == 0
    assert (out / "sweep_m_1.csv").exists() and (out / "sweep_m_3.csv").exists()
    with open(out / "summary.csv") as f:
        summary = list(csv.reader(f))
    assert summary[0][:2] == ["parameter", "value"]
    assert [r[1] for r in summary[1:]] == ["1", "3"]


def test_ablate_requires_data_and_holdout(tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("epochs = 1\n")
    rc = main(["ablate", "--config", str(config), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "data=" in capsys.readouterr().err


def test_inspect_bank_dump(tmp_path, data_dir, checkpoint):
    dump = tmp_path / "bank.csv"
    rc = main(
        [
            "inspect-bank", "--ckpt", str(checkpoint), "--data", str(data_dir),
            "--holdout", "2", "--policy", "sib", "--m", "2", "--q", "4",
            "--limit", "5", "--dump", str(dump),
        ]
    )
    assert rc == 0
    with open(dump) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4  # q caps the bank
    assert [int(r["arrival_index"]) for r in rows] == [1, 2, 3, 4]
    assert all(r["domain_tag"] == "2" for r in rows)
    mu = [float(v) for v in rows[0]["style_mu"].split(";")]
    assert len(mu) == 8  # default style layer 1 on default widths
    assert all(np.isfinite(mu))


def test_parse_config_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\na = 1\nb = x y  # trailing\n")
    assert parse_config_file(str(path)) == {"a": "1", "b": "x y"}
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n")
    with pytest.raises(ValueError):
        parse_config_file(str(bad))


def test_missing_subcommand_exits():
    with pytest.raises(SystemExit):
        main([])
