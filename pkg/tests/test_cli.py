import csv
import json
import shutil

import numpy as np
import pytest

from bsvit.cli import adjacency_pbm, main, parse_count, parse_levels
from bsvit.cli import UsageError

FAST = ["--override", "epochs=2", "--override", "samples=48", "--override", "dim=16", "--override", "batch_size=24"]


def test_train_twice_identical(tmp_path):
    for run in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / run), "--seed", "1", *FAST]) == 0
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "checkpoint" / "manifest.json").exists()


def test_override_echoed(tmp_path):
    assert main(["train", "--out", str(tmp_path), *FAST, "--override", "mask_enabled=false"]) == 0
    cfg = json.loads((tmp_path / "effective_config.json").read_text())
    assert cfg["model"]["mask_enabled"] is False and cfg["train"]["epochs"] == 2


def test_config_file_and_bad_field(tmp_path, capsys):
    cfg = tmp_path / "toy.json"
    cfg.write_text(json.dumps({"version": 1, "model": {"dim": 12}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "dim" in capsys.readouterr().err
    cfg.write_text(json.dumps({"model": {"depthh": 2}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "depthh" in capsys.readouterr().err


def test_missing_data_path(tmp_path, capsys):
    assert main(["train", "--dataset", "cifar", "--out", str(tmp_path)]) == 2
    assert "--data-path" in capsys.readouterr().err


def test_eval_matches_training_accuracy(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--seed", "3", *FAST]) == 0
    final = json.loads((out / "final_metrics.json").read_text())
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--out", str(tmp_path / "ev"),
                 "--seed", "3", *FAST]) == 0
    report = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert report["accuracy"] == final["eval_acc"]
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--out", str(tmp_path / "ev2"),
                 "--seed", "3", "--shuffle", "7", *FAST]) == 0
    assert json.loads((tmp_path / "ev2" / "eval.json").read_text())["accuracy"] == report["accuracy"]
    rows = list(csv.DictReader((tmp_path / "ev" / "per_class.csv").open()))
    assert sum(int(r["total"]) for r in rows) == report["n"]


def test_eval_mismatch_and_empty(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *FAST]) == 0
    cfg = tmp_path / "other.json"
    cfg.write_text(json.dumps({"model": {"dim": 32}}))
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--config", str(cfg),
                 "--out", str(tmp_path / "e")]) == 2
    empty = tmp_path / "events"
    empty.mkdir()
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--dataset", "events",
                 "--data-path", str(empty), "--out", str(tmp_path / "e2")]) == 1


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


def test_energy_replay(tmp_path, capsys):
    assert main(["energy", "--sops", "178.78M", "--signs", "0.22M", "--out", str(tmp_path)]) == 0
    assert "14.58uJ" in capsys.readouterr().out
    rep = json.loads((tmp_path / "energy.json").read_text())
    assert rep["energy_uj"] == pytest.approx(14.58, abs=0.01)


def test_energy_measured_mask_comparison(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *FAST, "--override", "height=32", "--override", "width=32"]) == 0
    assert main(["energy", "--checkpoint", str(out / "checkpoint"), "--compare-mask", "--out",
                 str(tmp_path / "en"), "--override", "limit=3", "--override", "samples=8"]) == 0
    rep = json.loads((tmp_path / "en" / "energy.json").read_text())["runs"]
    assert rep["masked"]["n_sop"] <= rep["unmasked"]["n_sop"]
    assert (tmp_path / "en" / "energy.svg").read_text().startswith("<svg")


def test_energy_zero_weights_model(tmp_path):
    from bsvit.data import load_tensors, save_tensors
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *FAST]) == 0
    ck = out / "checkpoint"
    tensors = {k: np.zeros_like(v) if k.endswith("weight") else v for k, v in load_tensors(ck).items()}
    save_tensors(ck, tensors)
    assert main(["energy", "--checkpoint", str(ck), "--out", str(tmp_path / "en"), "--override", "limit=2"]) == 0
    run = json.loads((tmp_path / "en" / "energy.json").read_text())["runs"]["model"]
    assert run["n_sop"] == 0 and run["n_mac"] > 0


def test_sweep_levels(tmp_path):
    assert main(["sweep-burst", "--levels", "1", "--out", str(tmp_path), *FAST]) == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert len(rows) == 1 and rows[0]["burst_level"] == "1"
    assert main(["sweep-burst", "--levels", "2,2", "--out", str(tmp_path)]) == 2


def test_parse_helpers():
    assert parse_levels("1,2,5") == [1, 2, 5]
    for bad in ("0,1", "1,1", "", "a"):
        with pytest.raises(UsageError):
            parse_levels(bad)
    assert parse_count("0.22M") == pytest.approx(220000)
    assert parse_count("1500") == 1500


def test_adjacency_dump(tmp_path):
    path = tmp_path / "adj.pbm"
    assert main(["adjacency-dump", "--grid", "3x3", "--out", str(path)]) == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "P1"
    header = json.loads(lines[1][2:])
    assert header == {"grid_h": 3, "grid_w": 3, "nnz": 49}
    assert lines[2] == "9 9"
    bits = np.array([[int(v) for v in row.split()] for row in lines[3:]])
    assert (bits == bits.T).all() and bits.sum() == 49
    assert main(["adjacency-dump", "--grid", "3by3"]) == 2
    assert adjacency_pbm(1, 1).splitlines()[-1] == "1"


def test_bench(tmp_path):
    assert main(["bench", "--out", str(tmp_path), "--repeat", "1", "--override", "dim=16"]) == 0
    assert "inference_ms" in json.loads((tmp_path / "bench.json").read_text())


def test_events_dataset(tmp_path, fixtures_dir):
    folder = tmp_path / "ev"
    folder.mkdir()
    for i in range(4):
        shutil.copy(fixtures_dir / "events_8x8.txt", folder / f"{i % 2}_{i}.txt")
    over = ["--override", "in_channels=2", "--override", "height=8", "--override", "width=8",
            "--override", "stem_pools=1"]
    assert main(["train", "--dataset", "events", "--data-path", str(folder), "--out", str(tmp_path / "o"),
                 *FAST, *over]) == 0


def test_cifar_dataset(tmp_path, fixtures_dir):
    over = ["--override", "in_channels=3", "--override", "height=32", "--override", "width=32",
            "--override", "num_classes=10"]
    assert main(["train", "--dataset", "cifar", "--data-path", str(fixtures_dir / "cifar5.bin"),
                 "--out", str(tmp_path), *FAST, *over]) == 0


def test_usage_errors():
    assert main([]) == 2
    assert main(["train", "--override", "noequals"]) == 2


@pytest.mark.slow
def test_sweep_non_degradation_band(tmp_path):
    assert main(["sweep-burst", "--levels", "1,2,5", "--out", str(tmp_path), "--override", "epochs=10"]) == 0
    acc = {r["burst_level"]: r["accuracy"] for r in json.loads((tmp_path / "sweep.json").read_text())}
    assert len(acc) == 3
    assert all(acc[level] >= acc[1] - 0.01 for level in (2, 5))
