import json

import numpy as np
import pytest

from policyhash import dataset as D
from policyhash.cli import main
from policyhash.codec import pack_bits
from policyhash.encoder import load_checkpoint
from policyhash.retrieval import CodeDatabase

SMALL = {
    "data": {"classes": 3, "per_class": 30, "dim": 6, "spread": 0.3, "separation": 1.0},
    "split": {"queries_per_class": 5, "train_per_class": 15},
    "train": {"epochs": 3, "pretrain_epochs": 2, "batch_size": 16, "sync_period": 2, "code_bits": 8, "hidden_dims": [8], "learning_rate": 0.05, "eval_every": 1},
    "eval": {"ks": [1, 5, 100]},
}


@pytest.fixture
def run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "run"

    def call(*args, out_dir=out):
        return main([args[0], "--config", str(cfg), "--out", str(out_dir), *args[1:]])

    call.out = out
    return call


def test_generate_default_config(tmp_path):
    assert main(["generate", "--out", str(tmp_path)]) == 0
    data = D.load(tmp_path / "dataset.bin")
    assert data.count == 1000 and data.dim == 32
    echoed = json.loads((tmp_path / "config.generate.json").read_text())
    assert echoed["train"]["learning_rate"] == 0.001 and echoed["out"] == str(tmp_path)


def test_generate_same_seed_identical(run, tmp_path):
    assert run("generate", "--seed", "3") == 0
    assert run("generate", "--seed", "3", out_dir=tmp_path / "again") == 0
    assert (run.out / "dataset.bin").read_bytes() == (tmp_path / "again" / "dataset.bin").read_bytes()


def test_generate_invalid_classes(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"classes": 1}}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) != 0
    assert "error:" in capsys.readouterr().err
    assert (tmp_path / "FAILED.generate").exists()


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochz": 3}}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) != 0


def test_missing_dataset_is_clean_error(run, capsys):
    assert run("train") == 1
    assert "error:" in capsys.readouterr().err
    assert (run.out / "FAILED.train").exists()
    assert not (run.out / "final.ckpt").exists()


def test_flag_overrides_are_echoed(run):
    run("generate", "--seed", "5", "--bits", "12", "--beta", "0.3", "--margin", "1.5", "--sync-period", "7", "--epochs", "9")
    cfg = json.loads((run.out / "config.generate.json").read_text())
    assert cfg["data"]["seed"] == cfg["split"]["seed"] == cfg["train"]["seed"] == 5
    t = cfg["train"]
    assert (t["code_bits"], t["beta"], t["margin"], t["sync_period"], t["epochs"]) == (12, 0.3, 1.5, 7, 9)


def test_train_zero_epochs_equals_pretrained(run):
    assert run("generate") == 0
    assert run("pretrain") == 0
    assert run("train", "--epochs", "0") == 0
    final, _ = load_checkpoint(run.out / "final.ckpt")
    pre, _ = load_checkpoint(run.out / "pretrained.ckpt")
    assert final.max_abs_diff(pre) == 0.0
    assert (run.out / "history.jsonl").read_text() == ""


def test_train_twice_identical(run, tmp_path):
    other = tmp_path / "other"
    for out in (run.out, other):
        assert run("generate", out_dir=out) == 0
        assert run("train", out_dir=out) == 0
    for name in ("history.jsonl", "pretrain_history.jsonl", "final.ckpt", "checkpoints/epoch_0002.ckpt"):
        assert (run.out / name).read_bytes() == (other / name).read_bytes()


@pytest.fixture
def trained(run):
    assert run("generate") == 0
    assert run("train") == 0
    return run


def test_encode_twice_identical_and_count(trained, tmp_path):
    assert trained("encode") == 0
    first = (trained.out / "codes_database.bin").read_bytes()
    assert trained("encode") == 0
    assert (trained.out / "codes_database.bin").read_bytes() == first
    assert len(CodeDatabase.load(trained.out / "codes_database.bin")) == 75
    assert trained("encode", "--split", "query") == 0
    assert len(CodeDatabase.load(trained.out / "codes_query.bin")) == 15


def test_encode_large_split_count(tmp_path):
    out = tmp_path / "big"
    cfg = tmp_path / "big.json"
    doc = json.loads(json.dumps(SMALL))
    doc["data"].update(classes=4, per_class=260)
    doc["split"].update(queries_per_class=10, train_per_class=20)
    doc["train"].update(epochs=0, pretrain_epochs=0)
    cfg.write_text(json.dumps(doc))
    for cmd in ("generate", "train", "encode"):
        assert main([cmd, "--config", str(cfg), "--out", str(out)]) == 0
    assert len(CodeDatabase.load(out / "codes_database.bin")) == 1000


def test_encode_bit_mismatch(trained, capsys):
    assert trained("encode", "--bits", "16") == 1
    assert "8-bit" in capsys.readouterr().err


def test_evaluate_reproduces_logged_train_map(trained):
    assert trained("evaluate", "--queries", "train", "--database", "train") == 0
    metrics = json.loads((trained.out / "metrics.json").read_text())
    last = json.loads((trained.out / "history.jsonl").read_text().splitlines()[-1])
    assert metrics["map"] == last["train_map"]
    assert [row["k"] for row in metrics["p_at_k"]] == [1, 5]
    csv_rows = (trained.out / "metrics.csv").read_text().splitlines()
    assert csv_rows[0] == "query,ap,p_at_h2,p_at_1,p_at_5" and len(csv_rows) == 46


def test_evaluate_default_splits(trained, capsys):
    assert trained("evaluate") == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= summary["map"] <= 1.0 and summary["excluded"] == 0


def save_codes(path, bits, labels):
    CodeDatabase(pack_bits(np.asarray(bits)), labels).save(path)
    return str(path)


def test_evaluate_identical_codes_single_class(run, tmp_path):
    bits = np.tile(np.random.default_rng(0).integers(0, 2, size=8), (10, 1))
    q = save_codes(tmp_path / "q.bin", bits[:3], [{0}] * 3)
    db = save_codes(tmp_path / "db.bin", bits, [{0}] * 10)
    assert run("evaluate", "--query-codes", q, "--db-codes", db) == 0
    assert json.loads((run.out / "metrics.json").read_text())["map"] == 1.0


def test_evaluate_random_codes_chance_level(run, tmp_path):
    rng = np.random.default_rng(1)
    c = 4
    db_labels = [{i % c} for i in range(2000)]
    q = save_codes(tmp_path / "q.bin", rng.integers(0, 2, size=(200, 16)), [{i % c} for i in range(200)])
    db = save_codes(tmp_path / "db.bin", rng.integers(0, 2, size=(2000, 16)), db_labels)
    assert run("evaluate", "--query-codes", q, "--db-codes", db) == 0
    value = json.loads((run.out / "metrics.json").read_text())["map"]
    assert abs(value - 1 / c) < 0.02


def test_evaluate_reports_orphan_queries(run, tmp_path):
    q = save_codes(tmp_path / "q.bin", np.zeros((2, 4)), [{0}, {5}])
    db = save_codes(tmp_path / "db.bin", np.zeros((3, 4)), [{0}, {0}, {1}])
    assert run("evaluate", "--query-codes", q, "--db-codes", db) == 0
    doc = json.loads((run.out / "metrics.json").read_text())
    assert doc["excluded_queries"] == [1] and doc["num_excluded"] == 1


def test_failed_marker_cleared_on_success(run):
    (run.out).mkdir(parents=True)
    (run.out / "FAILED.generate").write_text("old\n")
    assert run("generate") == 0
    assert not (run.out / "FAILED.generate").exists()
