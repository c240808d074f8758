import json
from pathlib import Path

import numpy as np
import pytest

from metalora import adapters, cli
from metalora.data import transform_distance
from metalora.evaluation import table1_lineup
from metalora.serialization import read_tensor
from metalora.tensor_core import DenseTensor

TINY = {
    "tasks": {"num_tasks": 2, "train_per_class": 6, "test_per_class": 6, "pretrain_per_class": 10},
    "optim": {"lr": 0.05, "batch_size": 8, "epochs": 3},
    "pretrain": {"epochs": 3},
    "seeds": [0],
}


def _config(tmp_path, name="cfg.json", **changes):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(changes)
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_verify_filter(tmp_path, capsys):
    assert cli.main(["verify", "--filter", "tensor_core", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert report["passed"] and report["suites"]
    assert {s["module"] for s in report["suites"]} == {"tensor_core"}
    assert "max_err=" in (tmp_path / "verify_report.txt").read_text()


def test_verify_unknown_module(tmp_path):
    assert cli.main(["verify", "--filter", "nope", "--out", str(tmp_path)]) != 0


def test_verify_catches_sign_flip_in_tr_delta(tmp_path, monkeypatch, capsys):
    honest = adapters.meta_tr_delta
    monkeypatch.setattr(adapters, "meta_tr_delta", lambda ad, C: DenseTensor._wrap(-honest(ad, C).array))
    assert cli.main(["verify", "--filter", "adapters", "--out", str(tmp_path)]) != 0
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert report["failed_suites"][0] == "adapters.meta_tr_bruteforce"
    assert "adapters.meta_tr_bruteforce" in capsys.readouterr().err


def test_gen_data_is_deterministic_and_counted(tmp_path):
    cfg = _config(tmp_path, tasks={"num_tasks": 2, "train_per_class": 10, "test_per_class": 10, "pretrain_per_class": 5})
    before = cfg.read_bytes()
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    first = _tree(out)
    for p in sorted(out.rglob("*"), reverse=True):
        p.unlink() if p.is_file() else p.rmdir()
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert _tree(out) == first
    assert cfg.read_bytes() == before

    index = json.loads((out / "index.json").read_text())
    train = [e for e in index["samples"] if e["split"] == "train"]
    assert len(train) == 2 * 10 * 2 and index["counts"]["train"] == 40
    assert not (out / cli.MARKER).exists()
    x = read_tensor(out / train[0]["file"])
    assert x.shape == (8, 8, 3)
    margin = index["config"]["tasks"]["margin"]
    tfs = {e["task"]: e["transform"] for e in index["samples"]}
    for a in tfs:
        for b in tfs:
            if a != b:
                assert transform_distance(tfs[a], tfs[b]) >= margin


def test_train_zero_lr_is_flat(tmp_path):
    cfg = _config(tmp_path, adapter={"variant": "conv_lora", "rank": 2})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--lr", "0"]) == 0
    rep = json.loads((tmp_path / "run" / "report.json").read_text())
    assert len(set(rep["train"]["loss_curve"])) == 1 and len(rep["train"]["loss_curve"]) == 4
    assert rep["config"]["optim"]["lr"] == 0.0
    assert (tmp_path / "run" / "report.csv").read_text().startswith("epoch,loss\n")
    assert not (tmp_path / "run" / cli.MARKER).exists()
    assert "created_utc" in json.loads((tmp_path / "run" / "metadata.json").read_text())


def test_train_mapping_blobs_only_for_meta(tmp_path):
    meta = _config(tmp_path, "m.json", adapter={"variant": "conv_meta_cp", "rank": 2})
    static = _config(tmp_path, "s.json", adapter={"variant": "lora", "rank": 2, "target": "head"})
    assert cli.main(["train", "--config", str(meta), "--out", str(tmp_path / "m")]) == 0
    assert cli.main(["train", "--config", str(static), "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "m" / "checkpoint" / "mapping_net" / "W0").exists()
    assert not (tmp_path / "s" / "checkpoint" / "mapping_net").exists()


def test_train_resume_matches_uninterrupted(tmp_path):
    cfg = _config(tmp_path, adapter={"variant": "conv_meta_tr", "rank": 2})
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["train", "--config", str(cfg), "--out", str(full), "--epochs", "4"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(part), "--epochs", "2"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(part), "--epochs", "4", "--resume"]) == 0
    assert _tree(full / "checkpoint") == _tree(part / "checkpoint")
    a = json.loads((full / "report.json").read_text())
    b = json.loads((part / "report.json").read_text())
    assert a["train"] == b["train"] and a["knn"] == b["knn"]


def test_train_repeat_is_byte_identical(tmp_path):
    cfg = _config(tmp_path, adapter={"variant": "meta_tr", "rank": 2, "target": "head"})
    out = tmp_path / "r"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    first = {k: v for k, v in _tree(out).items() if k != "metadata.json"}
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert {k: v for k, v in _tree(out).items() if k != "metadata.json"} == first


def test_interrupt_leaves_marker(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr(cli, "train", boom)
    cfg = _config(tmp_path, adapter={"variant": "conv_lora", "rank": 1})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == cli.EXIT_INTERRUPTED
    assert (tmp_path / "r" / cli.MARKER).exists()
    assert (tmp_path / "r" / "config.json").exists()


def test_config_errors_exit_nonzero(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optim": {"lr": 0.1, "typo": 1}}))
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["compare", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_divergence_exit_code(tmp_path):
    cfg = _config(tmp_path, adapter={"variant": "lora", "rank": 2, "target": "head"})
    with np.errstate(over="ignore", invalid="ignore"):
        code = cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"), "--lr", "1e300"])
    assert code == cli.EXIT_DIVERGED
    assert (tmp_path / "r" / cli.MARKER).exists()


def test_compare_single_variant(tmp_path):
    cfg = _config(tmp_path, arms=[{"variant": "conv_lora", "rank": 2}], seeds=[0, 1])
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    table = json.loads((out / "table.json").read_text())
    assert len(table["table"]["arms"]) == 1
    assert table["config"]["seeds"] == [0, 1]
    assert (out / "table.csv").read_text().count("\n") == 1 + 2 * 2
    first = (out / "table.json").read_bytes()
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "table.json").read_bytes() == first


def test_compare_five_arm_lineup(tmp_path, capsys):
    arms = [{"variant": a.variant, "rank": a.rank, "target": a.target} for a in table1_lineup()]
    cfg = _config(tmp_path, arms=arms, seeds=[0, 1])
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    table = json.loads((tmp_path / "c" / "table.json").read_text())["table"]
    assert [a["label"] for a in table["arms"]] == [
        "Original", "LoRA", "Multi-LoRA (per-task)", "Meta-LoRA CP", "Meta-LoRA TR"]
    assert all(set(a["knn"]) == {"5", "10"} for a in table["arms"])
    assert set(table["welch"]["5"]) == {"Meta-LoRA CP", "Meta-LoRA TR"}
    text = (tmp_path / "c" / "table.txt").read_text()
    assert "Welch p" in text and "%" in text


def test_compare_reports_budget_mismatch(tmp_path, capsys):
    cfg = _config(tmp_path, arms=[{"variant": "conv_lora", "rank": 1}, {"variant": "conv_lora", "rank": 4, "name": "big"}])
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    assert "budget" in capsys.readouterr().err
    assert json.loads((tmp_path / "c" / "table.json").read_text())["table"]["warnings"]
