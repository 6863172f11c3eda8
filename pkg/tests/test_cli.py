import json

import pytest

from attnlink.cli import main

TINY = {"d": 32, "d_q": 32, "d_k": 32, "d_v": 32, "d_hidden": 64, "h": 2, "n_enc_layers": 1, "n_dec_layers": 1,
        "max_len": 16, "warmup_steps": 100, "base_lr": 0.003, "batch_tokens": 256, "max_epochs": 15}


@pytest.fixture(scope="module")
def copy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n-pairs", "2000", "--len-min", "2", "--len-max", "6", "--vocab-size", "8",
                 "--held-out", "100", "--seed", "1", "--out-dir", str(root / "data")]) == 0
    (root / "c.json").write_text(json.dumps(TINY))
    for name in ("a", "b"):
        code = main(["train", "--config", str(root / "c.json"), "--train", str(root / "data" / "train.tsv"),
                     "--seed", "7", "--out-dir", str(root / name)])
        assert code == 0
    return root


def test_train_twice_identical(copy_run):
    for f in ("metrics.jsonl", "checkpoint.bin"):
        assert (copy_run / "a" / f).read_bytes() == (copy_run / "b" / f).read_bytes()
    m = json.loads((copy_run / "a" / "manifest.json").read_text())
    assert m["seed"] == 7 and m["config"]["seed"] == 7
    assert m["config"]["src_vocab_size"] == 12 and set(m["artifacts"]) == {"metrics.jsonl", "checkpoint.bin"}


def test_flag_overrides_config(copy_run):
    m = json.loads((copy_run / "a" / "manifest.json").read_text())
    assert m["config"]["d"] == 32 and m["config"]["lam"] == 1.0


def test_evaluate_copy_model(copy_run, capsys):
    out = copy_run / "eval"
    code = main(["evaluate", "--checkpoint", str(copy_run / "a" / "checkpoint.bin"),
                 "--test", str(copy_run / "data" / "test.tsv"), "--out-dir", str(out)])
    assert code == 0
    report = json.loads((out / "bleu.json").read_text())
    assert {"p1", "p2", "p3", "p4", "bp", "score"} <= set(report)
    assert report["score"] >= 0.99


def test_rerun_from_manifest(copy_run, capsys):
    code = main(["rerun", "--manifest", str(copy_run / "a" / "manifest.json"), "--out-dir", str(copy_run / "again"), "--check"])
    assert code == 0
    assert (copy_run / "again" / "checkpoint.bin").read_bytes() == (copy_run / "a" / "checkpoint.bin").read_bytes()


def test_dump_attention(copy_run):
    out = copy_run / "dump"
    assert main(["dump-attention", "--checkpoint", str(copy_run / "a" / "checkpoint.bin"),
                 "--src", "s1 s2 s3", "--tgt", "s1 s2 s3", "--out-dir", str(out)]) == 0
    doc = json.loads((out / "attention.json").read_text())
    assert doc["tokens_src"] == ["s1", "s2", "s3", "<eos>"] and doc["tokens_tgt"][0] == "<bos>"


def test_simulate_theory(tmp_path, capsys):
    assert main(["simulate-theory", "--N", "8", "--sigma0", "0.1", "--trials", "2000", "--csv", "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert 0.4 < report["ratio"] < 0.6
    assert (tmp_path / "trials.csv").exists()
    assert json.loads(capsys.readouterr().out)["trials"] == 2000


def test_lemma1_check(tmp_path):
    assert main(["lemma1-check", "--n-configs", "4", "--n-inputs", "2", "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "lemma1.json").read_text())["passed"] is True


@pytest.mark.parametrize(
    "argv",
    [
        ["frobnicate"],
        ["train", "--bogus", "1"],
        ["simulate-theory", "--trials", "many"],
        ["simulate-theory", "--trials", "0"],
        ["train"],
        ["evaluate", "--checkpoint", "/nonexistent", "--test", "/nonexistent"],
    ],
)
def test_invalid_exits_1(argv, tmp_path, capsys):
    assert main(argv + ["--out-dir", str(tmp_path / "o")] if argv[0] != "frobnicate" else argv) == 1
    assert not (tmp_path / "o").exists()


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"dd": 1}))
    assert main(["simulate-theory", "--config", str(tmp_path / "c.json"), "--out-dir", str(tmp_path / "o")]) == 1
    assert "unknown config key 'dd'" in capsys.readouterr().err


def test_runtime_failure_exits_2(tmp_path, capsys):
    (tmp_path / "ck.bin").write_bytes(b"garbage")
    (tmp_path / "t.tsv").write_text("a\tb\n")
    # a corrupt checkpoint is reported as an input problem
    assert main(["evaluate", "--checkpoint", str(tmp_path / "ck.bin"), "--test", str(tmp_path / "t.tsv"),
                 "--out-dir", str(tmp_path / "o")]) == 1
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"command": "simulate-theory", "config": {"N": 4, "trials": 5}, "artifacts": {}}))
    assert main(["rerun", "--manifest", str(m), "--out-dir", str(tmp_path / "r"), "--check"]) == 2
