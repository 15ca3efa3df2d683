import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from krdn import cli
from krdn.data import load_interactions, write_interactions, write_kg
from krdn.synthetic import planted_interactions, planted_kg

SMALL = ["--embed-dim", "8", "--negatives", "4", "--learning-rate", "0.01", "--gamma", "0.004"]
DESK = ["--embed-dim", "32", "--negatives", "32", "--learning-rate", "0.01", "--gamma", "0.004"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*args):
    return cli.main([str(a) for a in args])


def raw_files(root, num_users=40, num_items=80, per_user=10):
    inter, block, pos = planted_interactions(num_users, num_items, 4, per_user, seed=0)
    kg = planted_kg(num_items, block, pos, 4, seed=0)
    write_interactions(root / "inter.txt", inter)
    write_kg(root / "kg.txt", kg)
    return root / "inter.txt", root / "kg.txt"


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    inter, kg = raw_files(root)
    assert run("prepare", "--interactions", inter, "--kg", kg, "--output-dir", root / "data") == 0
    return root


@pytest.fixture(scope="module")
def trained(prepared):
    out = prepared / "model"
    assert run("train", "--data-dir", prepared / "data", "--output-dir", out, "--epochs", 2, *SMALL) == 0
    return out


def test_prepare_ratios_and_rerun_identical(prepared, tmp_path):
    data = prepared / "data"
    sizes = json.loads((data / "manifest.json").read_text())["sizes"]
    assert (sizes["train"], sizes["valid"], sizes["test"]) == (320, 40, 40)
    assert run("prepare", "--interactions", prepared / "inter.txt", "--kg", prepared / "kg.txt",
               "--output-dir", tmp_path) == 0
    for name in ("train.txt", "valid.txt", "test.txt", "kg_final.txt"):
        assert sha(data / name) == sha(tmp_path / name)


def test_prepare_missing_input_exits_1(tmp_path, capsys):
    assert run("prepare", "--interactions", tmp_path / "nope.txt", "--output-dir", tmp_path) == 1
    assert "not found" in capsys.readouterr().err


def test_malformed_data_exits_2(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("0 1\n1 x\n")
    assert run("prepare", "--interactions", tmp_path / "bad.txt", "--output-dir", tmp_path) == 2
    assert "bad.txt:2" in capsys.readouterr().err


def test_pollute_counts_and_clean_test(prepared, tmp_path):
    assert run("pollute", "--data-dir", prepared / "data", "--interaction-noise-rate", 0.05,
               "--noise-seed", 1, "--output-dir", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert sum(r["split"] == "train" for r in m["replaced"]) == 16  # 5% of 320
    assert sum(r["split"] == "valid" for r in m["replaced"]) == 2
    assert sha(tmp_path / m["files"]["test"]) == sha(prepared / "data" / "test.txt")
    clean, _ = load_interactions(prepared / "data" / "train.txt")
    noisy, _ = load_interactions(tmp_path / m["files"]["train"])
    diff = np.flatnonzero(np.any(clean != noisy, axis=1))
    listed = sorted(r["index"] for r in m["replaced"] if r["split"] == "train")
    assert diff.tolist() == listed


def test_train_log_checkpoint_and_manifest(prepared, tmp_path):
    assert run("train", "--data-dir", prepared / "data", "--output-dir", tmp_path, "--epochs", 1,
               "--ablation", "no_CDL", *SMALL) == 0
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 1
    assert (tmp_path / "model.ckpt").is_file()
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["ablation"] == "no_CDL" and m["config"]["ablation"] == "no_CDL"


def test_resume_matches_straight_run(prepared, trained, tmp_path):
    args = ("--data-dir", prepared / "data", "--output-dir", tmp_path, *SMALL)
    assert run("train", *args, "--epochs", 1) == 0
    assert run("train", *args, "--epochs", 2, "--resume") == 0
    assert sha(tmp_path / "model.ckpt") == sha(trained / "model.ckpt")
    assert (tmp_path / "train_log.jsonl").read_bytes() == (trained / "train_log.jsonl").read_bytes()


def test_resume_with_other_config_is_rejected(prepared, trained, tmp_path, capsys):
    import shutil

    shutil.copytree(trained, tmp_path, dirs_exist_ok=True)
    assert run("train", "--data-dir", prepared / "data", "--output-dir", tmp_path, "--epochs", 3,
               "--resume", *SMALL, "--margin", 0.3) == 1
    assert "differs" in capsys.readouterr().err


def test_patience_stops_and_resume_agrees(prepared, tmp_path):
    args = ("--data-dir", prepared / "data", *SMALL, "--learning-rate", 0.5, "--patience", 1)
    assert run("train", *args, "--output-dir", tmp_path / "a", "--epochs", 12) == 0
    log = [json.loads(x) for x in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert all("valid_recall@20" in r for r in log)
    rec = [r["valid_recall@20"] for r in log]
    # patience 1 stops at the first epoch that fails to improve; the large step makes that early
    assert len(rec) < 12
    assert all(a < b for a, b in zip(rec[:-2], rec[1:-1])) and rec[-1] <= max(rec[:-1])
    assert run("train", *args, "--output-dir", tmp_path / "b", "--epochs", 1) == 0
    assert run("train", *args, "--output-dir", tmp_path / "b", "--epochs", 12, "--resume") == 0
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()


def test_evaluate_repeatable_and_topk_columns(prepared, trained, tmp_path):
    args = ("evaluate", "--data-dir", prepared / "data", "--checkpoint", trained / "model.ckpt", "--topk", "5,10,20")
    assert run(*args, "--output-dir", tmp_path / "a") == 0
    assert run(*args, "--output-dir", tmp_path / "b") == 0
    a, b = (tmp_path / "a" / "metrics.csv"), (tmp_path / "b" / "metrics.csv")
    assert a.read_bytes() == b.read_bytes()
    header = a.read_text().splitlines()[0].split(",")
    assert header == ["user_count", "Recall@5", "Recall@10", "Recall@20", "NDCG@5", "NDCG@10", "NDCG@20"]


def test_evaluate_without_checkpoint_exits_1(prepared, tmp_path):
    assert run("evaluate", "--data-dir", prepared / "data", "--output-dir", tmp_path) == 1


def test_explain_reports(prepared, trained, tmp_path):
    assert run("explain", "--data-dir", prepared / "data", "--checkpoint", trained / "model.ckpt",
               "--output-dir", tmp_path) == 0
    keep = list(csv.DictReader(open(tmp_path / "kg_keep.tsv"), delimiter="\t"))
    edges = list(csv.DictReader(open(tmp_path / "edge_divergence.tsv"), delimiter="\t"))
    assert len(keep) == len(np.loadtxt(prepared / "data" / "kg_final.txt"))
    assert len(edges) == 320
    probs = [float(r["keep_probability"]) for r in keep]
    assert probs == sorted(probs) and all(0 < p < 1 for p in probs)
    div = [float(r["divergence"]) for r in edges]
    assert div == sorted(div, reverse=True)
    assert {r["facet"] for r in keep} <= {"T1", "T2", "T3"}


def test_explain_ranks_planted_noise_high(tmp_path):
    inter, kg = raw_files(tmp_path, 200, 200, 20)
    assert run("prepare", "--interactions", inter, "--kg", kg, "--output-dir", tmp_path / "data") == 0
    assert run("pollute", "--data-dir", tmp_path / "data", "--interaction-noise-rate", 0.2,
               "--output-dir", tmp_path / "noisy") == 0
    common = ("--data-dir", tmp_path / "noisy", "--output-dir", tmp_path / "m", *DESK)
    assert run("train", *common, "--epochs", 10) == 0
    assert run("explain", *common, "--checkpoint", tmp_path / "m" / "model.ckpt") == 0
    manifest = json.loads((tmp_path / "noisy" / "manifest.json").read_text())
    noise = {(r["user"], r["new_item"]) for r in manifest["replaced"] if r["split"] == "train"}
    rows = list(csv.DictReader(open(tmp_path / "m" / "edge_divergence.tsv"), delimiter="\t"))
    planted = np.array([(int(r["u"]), int(r["i"])) in noise for r in rows])
    rank = np.arange(len(rows))
    # probability that a random planted edge outranks a random clean one
    auc = np.mean(rank[planted][:, None] < rank[~planted][None, :])
    assert planted.sum() == len(noise) and auc > 0.75


def test_gradcheck_passes(tmp_path):
    assert run("gradcheck", "--output-dir", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "gradcheck.tsv"), delimiter="\t"))
    assert {r["group"] for r in rows} == {"primitive", "model", "estimator"}
    assert all(r["status"] == "pass" for r in rows)


def test_gradcheck_names_broken_primitive(tmp_path, monkeypatch, capsys):
    from krdn.diffcore import tape as tp

    def bad_exp(x):
        v = np.exp(x.value)
        return x.tape.record("exp", v, (x,), lambda g: (g * v * 1.01,))

    monkeypatch.setattr(tp, "exp", bad_exp)
    assert run("gradcheck", "--output-dir", tmp_path, "--disarm-samples", 1000) == 2
    assert "primitive:exp" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nembed_dim = 16\nmargin = 0.3  # inline\n")
    cfg = cli.resolve_config(cli.read_config_file(conf), {"margin": "0.5"})
    assert (cfg.embed_dim, cfg.margin, cfg.layers) == (16, 0.5, 2)


@pytest.mark.parametrize("text", ["bogus_key = 1\n", "embed_dim = many\n", "no equals sign\n"])
def test_bad_config_file_exits_1(tmp_path, text, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text(text)
    assert run("train", "--config", conf, "--output-dir", tmp_path) == 1
    assert "run.conf:1" in capsys.readouterr().err


@pytest.mark.parametrize("flags", [["--ablation", "nope"], ["--gamma", "-1"], ["--topk", "a,b"],
                                   ["--unknown-flag", "1"], ["--eval-split", "train"]])
def test_bad_flags_exit_1(prepared, trained, tmp_path, flags):
    args = ["evaluate", "--data-dir", prepared / "data", "--checkpoint", trained / "model.ckpt",
            "--output-dir", tmp_path, *flags]
    assert run(*args) == 1


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "krdn.cli", "prepare", "--interactions", str(tmp_path / "x"),
                        "--output-dir", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 1 and r.stderr.startswith("error:")
