"""Acceptance criteria 1-10; each test records one pass/fail line that the
terminal summary prints.  Run ``pytest tests/test_acceptance.py -v``."""
import csv
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import oracles
from acceptance_log import record
from krdn import cli, denoiser, model as model_mod
from krdn.data import Counts, load_interactions, write_interactions, write_kg
from krdn.evaluation import full_ranking, metrics_for_user, robustness_sweep
from krdn.gradcheck import check_disarm, check_model_gradients, toy_model
from krdn.graph import build_indices
from krdn.model import CONTINUOUS, KRDN, ModelConfig, score_matrix
from krdn.synthetic import desk_config, planted_dataset, planted_interactions, planted_kg, planted_pipeline


def test_criterion_01_gradient_fidelity():
    t0 = time.perf_counter()
    results = check_model_gradients(toy_model(seed=0, num_users=10, num_items=10, num_triplets=30,
                                              embed_dim=8, layers=2, n_iterations=2))
    elapsed = time.perf_counter() - t0
    worst = max(r.error for r in results)
    ok = {r.name for r in results} == set(CONTINUOUS) and worst < 1e-4 and elapsed < 60
    record(1, ok, f"max relative error {worst:.2e} over {len(results)} parameter blocks in {elapsed:.1f}s")
    assert ok


def test_criterion_02_disarm_unbiased():
    t0 = time.perf_counter()
    res, info = check_disarm(k=8, samples=100_000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = res.error < 3.0 and elapsed < 60
    record(2, ok, f"largest deviation {res.error:.2f} standard errors over 8 logits in {elapsed:.1f}s")
    assert ok


def _three_entity_model(seed):
    # items 0, 1 and attribute 2: one item-item and two item-attribute triplets
    trip = np.array([[0, 0, 1], [0, 1, 2], [1, 1, 2]])
    train = np.array([[0, 0], [0, 1], [1, 1], [2, 0]])
    ig, kg = build_indices(train, trip, Counts(3, 2, 3, 2))
    cfg = ModelConfig(embed_dim=4, layers=2, n_iterations=2, gamma=0.01, negatives=1, seed=seed)
    m = KRDN(cfg, ig, kg)
    m.store.params["alpha"][:] = np.random.default_rng(seed).normal(size=3)
    return train, trip, m


def test_criterion_03_forward_oracle():
    worst = 0.0
    for seed in range(5):
        train, trip, m = _three_entity_model(seed)
        gates = m.expected_gates()
        reps = m.representations()
        params = {k: m.store[k] for k in CONTINUOUS}
        ref = oracles.forward(params, train, [tuple(t) for t in trip.tolist()], 2, gates, 2, 2,
                              m.config.gamma, m.bank)
        got = reps.arrays()
        worst = max([worst] + [float(np.max(np.abs(got[k] - ref[k]))) for k in ref])
        scores = score_matrix(reps)
        for u in range(3):
            for i in range(2):
                worst = max(worst, abs(scores[u, i] - oracles.score(ref, u, i)))
    ok = worst < 1e-10
    record(3, ok, f"max abs deviation from straight-line evaluation {worst:.1e}")
    assert ok


def test_criterion_04_metric_oracle():
    mismatches = 0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        users, items = int(rng.integers(1, 51)), int(rng.integers(5, 60))
        scores = rng.normal(size=(users, items))
        if seed % 2:
            scores = np.round(scores, 1)
        pairs = np.array([(u, i) for u in range(users) for i in range(items) if rng.random() < 0.2]).reshape(-1, 2)
        pairs = pairs[rng.permutation(len(pairs))]
        train, test = pairs[: len(pairs) // 2], pairs[len(pairs) // 2:]
        if not len(test):
            continue
        for n in (1, 5, 20):
            res = full_ranking(scores, train, test, (n,))
            for k, u in enumerate(res.users.tolist()):
                rec, nd, _ = oracles.ranking_metrics(scores[u:u + 1], [(0, i) for uu, i in train.tolist() if uu == u],
                                                     [(0, i) for uu, i in test.tolist() if uu == u], n)
                mismatches += (res.recall[n][k] != rec) + (res.ndcg[n][k] != nd)
    spots = [metrics_for_user(np.arange(20), [k - 1], 20)[1] == 1 / math.log2(k + 1) for k in range(1, 21)]
    ok = mismatches == 0 and all(spots)
    record(4, ok, f"{mismatches} per-user mismatches against full sort; {sum(spots)}/20 NDCG spot checks exact")
    assert ok


def test_criterion_05_normalization(monkeypatch):
    softmaxes, enhanced = [], []
    real_softmax, real_enhance = denoiser.segment_softmax, model_mod.self_enhance

    def spy_softmax(logits, segment, num_segments):
        out = real_softmax(logits, segment, num_segments)
        softmaxes.append((out.value.copy(), segment.copy()))
        return out

    def spy_enhance(*args, **kw):
        res = real_enhance(*args, **kw)
        enhanced.append((res.user_kg.value.copy(), res.user_cf.value.copy()))
        return res

    monkeypatch.setattr(denoiser, "segment_softmax", spy_softmax)
    monkeypatch.setattr(model_mod, "self_enhance", spy_enhance)
    ds = planted_dataset(seed=0)
    ig, kg = build_indices(ds.train, ds.kg, ds.counts)
    m = KRDN(desk_config(), ig, kg)
    m.fit(3)
    scores = score_matrix(m.representations())
    sum_err = max(float(np.max(np.abs(np.bincount(seg, weights=p)[np.unique(seg)] - 1))) for p, seg in softmaxes)
    norm_err = max(float(np.max(np.abs(np.linalg.norm(v, axis=1) - 1))) for pair in enhanced for v in pair)
    ok = sum_err < 1e-9 and norm_err < 1e-12 and scores.min() >= -2 and scores.max() <= 2
    record(5, ok, f"{len(softmaxes)} distributions (max sum error {sum_err:.1e}), "
                  f"unit-norm error {norm_err:.1e}, scores in [{scores.min():.3f}, {scores.max():.3f}]")
    assert ok


def _planted_files(root):
    inter, block, pos = planted_interactions(seed=0)
    write_interactions(root / "inter.txt", inter)
    write_kg(root / "kg.txt", planted_kg(200, block, pos, 4, seed=0))
    assert cli.main(["prepare", "--interactions", str(root / "inter.txt"), "--kg", str(root / "kg.txt"),
                     "--output-dir", str(root / "data")]) == 0
    return root / "data"


def test_criterion_06_noise_protocol(tmp_path):
    data = _planted_files(tmp_path)
    out = tmp_path / "noisy"
    assert cli.main(["pollute", "--data-dir", str(data), "--interaction-noise-rate", "0.05",
                     "--output-dir", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    split = {k: load_interactions(data / f"{k}.txt")[0] for k in ("train", "valid", "test")}
    observed = {}
    for arr in split.values():
        for u, i in arr.tolist():
            observed.setdefault(u, set()).add(i)
    problems = []
    for name in ("train", "valid"):
        want = math.floor(0.05 * len(split[name]) + 0.5)
        got = [r for r in m["replaced"] if r["split"] == name]
        if len(got) != want:
            problems.append(f"{name}: {len(got)} replaced, expected {want}")
        noisy = load_interactions(out / m["files"][name])[0]
        changed = np.flatnonzero(np.any(noisy != split[name], axis=1)).tolist()
        if changed != sorted(r["index"] for r in got):
            problems.append(f"{name}: changed rows differ from the manifest")
    fresh = {}
    for r in m["replaced"]:
        if r["new_item"] in observed[r["user"]] or r["new_item"] in fresh.setdefault(r["user"], set()):
            problems.append(f"user {r['user']} item {r['new_item']} was already observed")
        fresh[r["user"]].add(r["new_item"])
    test_same = (out / m["files"]["test"]).read_bytes() == (data / "test.txt").read_bytes()
    ok = not problems and test_same
    record(6, ok, f"{len(m['replaced'])} replacements checked, test byte-identical={test_same}"
                  + (f"; {problems[:3]}" if problems else ""))
    assert ok


def test_criterion_07_mask_annihilation():
    # items 0-2, attributes 3-6; triplet 3 (4, r2, 6) is the only user of relation 2 and entity 6
    trip = np.array([[0, 0, 3], [1, 0, 4], [2, 1, 1], [4, 2, 6], [3, 1, 5], [2, 0, 5]])
    train = np.array([[0, 0], [0, 1], [1, 1], [1, 2], [2, 0], [2, 2]])
    ig, kg = build_indices(train, trip, Counts(3, 3, 7, 3))
    k = int(np.flatnonzero((kg.triplets == [4, 2, 6]).all(axis=1))[0])
    m = KRDN(ModelConfig(embed_dim=6, gamma=0.05, negatives=2, seed=3), ig, kg)
    rng = np.random.default_rng(0)
    gates = rng.random(kg.num_triplets)
    gates[k] = 0.0
    negatives = rng.integers(0, 3, size=(ig.num_edges, 2))
    edges = np.arange(ig.num_edges)

    def outputs():
        reps = m.representations(gates)
        loss = m.batch_loss(edges, negatives, gates, differentiable=False)[1].value
        return np.concatenate([v.ravel() for v in reps.arrays().values()] + [score_matrix(reps).ravel(), [loss]])

    base = outputs()
    worst = 0.0
    for trial in range(5):
        m.store.params["entity"][6] = rng.normal(scale=10.0 ** trial, size=6)
        m.store.params["relation"][2] = rng.normal(scale=10.0 ** trial, size=6)
        worst = max(worst, float(np.max(np.abs(outputs() - base))))
    ok = worst < 1e-12
    record(7, ok, f"max output delta {worst:.1e} under 5 perturbations of the masked tail and relation")
    assert ok


@pytest.fixture(scope="module")
def sweep():
    t0 = time.perf_counter()
    out = {}
    for ablation in ("full", "no_CDL"):
        rows, _ = robustness_sweep(planted_pipeline(desk_config(ablation=ablation)), [0.0, 0.2], [0, 1, 2])
        out[ablation] = rows
    return out, time.perf_counter() - t0


def _relative_drop(rows):
    clean = {r.seed: r.recall for r in rows if r.ratio == 0.0}
    return float(np.mean([(clean[r.seed] - r.recall) / clean[r.seed] for r in rows if r.ratio == 0.2]))


def test_criterion_08_directional_robustness(sweep):
    rows, elapsed = sweep
    full, ablated = _relative_drop(rows["full"]), _relative_drop(rows["no_CDL"])
    ok = full < ablated and elapsed < 900
    record(8, ok, f"mean relative Recall@20 drop at 20% noise: full {full:.4f} vs no_CDL {ablated:.4f}; "
                  f"sweep took {elapsed:.0f}s")
    assert ok


def test_criterion_09_learning_sanity(sweep):
    rows, _ = sweep
    clean = [r.recall for r in rows["full"] if r.ratio == 0.0]
    floor = 5 * 20 / 200
    ok = min(clean) >= floor
    record(9, ok, f"Recall@20 after 100 epochs per seed {[round(x, 4) for x in clean]} vs 5x random = {floor}")
    assert ok


def _snapshot(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    inter, block, pos = planted_interactions(100, 100, 4, 10, seed=1)
    write_interactions(tmp_path / "inter.txt", inter)
    write_kg(tmp_path / "kg.txt", planted_kg(100, block, pos, 4, seed=1))
    small = ["--embed-dim", "16", "--negatives", "8", "--learning-rate", "0.01", "--gamma", "0.004"]
    w = str(tmp_path / "work")
    commands = [
        ["prepare", "--interactions", str(tmp_path / "inter.txt"), "--kg", str(tmp_path / "kg.txt"),
         "--output-dir", f"{w}/data"],
        ["pollute", "--data-dir", f"{w}/data", "--interaction-noise-rate", "0.1", "--output-dir", f"{w}/noisy"],
        ["train", "--data-dir", f"{w}/noisy", "--output-dir", f"{w}/model", "--epochs", "3", *small],
        ["evaluate", "--data-dir", f"{w}/noisy", "--checkpoint", f"{w}/model/model.ckpt", "--topk", "10,20",
         "--output-dir", f"{w}/eval"],
        ["explain", "--data-dir", f"{w}/noisy", "--checkpoint", f"{w}/model/model.ckpt", "--output-dir", f"{w}/explain"],
        ["gradcheck", "--output-dir", f"{w}/gradcheck"],
    ]
    differing = []
    for cmd in commands:
        assert cli.main(cmd) == 0, cmd
        first = _snapshot(w)
        assert cli.main(cmd) == 0, cmd
        second = _snapshot(w)
        differing += [f"{cmd[0]}:{p}" for p in first if first[p] != second.get(p)]
    ok = not differing and len(second) >= 15
    record(10, ok, f"{len(commands)} commands rerun, {len(second)} output files compared, "
                   f"{len(differing)} differ" + (f": {differing[:3]}" if differing else ""))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
