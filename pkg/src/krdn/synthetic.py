"""Seeded block-structured toy data with a two-facet KG.

Users and items fall into ``clusters`` equal blocks.  Inside a block every
user and item sits on a ring; users prefer items close to them on the ring.
The KG holds item-attribute triplets (each item points at the attribute
owning its ring arc, plus one same-block attribute) and item-item triplets
(each item points at its ring successor).
"""
from __future__ import annotations

import numpy as np

from .data import Counts, SplitDataset, split_dataset


def planted_interactions(num_users=200, num_items=200, clusters=4, per_user=20,
                         temperature=0.12, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    user_block = np.arange(num_users) % clusters
    item_block = np.arange(num_items) % clusters
    user_pos = rng.random(num_users)
    item_pos = rng.random(num_items)
    rows = []
    for u in range(num_users):
        cand = np.flatnonzero(item_block == user_block[u])
        d = np.abs(item_pos[cand] - user_pos[u])
        d = np.minimum(d, 1.0 - d)
        w = np.exp(-d / temperature)
        k = min(per_user, len(cand) - 1)
        picked = rng.choice(cand, size=k, replace=False, p=w / w.sum())
        rows.extend((u, int(i)) for i in picked)
    return np.array(sorted(rows), dtype=np.int64), item_block, item_pos


def planted_kg(num_items, item_block, item_pos, clusters, attrs_per_cluster=5, seed=0) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    triplets = []
    for i in range(num_items):
        c = int(item_block[i])
        arc = min(int(item_pos[i] * attrs_per_cluster), attrs_per_cluster - 1)
        attr = num_items + c * attrs_per_cluster + arc
        triplets.append((i, 0, attr))
        other = num_items + c * attrs_per_cluster + int(rng.integers(attrs_per_cluster))
        triplets.append((i, 1, other))
    for c in range(clusters):
        members = np.flatnonzero(item_block == c)
        ring = members[np.argsort(item_pos[members])]
        for a, b in zip(ring, np.roll(ring, -1)):
            triplets.append((int(a), 2, int(b)))
    return np.array(triplets, dtype=np.int64)


def planted_dataset(num_users=200, num_items=200, clusters=4, per_user=20,
                    attrs_per_cluster=5, seed=0, ratios=(0.8, 0.1, 0.1)) -> SplitDataset:
    inter, item_block, item_pos = planted_interactions(num_users, num_items, clusters, per_user, seed=seed)
    kg = planted_kg(num_items, item_block, item_pos, clusters, attrs_per_cluster, seed=seed)
    counts = Counts(num_users, num_items, num_items + clusters * attrs_per_cluster, 3)
    return split_dataset(inter, ratios, seed=seed, kg=kg, counts=counts)


def tiny_dataset(num_users=5, num_items=5, num_attrs=5, num_triplets=10, per_user=3, seed=0) -> SplitDataset:
    """Random toy for gradient checks; every user keeps >= 1 train edge and
    the KG mixes all three facets."""
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(num_users):
        for i in rng.choice(num_items, size=per_user, replace=False):
            rows.append((u, int(i)))
    n_ent = num_items + num_attrs
    trip = set()
    while len(trip) < num_triplets:
        h = int(rng.integers(n_ent))
        t = int(rng.integers(n_ent))
        if h != t:
            trip.add((h, int(rng.integers(3)), t))
    kg = np.array(sorted(trip), dtype=np.int64)
    inter = np.array(rows, dtype=np.int64)
    return SplitDataset(inter, np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2), dtype=np.int64),
                        kg, num_users, num_items, n_ent, 3)


# ---------------------------------------------------------------- desk-scale runs

def desk_config(**overrides):
    """Model settings for the 200 x 200 planted toy.

    The threshold is far below the usual grid because the divergence of
    sigmoid-squashed probabilities over ~16 neighbours is only a few 1e-3.
    """
    from .model import ModelConfig

    base = dict(embed_dim=32, negatives=32, margin=0.6, learning_rate=1e-2, gamma=0.004)
    base.update(overrides)
    return ModelConfig(**base)


def planted_pipeline(config, epochs: int = 100, history: list | None = None):
    """``pipeline(ratio, seed) -> (recall@20, ndcg@20)`` for ``robustness_sweep``:
    pollute the planted toy, train from scratch, score on the clean test split."""
    from dataclasses import replace

    from .data import NoiseSpec, inject_interaction_noise
    from .evaluation import full_ranking
    from .graph import build_indices
    from .model import KRDN, score_matrix

    def run(ratio: float, seed: int) -> tuple[float, float]:
        ds = planted_dataset(seed=seed)
        polluted, _ = inject_interaction_noise(ds, NoiseSpec(ratio, 0.0, seed))
        ig, kg = build_indices(polluted.train, polluted.kg, polluted.counts)
        model = KRDN(replace(config, seed=seed), ig, kg)
        log = model.fit(epochs)
        if history is not None:
            history.append({"ratio": ratio, "seed": seed, "ablation": config.ablation, "log": log})
        res = full_ranking(score_matrix(model.representations()), polluted.train, ds.test, (20,))
        return res.mean("recall", 20), res.mean("ndcg", 20)

    return run
