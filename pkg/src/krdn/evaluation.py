"""All-ranking top-N evaluation and noise-robustness sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


@dataclass
class RankingResult:
    top_n: int
    users: np.ndarray
    ranked: np.ndarray  # (n_users, top_n) item ids, best first; -1 pads
    recall: dict[int, np.ndarray] = field(default_factory=dict)
    ndcg: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def user_count(self) -> int:
        return len(self.users)

    def mean(self, metric: str, n: int) -> float:
        values = (self.recall if metric == "recall" else self.ndcg)[n]
        return float(values.mean()) if len(values) else 0.0

    def summary(self) -> dict[str, float]:
        out: dict[str, float] = {"user_count": self.user_count}
        for n in sorted(self.recall):
            out[f"Recall@{n}"] = self.mean("recall", n)
        for n in sorted(self.ndcg):
            out[f"NDCG@{n}"] = self.mean("ndcg", n)
        return out


def _group(pairs: np.ndarray, num_users: int) -> list[np.ndarray]:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    ptr = np.zeros(num_users + 1, dtype=np.int64)
    np.cumsum(np.bincount(pairs[:, 0], minlength=num_users), out=ptr[1:])
    return [pairs[ptr[u]:ptr[u + 1], 1] for u in range(num_users)]


def rank_items(scores: np.ndarray, exclude: np.ndarray, n: int) -> np.ndarray:
    """Top-``n`` item ids of one user's score row.  Excluded items never
    appear; equal scores are ordered by ascending item id."""
    s = np.array(scores, dtype=np.float64)
    s[exclude] = -np.inf
    order = np.argsort(-s, kind="stable")
    allowed = order[np.isfinite(s[order])]
    top = allowed[:n]
    if len(top) < n:
        top = np.concatenate([top, np.full(n - len(top), -1, dtype=np.int64)])
    return top


def metrics_for_user(ranked: np.ndarray, relevant, n: int) -> tuple[float, float]:
    rel = set(int(x) for x in relevant)
    hits = [k for k, i in enumerate(ranked[:n].tolist()) if i in rel]
    # correctly rounded sums make the value independent of summation order
    dcg = math.fsum(1.0 / math.log2(k + 2) for k in hits)
    idcg = math.fsum(1.0 / math.log2(k + 2) for k in range(min(len(rel), n)))
    return len(hits) / len(rel), dcg / idcg


def full_ranking(scores: np.ndarray, train: np.ndarray, test: np.ndarray,
                 ns: Sequence[int] = (20,)) -> RankingResult:
    """Rank every item a user has not trained on; average Recall/NDCG over
    users holding at least one test item.

    ``scores`` is the users x items score matrix (see ``model.score_matrix``).
    """
    ns = sorted(set(int(n) for n in ns))
    if not ns or ns[0] < 1:
        raise ValueError("cut-offs must be positive")
    num_users = scores.shape[0]
    train_by_user = _group(train, num_users)
    test_by_user = _group(test, num_users)
    users = np.array([u for u in range(num_users) if len(test_by_user[u])], dtype=np.int64)
    n_max = ns[-1]
    ranked = np.zeros((len(users), n_max), dtype=np.int64)
    recall = {n: np.zeros(len(users)) for n in ns}
    ndcg = {n: np.zeros(len(users)) for n in ns}
    for row, u in enumerate(users):
        ranked[row] = rank_items(scores[u], train_by_user[u], n_max)
        for n in ns:
            recall[n][row], ndcg[n][row] = metrics_for_user(ranked[row], test_by_user[u], n)
    return RankingResult(n_max, users, ranked, recall, ndcg)


def write_metrics_csv(path, result: RankingResult) -> None:
    summary = result.summary()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(summary))
        writer.writerow([summary["user_count"]] + [repr(v) for k, v in summary.items() if k != "user_count"])


@dataclass
class SweepRow:
    ratio: float
    seed: int
    recall: float
    ndcg: float


def robustness_sweep(pipeline: Callable[[float, int], tuple[float, float]],
                     noise_ratios: Sequence[float], seeds: Sequence[int]) -> tuple[list[SweepRow], list[dict]]:
    """Run ``pipeline(ratio, seed) -> (recall, ndcg)`` for every pair.

    The pipeline pollutes, trains from scratch and evaluates on the clean
    test split.  Returns the per-run rows and one aggregate row per ratio
    (mean and population std over seeds).
    """
    for r in noise_ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"noise ratio {r} outside [0, 1]")
    rows = []
    for ratio in noise_ratios:
        for seed in seeds:
            recall, ndcg = pipeline(ratio, seed)
            rows.append(SweepRow(float(ratio), int(seed), float(recall), float(ndcg)))
    table = []
    for ratio in noise_ratios:
        rec = np.array([r.recall for r in rows if r.ratio == ratio])
        nd = np.array([r.ndcg for r in rows if r.ratio == ratio])
        table.append({"ratio": float(ratio), "recall_mean": float(rec.mean()), "recall_std": float(rec.std()),
                      "ndcg_mean": float(nd.mean()), "ndcg_std": float(nd.std())})
    return rows, table


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ratio", "seed", "recall", "ndcg"])
        for r in rows:
            writer.writerow([r.ratio, r.seed, repr(r.recall), repr(r.ndcg)])
