"""Interaction / KG file loading, per-user splitting and noise injection.

Interactions are held as ``(n, 2)`` int64 arrays of ``(user, item)`` rows and
KG triplets as ``(m, 3)`` arrays of ``(head, relation, tail)`` rows.  Item ids
are the prefix ``[0, num_items)`` of the entity id space.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ADJACENCY = "adjacency"
PAIRS = "pairs"


class DataFormatError(ValueError):
    pass


class BoundsError(IndexError):
    pass


@dataclass(frozen=True)
class Counts:
    num_users: int = 0
    num_items: int = 0
    num_entities: int = 0
    num_relations: int = 0


@dataclass(frozen=True)
class SplitDataset:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    kg: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    num_users: int = 0
    num_items: int = 0
    num_entities: int = 0
    num_relations: int = 0

    @property
    def counts(self) -> Counts:
        return Counts(self.num_users, self.num_items, self.num_entities, self.num_relations)

    def all_interactions(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])


@dataclass(frozen=True)
class NoiseSpec:
    interaction_noise_rate: float = 0.05
    kg_noise_rate: float = 0.0
    seed: int = 2023

    def __post_init__(self):
        for name in ("interaction_noise_rate", "kg_noise_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {rate}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _empty_pairs() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


def _parse_ints(path: Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                yield lineno, [int(p) for p in parts]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: expected integers, got {line.strip()!r}") from None


def load_interactions(path, fmt: str = ADJACENCY, num_users: int | None = None,
                      num_items: int | None = None) -> tuple[np.ndarray, Counts]:
    """Read ``user item item ...`` lines (adjacency) or ``user<TAB>item`` lines
    (pairs).  Records keep file order.  Counts default to ``1 + max index``
    per axis; explicit counts are validated instead."""
    path = Path(path)
    if fmt not in (ADJACENCY, PAIRS):
        raise ValueError(f"unknown interaction format {fmt!r}")
    rows: list[tuple[int, int]] = []
    max_user = -1
    for lineno, vals in _parse_ints(path):
        if any(v < 0 for v in vals):
            raise DataFormatError(f"{path}:{lineno}: negative index")
        if fmt == PAIRS and len(vals) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected 'user item', got {len(vals)} fields")
        user = vals[0]
        max_user = max(max_user, user)
        rows.extend((user, item) for item in vals[1:])
    arr = np.array(rows, dtype=np.int64).reshape(-1, 2)
    observed_users = max_user + 1
    observed_items = int(arr[:, 1].max()) + 1 if len(arr) else 0
    if num_users is None:
        num_users = observed_users
    elif observed_users > num_users:
        raise BoundsError(f"{path}: user index {observed_users - 1} >= num_users {num_users}")
    if num_items is None:
        num_items = observed_items
    elif observed_items > num_items:
        raise BoundsError(f"{path}: item index {observed_items - 1} >= num_items {num_items}")
    return arr, Counts(num_users=num_users, num_items=num_items)


def load_kg(path, num_entities: int | None = None,
            num_relations: int | None = None) -> tuple[np.ndarray, Counts]:
    path = Path(path)
    rows = []
    for lineno, vals in _parse_ints(path):
        if len(vals) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected 'head relation tail', got {len(vals)} fields")
        if any(v < 0 for v in vals):
            raise DataFormatError(f"{path}:{lineno}: negative index")
        rows.append(vals)
    kg = np.array(rows, dtype=np.int64).reshape(-1, 3)
    ents = int(max(kg[:, 0].max(), kg[:, 2].max())) + 1 if len(kg) else 0
    rels = int(kg[:, 1].max()) + 1 if len(kg) else 0
    if num_entities is None:
        num_entities = ents
    elif ents > num_entities:
        raise BoundsError(f"{path}: entity index {ents - 1} >= num_entities {num_entities}")
    if num_relations is None:
        num_relations = rels
    elif rels > num_relations:
        raise BoundsError(f"{path}: relation index {rels - 1} >= num_relations {num_relations}")
    return kg, Counts(num_entities=num_entities, num_relations=num_relations)


def write_interactions(path, pairs: np.ndarray, fmt: str = ADJACENCY) -> None:
    """Adjacency output groups consecutive rows of the same user on one line,
    so arrays sorted by user round-trip exactly."""
    lines = []
    if fmt == PAIRS:
        lines = [f"{u}\t{i}" for u, i in pairs.tolist()]
    else:
        cur, items = None, []
        for u, i in pairs.tolist():
            if u != cur and cur is not None:
                lines.append(" ".join(map(str, [cur, *items])))
                items = []
            cur = u
            items.append(i)
        if cur is not None:
            lines.append(" ".join(map(str, [cur, *items])))
    Path(path).write_text("".join(line + "\n" for line in lines))


def write_kg(path, kg: np.ndarray) -> None:
    Path(path).write_text("".join(f"{h} {r} {t}\n" for h, r, t in kg.tolist()))


def split_dataset(interactions: np.ndarray, ratios=(0.8, 0.1, 0.1), seed: int = 2023,
                  kg: np.ndarray | None = None, counts: Counts | None = None) -> SplitDataset:
    """Per-user stratified random split.

    For a user with ``n`` interactions, ``round(n * valid_ratio)`` go to
    validation and ``round(n * test_ratio)`` to test, then both are trimmed so
    that at least one interaction stays in train.  A user with a single
    interaction therefore always contributes it to train.  Each split is
    returned sorted by ``(user, item)``.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    inter = np.unique(np.asarray(interactions, dtype=np.int64).reshape(-1, 2), axis=0)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    if len(inter):
        boundaries = np.flatnonzero(np.diff(inter[:, 0])) + 1
        for block in np.split(inter, boundaries):
            n = len(block)
            n_val = round_half_up(n * ratios[1])
            n_test = round_half_up(n * ratios[2])
            while n - n_val - n_test < 1:
                if n_val >= n_test and n_val > 0:
                    n_val -= 1
                else:
                    n_test -= 1
            perm = block[rng.permutation(n)]
            n_train = n - n_val - n_test
            parts[0].append(perm[:n_train])
            parts[1].append(perm[n_train:n_train + n_val])
            parts[2].append(perm[n_train + n_val:])

    def _finish(chunks):
        if not chunks:
            return _empty_pairs()
        arr = np.concatenate(chunks)
        return arr[np.lexsort((arr[:, 1], arr[:, 0]))]

    train, valid, test = (_finish(p) for p in parts)
    if counts is None:
        counts = Counts(
            num_users=int(inter[:, 0].max()) + 1 if len(inter) else 0,
            num_items=int(inter[:, 1].max()) + 1 if len(inter) else 0,
        )
    if kg is None:
        kg = np.zeros((0, 3), dtype=np.int64)
    num_entities = max(counts.num_entities, counts.num_items,
                       int(max(kg[:, 0].max(), kg[:, 2].max())) + 1 if len(kg) else 0)
    num_relations = max(counts.num_relations, int(kg[:, 1].max()) + 1 if len(kg) else 0)
    return SplitDataset(train, valid, test, np.asarray(kg, dtype=np.int64),
                        counts.num_users, counts.num_items, num_entities, num_relations)


@dataclass(frozen=True)
class Replacement:
    split: str
    index: int
    user: int
    old_item: int
    new_item: int

    def as_dict(self) -> dict:
        return {"split": self.split, "index": self.index, "user": self.user,
                "old_item": self.old_item, "new_item": self.new_item}


def inject_interaction_noise(split: SplitDataset, spec: NoiseSpec) -> tuple[SplitDataset, list[Replacement]]:
    """Replace ``round(rate * |train|)`` train edges and ``round(rate * |valid|)``
    validation edges by edges to items the user never interacted with in any
    split.  The test split is returned untouched (same array object).

    Returns the polluted dataset and the list of replacements (row positions
    refer to the returned arrays, which keep the input row order).
    """
    rate = spec.interaction_noise_rate
    if rate == 0.0:
        return split, []
    rng = np.random.default_rng(spec.seed)
    num_items = split.num_items
    seen: dict[int, set[int]] = {}
    for u, i in split.all_interactions().tolist():
        seen.setdefault(u, set()).add(i)

    replacements: list[Replacement] = []
    new_parts = {}
    for name in ("train", "valid"):
        arr = getattr(split, name).copy()
        target = round_half_up(rate * len(arr))
        order = rng.permutation(len(arr))
        done = 0
        for row in order.tolist():
            if done == target:
                break
            u, old = int(arr[row, 0]), int(arr[row, 1])
            taken = seen[u]
            free = num_items - len(taken)
            if free <= 0:
                log.warning("user %d has interacted with every item; skipping edge %s[%d]", u, name, row)
                continue
            # k-th free item without materialising the complement
            k = int(rng.integers(free))
            new = _kth_missing(sorted(taken), k)
            taken.add(new)
            arr[row, 1] = new
            replacements.append(Replacement(name, row, u, old, new))
            done += 1
        if done < target:
            log.warning("%s: only %d of %d edges could be replaced", name, done, target)
        new_parts[name] = arr
    return replace(split, train=new_parts["train"], valid=new_parts["valid"]), replacements


def _kth_missing(sorted_taken: list[int], k: int) -> int:
    """The k-th (0-based) non-negative integer absent from ``sorted_taken``."""
    candidate = k
    for t in sorted_taken:
        if t <= candidate:
            candidate += 1
        else:
            break
    return candidate


def inject_kg_noise(kg: np.ndarray, rate: float, seed: int,
                    num_entities: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Give ``round(rate * |kg|)`` triplets a new tail drawn uniformly from all
    entities except the current tail.  Returns the polluted triplets and the
    row indices that were changed."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    kg = np.asarray(kg, dtype=np.int64)
    if num_entities is None:
        num_entities = int(max(kg[:, 0].max(), kg[:, 2].max())) + 1 if len(kg) else 0
    target = round_half_up(rate * len(kg))
    if target == 0:
        return kg.copy(), np.zeros(0, dtype=np.int64)
    if num_entities < 2:
        raise ValueError("KG noise needs at least two entities to pick a replacement tail")
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(len(kg), size=target, replace=False))
    draw = rng.integers(0, num_entities - 1, size=target)
    old = kg[rows, 2]
    out = kg.copy()
    out[rows, 2] = np.where(draw >= old, draw + 1, draw)
    return out, rows
