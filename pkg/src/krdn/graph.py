"""Immutable adjacency indices over the user-item graph and the KG."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BoundsError, Counts

T1, T2, T3 = 1, 2, 3
FACET_NAMES = {T1: "T1", T2: "T2", T3: "T3"}


def classify_facets(triplets: np.ndarray, num_items: int) -> np.ndarray:
    """Facet label per triplet: T1 item-item, T2 exactly one item endpoint,
    T3 attribute-attribute."""
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    n_item_ends = (triplets[:, 0] < num_items).astype(np.int64) + (triplets[:, 2] < num_items)
    return np.select([n_item_ends == 2, n_item_ends == 1], [T1, T2], T3).astype(np.int8)


def _csr(keys: np.ndarray, size: int) -> np.ndarray:
    ptr = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(np.bincount(keys, minlength=size), out=ptr[1:])
    return ptr


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Training edges sorted by ``(user, item)``; edge id = row position."""

    num_users: int
    num_items: int
    edge_user: np.ndarray
    edge_item: np.ndarray
    user_ptr: np.ndarray
    item_ptr: np.ndarray
    item_edges: np.ndarray  # edge ids grouped by item, users ascending

    @property
    def num_edges(self) -> int:
        return len(self.edge_user)

    def user_neighbors(self, u: int) -> np.ndarray:
        return self.edge_item[self.user_ptr[u]:self.user_ptr[u + 1]]

    def item_neighbors(self, i: int) -> np.ndarray:
        return self.edge_user[self.item_edges[self.item_ptr[i]:self.item_ptr[i + 1]]]

    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    def edge_id(self, u: int, i: int) -> int:
        lo, hi = self.user_ptr[u], self.user_ptr[u + 1]
        pos = lo + int(np.searchsorted(self.edge_item[lo:hi], i))
        if pos >= hi or self.edge_item[pos] != i:
            raise KeyError((u, i))
        return int(pos)

    def edge_keys(self) -> np.ndarray:
        return self.edge_user * self.num_items + self.edge_item


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Triplets plus directed aggregation edges.

    Every triplet ``(h, r, t)`` yields the forward edge ``t -> h`` and, unless
    it is a self-loop, the inverse edge ``h -> t``; both carry the triplet id
    and facet, so a single mask bit gates both directions.  Aggregation edges
    are sorted by receiving entity.
    """

    num_entities: int
    num_relations: int
    num_items: int
    triplets: np.ndarray
    facet: np.ndarray
    agg_head: np.ndarray
    agg_rel: np.ndarray
    agg_tail: np.ndarray
    agg_triplet: np.ndarray
    agg_facet: np.ndarray
    head_ptr: np.ndarray
    item_rel_ptr: np.ndarray
    item_rels: np.ndarray

    @property
    def num_triplets(self) -> int:
        return len(self.triplets)

    def neighbors(self, h: int) -> list[tuple[int, int, int]]:
        """``(relation, tail, triplet_id)`` for every aggregation edge into ``h``."""
        lo, hi = self.head_ptr[h], self.head_ptr[h + 1]
        return list(zip(self.agg_rel[lo:hi].tolist(), self.agg_tail[lo:hi].tolist(),
                        self.agg_triplet[lo:hi].tolist()))

    def degree(self) -> np.ndarray:
        return np.diff(self.head_ptr)

    def relation_set(self, i: int) -> np.ndarray:
        return self.item_rels[self.item_rel_ptr[i]:self.item_rel_ptr[i + 1]]

    def facet_counts(self) -> dict[str, int]:
        return {FACET_NAMES[f]: int(np.sum(self.facet == f)) for f in (T1, T2, T3)}


def build_interaction_graph(train: np.ndarray, num_users: int, num_items: int) -> InteractionGraph:
    pairs = np.unique(np.asarray(train, dtype=np.int64).reshape(-1, 2), axis=0)
    if len(pairs):
        if pairs[:, 0].max() >= num_users or pairs[:, 0].min() < 0:
            raise BoundsError(f"user index out of range [0, {num_users})")
        if pairs[:, 1].max() >= num_items or pairs[:, 1].min() < 0:
            raise BoundsError(f"item index out of range [0, {num_items})")
    eu, ei = pairs[:, 0].copy(), pairs[:, 1].copy()
    item_edges = np.lexsort((eu, ei))
    return InteractionGraph(num_users, num_items, eu, ei, _csr(eu, num_users),
                            _csr(ei, num_items), item_edges)


def build_knowledge_graph(kg: np.ndarray, num_entities: int, num_relations: int,
                          num_items: int) -> KnowledgeGraph:
    kg = np.asarray(kg, dtype=np.int64).reshape(-1, 3)
    if len(kg):
        if min(kg[:, 0].min(), kg[:, 2].min()) < 0 or max(kg[:, 0].max(), kg[:, 2].max()) >= num_entities:
            raise BoundsError(f"entity index out of range [0, {num_entities})")
        if kg[:, 1].min() < 0 or kg[:, 1].max() >= num_relations:
            raise BoundsError(f"relation index out of range [0, {num_relations})")
        # exact duplicates removed, first occurrence order kept
        _, first = np.unique(kg, axis=0, return_index=True)
        kg = kg[np.sort(first)]
    if num_items > num_entities:
        raise BoundsError("items must be a prefix of the entity space")
    facet = classify_facets(kg, num_items)
    h, r, t = kg[:, 0], kg[:, 1], kg[:, 2]
    ids = np.arange(len(kg), dtype=np.int64)
    inv = h != t
    heads = np.concatenate([h, t[inv]])
    tails = np.concatenate([t, h[inv]])
    rels = np.concatenate([r, r[inv]])
    trip = np.concatenate([ids, ids[inv]])
    order = np.lexsort((trip, heads))
    heads, tails, rels, trip = heads[order], tails[order], rels[order], trip[order]

    item_head = h < num_items
    ir = np.unique(np.stack([h[item_head], r[item_head]], axis=1), axis=0).reshape(-1, 2)
    return KnowledgeGraph(
        num_entities=num_entities, num_relations=num_relations, num_items=num_items,
        triplets=kg, facet=facet, agg_head=heads, agg_rel=rels, agg_tail=tails,
        agg_triplet=trip, agg_facet=facet[trip], head_ptr=_csr(heads, num_entities),
        item_rel_ptr=_csr(ir[:, 0], num_items), item_rels=ir[:, 1].copy(),
    )


def build_indices(interactions: np.ndarray, triplets: np.ndarray,
                  counts: Counts) -> tuple[InteractionGraph, KnowledgeGraph]:
    ig = build_interaction_graph(interactions, counts.num_users, counts.num_items)
    kg = build_knowledge_graph(triplets, max(counts.num_entities, counts.num_items),
                               counts.num_relations, counts.num_items)
    return ig, kg


def graph_summary(ig: InteractionGraph, kg: KnowledgeGraph) -> dict:
    """Facet counts and degree histograms, for debug dumps."""
    def hist(deg):
        values, freq = np.unique(deg, return_counts=True)
        return {str(int(v)): int(c) for v, c in zip(values, freq)}

    return {
        "num_users": ig.num_users, "num_items": ig.num_items, "num_edges": ig.num_edges,
        "num_entities": kg.num_entities, "num_relations": kg.num_relations,
        "num_triplets": kg.num_triplets, "facets": kg.facet_counts(),
        "user_degree_histogram": hist(ig.user_degree()),
        "entity_degree_histogram": hist(kg.degree()),
    }
