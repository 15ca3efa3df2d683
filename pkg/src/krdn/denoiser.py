"""Dual-view interaction denoising.

Per training edge ``(u, i)`` two neighbour distributions are kept: the
collaborative one ``p_tilde`` (softmax over ``<e~_u, e~_i>``) and the
knowledge one ``p_hat`` (softmax over the relation-averaged score
``mean_r <e_r * e^_u, e^_i>``).  An edge is kept while
``|sigmoid(p_tilde) - sigmoid(p_hat)| < gamma``.

All batched functions here work on every training edge at once; edges are
the rows of :class:`~krdn.graph.InteractionGraph`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Var
from .graph import InteractionGraph, KnowledgeGraph


@dataclass(frozen=True)
class DenoiseConfig:
    gamma: float = 0.2
    n_iterations: int = 2

    def __post_init__(self):
        if not 0.0 < self.gamma:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")


def segment_softmax(logits: Var, segment: np.ndarray, num_segments: int) -> Var:
    """Softmax of ``logits`` within each group of equal ``segment`` ids.

    The per-group max is subtracted as a constant; softmax is invariant to
    that shift, so gradients are unaffected.
    """
    shift = np.full(num_segments, -np.inf)
    np.maximum.at(shift, segment, logits.value)
    e = dc.exp(logits - shift[segment])
    denom = dc.gather(dc.scatter_add(e, segment, num_segments), segment)
    return e / denom


def relation_means(kg: KnowledgeGraph, relation: Var) -> Var:
    """Per-item mean relation embedding over the item's relation set;
    items with an empty set get the zero vector."""
    n_items = kg.num_items
    owner = np.repeat(np.arange(n_items), np.diff(kg.item_rel_ptr))
    size = np.diff(kg.item_rel_ptr).astype(np.float64)
    inv = np.divide(1.0, size, out=np.zeros_like(size), where=size > 0)
    if len(kg.item_rels) == 0:
        return dc.scale_rows(np.zeros(n_items), dc.gather(relation, np.zeros(n_items, dtype=np.int64)))
    summed = dc.scatter_add(dc.gather(relation, kg.item_rels), owner, n_items)
    return dc.scale_rows(inv, summed)


def collab_logits(ig: InteractionGraph, users: Var, items: Var) -> Var:
    return dc.dot(dc.gather(users, ig.edge_user), dc.gather(items, ig.edge_item))


def knowledge_logits(ig: InteractionGraph, users: Var, items: Var, rel_mean: Var) -> Var:
    # mean_r <e_r * u, i> == <u, i * mean_r e_r>
    return dc.dot(dc.gather(users, ig.edge_user), dc.gather(items * rel_mean, ig.edge_item))


def prune_bits(p_tilde: np.ndarray, p_hat: np.ndarray, gamma: float) -> np.ndarray:
    return (np.abs(dc.stable_sigmoid(p_tilde) - dc.stable_sigmoid(p_hat)) < gamma).astype(np.float64)


def prune_indicator(p_tilde: float, p_hat: float, gamma: float) -> int:
    return int(prune_bits(np.array([p_tilde]), np.array([p_hat]), gamma)[0])


@dataclass
class EnhanceResult:
    user_kg: Var
    user_cf: Var
    p_hat: np.ndarray
    p_tilde: np.ndarray
    bits: np.ndarray
    weights_cf: Var  # final-round m * p_tilde, reused for the item side


def self_enhance(ig: InteractionGraph, user_kg: Var, item_kg: Var, rel_mean: Var,
                 user_cf: Var, item_cf: Var, gamma: float, rounds: int,
                 edge_mask: np.ndarray | None = None, prune: bool = True) -> EnhanceResult:
    """Run ``rounds`` rounds of joint re-weighting for both views.

    Each round recomputes both neighbour distributions from the current user
    vectors, recomputes the hard keep bits (intersected with ``edge_mask``
    when given), and sets every user vector to the L2-normalised sum of
    itself and its kept, probability-weighted neighbours.  Item vectors stay
    fixed.  With ``prune=False`` every bit is 1.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    n_users = ig.num_users
    items_kg_edge = dc.gather(item_kg, ig.edge_item)
    items_cf_edge = dc.gather(item_cf, ig.edge_item)
    for _ in range(rounds):
        p_hat = segment_softmax(knowledge_logits(ig, user_kg, item_kg, rel_mean), ig.edge_user, n_users)
        p_tilde = segment_softmax(collab_logits(ig, user_cf, item_cf), ig.edge_user, n_users)
        if prune:
            bits = prune_bits(p_tilde.value, p_hat.value, gamma)
            if edge_mask is not None:
                bits = bits * edge_mask
        else:
            bits = np.ones(ig.num_edges)
        w_kg = p_hat * bits
        w_cf = p_tilde * bits
        user_kg = dc.l2_normalize(user_kg + dc.scatter_add(dc.scale_rows(w_kg, items_kg_edge), ig.edge_user, n_users))
        user_cf = dc.l2_normalize(user_cf + dc.scatter_add(dc.scale_rows(w_cf, items_cf_edge), ig.edge_user, n_users))
    return EnhanceResult(user_kg, user_cf, p_hat.value, p_tilde.value, bits, w_cf)


# ---------------------------------------------------------------- single-user views

def _edge_subgraph(n_neighbors: int) -> InteractionGraph:
    from .graph import build_interaction_graph

    pairs = np.stack([np.zeros(n_neighbors, dtype=np.int64), np.arange(n_neighbors)], axis=1)
    return build_interaction_graph(pairs, 1, n_neighbors)


def collab_similarity(user_vec: np.ndarray, item_vecs: np.ndarray) -> np.ndarray:
    """Softmax over ``<user, item>`` for one user's neighbour items (rows)."""
    item_vecs = np.asarray(item_vecs, dtype=np.float64)
    if len(item_vecs) == 0:
        return np.zeros(0)
    t = Tape()
    ig = _edge_subgraph(len(item_vecs))
    logits = collab_logits(ig, t.const(np.atleast_2d(user_vec)), t.const(item_vecs))
    return segment_softmax(logits, ig.edge_user, 1).value


def knowledge_similarity(user_vec: np.ndarray, item_vecs: np.ndarray, relation_table: np.ndarray,
                         relation_sets: list) -> np.ndarray:
    """Knowledge-view distribution for one user.  ``relation_sets[k]`` lists
    the relation ids of neighbour item ``k``; an empty set scores 0."""
    item_vecs = np.asarray(item_vecs, dtype=np.float64)
    if len(item_vecs) == 0:
        return np.zeros(0)
    rel = np.asarray(relation_table, dtype=np.float64)
    means = np.array([rel[list(rs)].mean(axis=0) if len(rs) else np.zeros(rel.shape[1])
                      for rs in relation_sets])
    t = Tape()
    ig = _edge_subgraph(len(item_vecs))
    logits = knowledge_logits(ig, t.const(np.atleast_2d(user_vec)), t.const(item_vecs), t.const(means))
    return segment_softmax(logits, ig.edge_user, 1).value


def refresh_similarity_bank(p_tilde: np.ndarray, p_hat: np.ndarray, gamma: float) -> np.ndarray:
    """New loss-masking bank from final-round distributions of a model snapshot."""
    return prune_bits(p_tilde, p_hat, gamma)
