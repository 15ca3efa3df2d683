"""Stochastic triplet masks and facet-aware KG aggregation.

Each triplet owns one logit ``alpha``; its keep probability is
``sigmoid(alpha)``.  One uniform draw per triplet yields the antithetic pair
``b = 1[1 - u < p]`` and ``b_tilde = 1[u < p]`` used by the DisARM estimator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Var
from .graph import T2, KnowledgeGraph


@dataclass(frozen=True)
class MaskSample:
    u: np.ndarray
    b: np.ndarray
    b_tilde: np.ndarray


def keep_probability(alpha: np.ndarray) -> np.ndarray:
    return dc.stable_sigmoid(alpha)


def sample_masks(alpha: np.ndarray, seed=None, rng: np.random.Generator | None = None) -> MaskSample:
    if rng is None:
        rng = np.random.default_rng(seed)
    p = keep_probability(alpha)
    # open interval (0, 1): Generator.random is [0, 1)
    u = rng.random(len(p))
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    b = (1.0 - u < p).astype(np.float64)
    b_tilde = (u < p).astype(np.float64)
    return MaskSample(u, b, b_tilde)


def disarm_gradient(loss_b: float, loss_btilde: float, sample: MaskSample,
                    alpha: np.ndarray) -> np.ndarray:
    """Per-logit DisARM estimate of d E[f] / d alpha from two loss values."""
    differ = sample.b != sample.b_tilde
    sign = np.where(sample.b_tilde > 0, -1.0, 1.0)
    return 0.5 * (loss_b - loss_btilde) * sign * differ * dc.stable_sigmoid(np.abs(alpha))


def keep_probabilities(kg: KnowledgeGraph, alpha: np.ndarray) -> list[dict]:
    """Rows for the KG explain report, lowest keep probability first."""
    p = keep_probability(alpha)
    order = np.lexsort((np.arange(len(p)), p))
    names = {1: "T1", 2: "T2", 3: "T3"}
    return [
        {"triplet_id": int(k), "h": int(kg.triplets[k, 0]), "r": int(kg.triplets[k, 1]),
         "t": int(kg.triplets[k, 2]), "facet": names[int(kg.facet[k])],
         "keep_probability": float(p[k])}
        for k in order
    ]


def kg_aggregate_layer(kg: KnowledgeGraph, entity: Var, relation: Var, w1: Var, w2: Var,
                       gates, single_facet: bool = False) -> Var:
    """One knowledge aggregation layer over all entities.

    For every aggregation edge into ``h`` the message is
    ``relu(W1 (e_t * e_r))`` on T1/T3 triplets and ``relu(W2 (e_t + e_r))``
    on T2 triplets, scaled by the triplet's gate.  Messages are summed and
    divided by the full in-degree of ``h`` (masked edges still count);
    isolated entities get the zero vector.  ``single_facet`` routes every
    triplet through the W1 / product branch.
    """
    if entity.value.ndim != 2 or entity.shape[1] != relation.shape[1]:
        raise dc.ShapeError(f"kg_aggregate_layer: entity {entity.shape} vs relation {relation.shape}")
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (kg.num_triplets,):
        raise dc.ShapeError(f"kg_aggregate_layer: {gates.shape[0]} gates for {kg.num_triplets} triplets")
    n = kg.num_entities
    out = None
    is_t2 = kg.agg_facet == T2
    branches = [(np.ones_like(is_t2), w1, dc.mul)] if single_facet else \
        [(~is_t2, w1, dc.mul), (is_t2, w2, dc.add)]
    for sel, w, compose in branches:
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            continue
        e_t = dc.gather(entity, kg.agg_tail[idx])
        e_r = dc.gather(relation, kg.agg_rel[idx])
        msg = dc.relu(dc.matvec(w, compose(e_t, e_r)))
        msg = dc.scale_rows(gates[kg.agg_triplet[idx]], msg)
        part = dc.scatter_add(msg, kg.agg_head[idx], n)
        out = part if out is None else out + part
    deg = kg.degree().astype(np.float64)
    inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    if out is None:
        return dc.scale_rows(np.zeros(n), entity)
    return dc.scale_rows(inv_deg, out)


def kg_forward(kg: KnowledgeGraph, entity: Var, relation: Var, w1: Var, w2: Var,
               gates, layers: int, single_facet: bool = False) -> tuple[Var, list[Var]]:
    """Stack ``layers`` aggregation layers; returns the layer sum and the
    per-layer outputs (layer 0 is the input table)."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    outs = [entity]
    for _ in range(layers):
        outs.append(kg_aggregate_layer(kg, outs[-1], relation, w1, w2, gates, single_facet))
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    return total, outs
