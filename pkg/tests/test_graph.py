import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krdn.data import BoundsError, Counts
from krdn.graph import T1, T2, T3, build_indices, build_interaction_graph, build_knowledge_graph, \
    classify_facets, graph_summary


def test_facet_examples():
    f = classify_facets(np.array([[2, 0, 5], [2, 0, 50], [40, 0, 50], [50, 1, 3]]), num_items=10)
    assert f.tolist() == [T1, T2, T3, T2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 3), st.integers(0, 30)), max_size=40),
       st.integers(0, 31))
def test_facets_partition(trips, num_items):
    kg = np.array(trips, dtype=np.int64).reshape(-1, 3)
    f = classify_facets(kg, num_items)
    assert len(f) == len(kg)
    for (h, _, t), lab in zip(trips, f.tolist()):
        both, one = h < num_items and t < num_items, (h < num_items) != (t < num_items)
        assert lab == (T1 if both else T2 if one else T3)
    assert sum(np.sum(f == x) for x in (T1, T2, T3)) == len(kg)


def test_user_neighbors_sorted():
    ig = build_interaction_graph(np.array([[0, 2], [0, 1], [1, 0]]), 2, 3)
    assert ig.user_neighbors(0).tolist() == [1, 2]
    assert ig.item_neighbors(0).tolist() == [1]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 9)), max_size=50, unique=True))
def test_interaction_graph_invariants(pairs):
    ig = build_interaction_graph(np.array(pairs, dtype=np.int64).reshape(-1, 2), 8, 10)
    assert ig.num_edges == len(pairs)
    assert int(ig.user_degree().sum()) == ig.num_edges
    ids = sorted(ig.edge_id(u, i) for u, i in pairs)
    assert ids == list(range(len(pairs)))
    for u in range(8):
        nb = ig.user_neighbors(u).tolist()
        assert nb == sorted(nb)
        for i in nb:
            assert u in ig.item_neighbors(i).tolist()
    for i in range(10):
        for u in ig.item_neighbors(i).tolist():
            assert i in ig.user_neighbors(u).tolist()


def test_edge_id_missing():
    ig = build_interaction_graph(np.array([[0, 1]]), 1, 3)
    with pytest.raises(KeyError):
        ig.edge_id(0, 2)


def test_relation_sets_deduplicated():
    kg = build_knowledge_graph(np.array([[0, 0, 5], [0, 1, 6], [0, 1, 7]]), 8, 2, num_items=3)
    assert kg.relation_set(0).tolist() == [0, 1]
    assert kg.relation_set(1).tolist() == []


def test_relation_set_counts_head_only():
    # item 1 only appears as a tail
    kg = build_knowledge_graph(np.array([[5, 2, 1]]), 6, 3, num_items=3)
    assert kg.relation_set(1).tolist() == []


def test_inverse_edges_share_triplet_id():
    kg = build_knowledge_graph(np.array([[0, 1, 4], [3, 0, 3]]), 5, 2, num_items=2)
    assert sorted(kg.neighbors(0)) == [(1, 4, 0)]
    assert sorted(kg.neighbors(4)) == [(1, 0, 0)]
    # a self-loop is a single neighbour
    assert kg.neighbors(3) == [(0, 3, 1)]
    assert kg.degree().tolist() == [1, 0, 0, 1, 1]


def test_exact_duplicates_removed():
    kg = build_knowledge_graph(np.array([[0, 0, 2], [1, 0, 2], [0, 0, 2]]), 3, 1, num_items=2)
    assert kg.triplets.tolist() == [[0, 0, 2], [1, 0, 2]]


def test_bounds_errors():
    with pytest.raises(BoundsError):
        build_interaction_graph(np.array([[0, 3]]), 1, 3)
    with pytest.raises(BoundsError):
        build_knowledge_graph(np.array([[0, 0, 9]]), 5, 1, num_items=2)
    with pytest.raises(BoundsError):
        build_knowledge_graph(np.array([[0, 2, 1]]), 5, 1, num_items=2)


def test_index_idempotence():
    inter = np.array([[0, 1], [1, 2], [0, 0]])
    trip = np.array([[0, 0, 3], [1, 1, 4], [3, 0, 4]])
    a = build_indices(inter, trip, Counts(2, 3, 5, 2))
    b = build_indices(inter, trip, Counts(2, 3, 5, 2))
    for x, y in zip(a, b):
        for k, v in vars(x).items():
            assert np.array_equal(v, getattr(y, k))


def test_graph_summary_is_json():
    ig, kg = build_indices(np.array([[0, 1]]), np.array([[0, 0, 3], [3, 0, 4]]), Counts(1, 2, 5, 1))
    s = graph_summary(ig, kg)
    assert s["facets"] == {"T1": 0, "T2": 1, "T3": 1}
    json.dumps(s)
