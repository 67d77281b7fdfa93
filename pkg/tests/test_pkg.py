import itertools

import networkx as nx
import numpy as np
import pytest

from kgtreat.cohortgen import KnowledgeGraph, PatientRecord, Visit
from kgtreat.pkg import (
    BRIDGE,
    SEED,
    InvalidAnchor,
    build_dual_pkgs,
    build_pkg,
    find_bridges,
    load_pkg_cache,
    map_codes_to_nodes,
    save_pkg_cache,
)


def kg_from(n, triples, code_map=None, n_rel=2):
    return KnowledgeGraph(n, n_rel, np.array(triples, dtype=np.int64).reshape(-1, 3), code_map or {})


def brute_bridges(kg, members, k):
    """Every non-member on a simple path (<= k edges) between distinct members."""
    g = nx.Graph()
    g.add_nodes_from(range(kg.n_nodes))
    g.add_edges_from((int(h), int(t)) for h, _, t in kg.triples if h != t)
    out = set()
    for a, b in itertools.combinations(sorted(set(members)), 2):
        for path in nx.all_simple_paths(g, a, b, cutoff=k):
            out.update(n for n in path[1:-1] if n not in members)
    return out


def record(codes_per_visit):
    return PatientRecord(0, [Visit(d * 10, list(c)) for d, c in enumerate(codes_per_visit)], 3, 1)


# -- map_codes_to_nodes --------------------------------------------------------
def test_map_direct_lookup():
    kg = kg_from(4, [[0, 0, 1]], {100: 0, 101: 1})
    assert map_codes_to_nodes(record([[100, 101]]), kg).nodes.tolist() == [0, 1]


def test_map_deduplicates():
    kg = kg_from(4, [[0, 0, 1]], {100: 0, 101: 1})
    s = map_codes_to_nodes(record([[100, 101], [101, 100, 100]]), kg)
    assert s.nodes.tolist() == [0, 1]


def test_map_counts_unmapped():
    kg = kg_from(4, [[0, 0, 1]], {100: 0})
    s = map_codes_to_nodes(record([[100, 555]]), kg)
    assert s.nodes.tolist() == [0] and s.unmapped == 1


def test_map_empty_warns_and_pkg_is_cls_only():
    kg = kg_from(4, [[0, 0, 1]], {100: 0})
    with pytest.warns(UserWarning):
        s = map_codes_to_nodes(record([[999]]), kg)
    g = build_pkg(s.nodes, None, kg)
    assert len(g) == 1 and g.cls_index == 0


# -- build_pkg -----------------------------------------------------------------
def test_two_hop_bridge_found():
    # A=0, X=1, B=2 with path A-X-B
    kg = kg_from(3, [[0, 0, 1], [1, 1, 2]])
    g = build_pkg([0, 2], None, kg, k=2)
    assert g.nodes.tolist() == [0, 2, 1, 3]
    assert g.origin.tolist()[:3] == [SEED, SEED, BRIDGE]
    assert brute_bridges(kg, [0, 2], 2) == {1}


def test_one_hop_no_bridge():
    kg = kg_from(3, [[0, 0, 1], [1, 1, 2]])
    g = build_pkg([0, 2], None, kg, k=1)
    assert g.nodes.tolist() == [0, 2, 3]
    assert brute_bridges(kg, [0, 2], 1) == set()


def test_two_hop_and_200_node_defaults():
    import inspect

    sig = inspect.signature(build_pkg)
    assert sig.parameters["k"].default == 2
    assert sig.parameters["cap"].default == 200


def test_invalid_anchor():
    kg = kg_from(3, [[0, 0, 1]])
    with pytest.raises(InvalidAnchor):
        build_pkg([0], 7, kg)


def test_induced_edges_and_cls():
    kg = kg_from(4, [[0, 0, 1], [1, 1, 0], [2, 0, 3]])
    g = build_pkg([0, 1], None, kg)
    loc = g.local_edges()
    kg_edges = loc[loc[:, 1] != g.cls_relation]
    assert sorted(map(tuple, kg_edges.tolist())) == [(0, 0, 1), (1, 1, 0)]
    assert g.neighbours(g.cls_index) == set(range(len(g) - 1))


def test_cap_keeps_seeds_before_bridges():
    # star: seeds 0..3 all joined through hub 4 and hub 5
    tri = [[s, 0, 4] for s in range(4)] + [[s, 0, 5] for s in range(4)]
    kg = kg_from(6, tri)
    g = build_pkg([0, 1, 2, 3], None, kg, cap=6)
    assert len(g) == 6 and g.nodes.tolist() == [0, 1, 2, 3, 4, 6]
    g = build_pkg([0, 1, 2, 3], None, kg, cap=4)
    assert g.origin.tolist() == [SEED, SEED, SEED, 2]


def test_cap_never_drops_anchor():
    kg = kg_from(6, [[0, 0, 1]])
    g = build_pkg([1, 2, 3, 4], 5, kg, cap=3)
    assert g.nodes[0] == 5 and len(g) == 3


def test_rebuild_is_identical():
    rng = np.random.default_rng(1)
    tri = np.stack([rng.integers(0, 30, 80), rng.integers(0, 3, 80), rng.integers(0, 30, 80)], axis=1)
    kg = kg_from(30, tri, n_rel=3)
    a = build_pkg([1, 5, 9, 22], 3, kg, k=3)
    b = build_pkg([22, 9, 5, 1], 3, kg, k=3)
    assert a.nodes.tolist() == b.nodes.tolist()
    assert a.edges.tolist() == b.edges.tolist()


@pytest.mark.parametrize("trial", range(40))
def test_bridges_match_exhaustive_enumeration(trial):
    rng = np.random.default_rng(trial)
    n = int(rng.integers(5, 40))
    m = int(rng.integers(n, 3 * n))
    tri = np.stack([rng.integers(0, n, m), rng.integers(0, 2, m), rng.integers(0, n, m)], axis=1)
    kg = kg_from(n, tri)
    members = sorted(rng.choice(n, size=int(rng.integers(2, min(n, 8))), replace=False).tolist())
    k = int(rng.integers(1, 4))
    assert set(find_bridges(members, kg, k)) == brute_bridges(kg, members, k)


# -- dual PKGs -----------------------------------------------------------------
def _ten_node_kg():
    # seeds 0,1; treatment anchor 8 reaches 0 via 5; outcome anchor 9 reaches 1 via 6
    tri = [[0, 0, 2], [2, 0, 1], [0, 1, 5], [5, 1, 8], [1, 0, 6], [6, 0, 9], [3, 0, 4], [7, 1, 3]]
    return kg_from(10, tri, {100: 0, 101: 1, 108: 8, 109: 9})


def test_treatment_concept_in_treatment_pkg():
    kg = _ten_node_kg()
    d = build_dual_pkgs(record([[100, 101]]), 8, 9, kg)
    assert 8 in d.treatment_pkg.nodes.tolist()
    assert 9 in d.outcome_pkg.nodes.tolist()


def test_dual_pkgs_differ_only_by_anchor_bridges():
    kg = _ten_node_kg()
    d = build_dual_pkgs(record([[100, 101]]), 8, 9, kg)
    t = set(d.treatment_pkg.nodes.tolist()) - {kg.n_nodes}
    o = set(d.outcome_pkg.nodes.tolist()) - {kg.n_nodes}
    base = {0, 1} | brute_bridges(kg, [0, 1], 2)
    assert t - base == {8} | (brute_bridges(kg, [0, 1, 8], 2) - base)
    assert o - base == {9} | (brute_bridges(kg, [0, 1, 9], 2) - base)
    assert t - o == {8, 5} and o - t == {9, 6}


def test_unlabeled_record_gets_shared_covariate_pkg():
    kg = _ten_node_kg()
    d = build_dual_pkgs(record([[100, 101]]), None, None, kg)
    assert d.shared and d.treatment_anchor is None
    assert d.treatment_pkg.nodes.tolist() == build_pkg([0, 1], None, kg).nodes.tolist()


def test_cache_round_trip(tmp_path):
    kg = _ten_node_kg()
    duals = [build_dual_pkgs(record([[100, 101]]), 8, 9, kg), build_dual_pkgs(record([[100]]), None, None, kg)]
    save_pkg_cache(tmp_path / "p.jsonl", "abc", [0, 1], duals)
    back = load_pkg_cache(tmp_path / "p.jsonl", "abc")
    assert back[0].treatment_pkg.edges.tolist() == duals[0].treatment_pkg.edges.tolist()
    assert back[1].shared
    assert load_pkg_cache(tmp_path / "p.jsonl", "other") is None
