import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgtreat import numerics as nx
from kgtreat.cohortgen import CLS, PAD, KnowledgeGraph, PatientRecord, Visit, Vocabulary
from kgtreat.encoders import (
    DataError,
    GNNLayer,
    GraphEncoder,
    PatientEmbeddingTables,
    SequenceEncoder,
    attention,
    collate_graphs,
    collate_sequences,
    embed_patient,
    encode_record,
    init_node_embeddings,
    n_relation_ids,
)
from kgtreat.numerics.gradcheck import check_grads
from kgtreat.pkg import build_pkg

VOCAB = Vocabulary(6, 5)


def rec(visits, age=2, gender=1):
    return PatientRecord(0, [Visit(d, c) for d, c in visits], age, gender)


# -- patient embedding -----------------------------------------------------------
def test_layout_and_time_indices():
    med = int(VOCAB.med_ids[0])
    diag = int(VOCAB.diag_ids[1])
    e = encode_record(rec([(3, [med]), (65, [diag, med])]), VOCAB)
    assert e.tokens.tolist() == [CLS, VOCAB.age_code(2), VOCAB.gender_code(1), med, diag, med]
    assert e.visits.tolist() == [0, 0, 0, 1, 2, 2]
    assert e.bins.tolist() == [0, 0, 0, 0, 2, 2]
    assert e.types.tolist() == [0, 0, 0, 1, 2, 1]


def test_day_65_is_bin_2():
    e = encode_record(rec([(65, [int(VOCAB.med_ids[0])])]), VOCAB)
    assert e.bins[-1] == 65 // 30 == 2


@pytest.mark.parametrize("days", [[-1, 4], [5, 5], [9, 3]])
def test_bad_days(days):
    with pytest.raises(DataError):
        encode_record(rec([(d, [int(VOCAB.med_ids[0])]) for d in days]), VOCAB)


def test_truncation_keeps_latest_codes():
    codes = [int(c) for c in VOCAB.clinical_ids]
    r = rec([(i * 10, [codes[i % len(codes)]]) for i in range(20)])
    e = encode_record(r, VOCAB, max_len=8)
    assert e.tokens.size == 8 and e.tokens[0] == CLS
    assert e.tokens[3:].tolist() == [codes[i % len(codes)] for i in range(15, 20)]


def test_collate_pads_and_masks():
    a = encode_record(rec([(0, [20])]), VOCAB)
    b = encode_record(rec([(0, [20, 21]), (40, [22])]), VOCAB)
    sb = collate_sequences([a, b])
    assert sb.tokens.shape == (2, 6)
    assert sb.mask.tolist()[0] == [True] * 4 + [False] * 2
    assert (sb.tokens[0, 4:] == PAD).all()


def _tables(d=4, fill=None):
    t = PatientEmbeddingTables(VOCAB.size, d, np.random.default_rng(0), max_visits=8, max_bins=8)
    if fill is not None:
        for tab in (t.w_code, t.t_type, t.v_visit, t.p_physical):
            tab.weight.data[...] = fill(tab.weight.data.shape)
    return t


def test_zero_tables_zero_embeddings():
    t = _tables(fill=np.zeros)
    sb = collate_sequences([encode_record(rec([(0, [20, 21])]), VOCAB)])
    assert np.all(embed_patient(sb, t).data == 0)


def test_embedding_is_sum_of_four_rows():
    t = _tables()
    for i, tab in enumerate((t.w_code, t.t_type, t.v_visit, t.p_physical)):
        tab.weight.data[...] = 0.0
        tab.weight.data[:, i] = np.arange(tab.weight.shape[0]) + 1
    e = encode_record(rec([(31, [int(VOCAB.diag_ids[0])])]), VOCAB)
    out = embed_patient(collate_sequences([e]), t).data[0]
    expected = np.stack([e.tokens + 1, e.types + 1, e.visits + 1, e.bins + 1], axis=1)
    np.testing.assert_array_equal(out, expected)


# -- sequence encoder ----------------------------------------------------------------
def test_zero_layers_identity():
    enc = SequenceEncoder(8, 2, 0, 16, 0.0, np.random.default_rng(0))
    x = nx.Tensor(np.random.default_rng(1).normal(size=(2, 5, 8)))
    assert enc(x, np.ones((2, 5), bool))[-1] is x


def test_single_token_attends_to_itself():
    rng = np.random.default_rng(0)
    q = k = v = nx.Tensor(rng.normal(size=(1, 1, 8)))
    _, w = attention(q, k, v, np.ones((1, 1), bool), 2)
    np.testing.assert_array_equal(w.data, np.ones((1, 2, 1, 1)))


def test_attention_rows_stochastic_and_mask_respected():
    rng = np.random.default_rng(2)
    x = nx.Tensor(rng.normal(size=(3, 7, 8)))
    mask = np.ones((3, 7), bool)
    mask[0, 4:] = False
    mask[2, 1:] = False
    _, w = attention(x, x, x, mask, 4)
    assert np.abs(w.data.sum(-1) - 1).max() < 1e-12
    assert np.all(w.data[0, :, :, 4:] == 0) and np.all(w.data[2, :, :, 1:] == 0)


def test_padding_does_not_change_real_positions():
    rng = np.random.default_rng(3)
    enc = SequenceEncoder(8, 2, 2, 16, 0.0, rng)
    x = rng.normal(size=(1, 4, 8))
    padded = np.concatenate([x, rng.normal(size=(1, 3, 8))], axis=1)
    a = enc(nx.Tensor(x), np.ones((1, 4), bool))[-1].data
    m = np.zeros((1, 7), bool)
    m[0, :4] = True
    b = enc(nx.Tensor(padded), m)[-1].data[:, :4]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        SequenceEncoder(10, 4, 1, 16, 0.0, np.random.default_rng(0))


def test_sequence_stack_gradcheck():
    rng = np.random.default_rng(4)
    enc = SequenceEncoder(8, 2, 2, 16, 0.0, rng)
    x = nx.Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
    w = nx.Tensor(rng.normal(size=(2, 4, 8)))
    params = [x] + list(enc.parameters().values())
    errs = check_grads(lambda: (enc(x, mask)[-1] * w).sum(), params, atol=1e-9)
    assert max(errs.values()) < 1e-4


# -- node init -----------------------------------------------------------------------
def test_node_init_deterministic_by_id():
    a = init_node_embeddings([3, 9, 4], seed=1)
    b = init_node_embeddings([4, 3], seed=1)
    np.testing.assert_array_equal(a[0], b[1])
    np.testing.assert_array_equal(a[2], b[0])


def test_node_init_seed_matters():
    assert not np.array_equal(init_node_embeddings([0, 1], 1), init_node_embeddings([0, 1], 2))


def test_node_init_norms_concentrate():
    x = init_node_embeddings(np.arange(400), seed=0, sigma=0.5)
    norms = np.linalg.norm(x, axis=1)
    assert abs(norms.mean() - np.sqrt(200) * 0.5) < 0.05 * np.sqrt(200) * 0.5
    assert x.shape == (400, 200)


# -- graph encoder ------------------------------------------------------------------
def _kg(n, triples, n_rel=2):
    return KnowledgeGraph(n, n_rel, np.array(triples, dtype=np.int64).reshape(-1, 3))


def _layer(d=8, seed=0):
    return GNNLayer(d, np.random.default_rng(seed))


def test_isolated_node_self_weight_one():
    kg = _kg(3, [[1, 0, 2]])
    g = build_pkg([0], None, kg)
    gb = collate_graphs([g], kg.n_relations)
    # drop CLS edges so node 0 only has its self loop
    keep = gb.rel != kg.n_relations
    keep |= gb.src == gb.dst
    gb.src, gb.dst, gb.rel = gb.src[keep], gb.dst[keep], gb.rel[keep]
    layer = _layer()
    layer.keep_weights = True
    rel = nx.Tensor(np.random.default_rng(0).normal(size=(n_relation_ids(2), 8)))
    layer(nx.Tensor(np.random.default_rng(1).normal(size=(gb.n_nodes, 8))), rel, gb)
    assert layer.last_alpha[(gb.dst == 0)].tolist() == [1.0]


def test_symmetric_neighbours_equal_attention():
    # node 0 receives from 1 and 2 through the same relation; 1 and 2 share states
    kg = _kg(3, [[1, 0, 0], [2, 0, 0]], n_rel=1)
    g = build_pkg([0, 1, 2], None, kg)
    gb = collate_graphs([g], 1)
    v = np.random.default_rng(2).normal(size=(gb.n_nodes, 8))
    v[2] = v[1]
    layer = _layer()
    layer.keep_weights = True
    rel = nx.Tensor(np.random.default_rng(3).normal(size=(n_relation_ids(1), 8)))
    layer(nx.Tensor(v), rel, gb)
    into0 = gb.dst == 0
    a = dict(zip(gb.src[into0].tolist(), layer.last_alpha[into0].tolist()))
    assert a[1] == pytest.approx(a[2], abs=1e-15)


def test_zero_update_is_identity():
    kg = _kg(4, [[0, 0, 1], [1, 1, 2]])
    gb = collate_graphs([build_pkg([0, 2], None, kg)], 2)
    layer = _layer()
    layer.f_v2.weight.data[...] = 0
    layer.f_v2.bias.data[...] = 0
    v = nx.Tensor(np.random.default_rng(0).normal(size=(gb.n_nodes, 8)))
    rel = nx.Tensor(np.random.default_rng(1).normal(size=(n_relation_ids(2), 8)))
    np.testing.assert_array_equal(layer(v, rel, gb).data, v.data)


def test_unknown_relation_rejected():
    kg = _kg(4, [[0, 1, 1]])
    gb = collate_graphs([build_pkg([0, 1], None, kg)], 2)
    v = nx.Tensor(np.zeros((gb.n_nodes, 8)))
    with pytest.raises(ValueError):
        _layer()(v, nx.Tensor(np.zeros((2, 8))), gb)


def _random_pkg(rng, n=10, n_rel=3):
    m = int(rng.integers(n, 3 * n))
    tri = np.stack([rng.integers(0, n, m), rng.integers(0, n_rel, m), rng.integers(0, n, m)], axis=1)
    kg = _kg(n, tri, n_rel)
    seeds = rng.choice(n, size=int(rng.integers(2, n)), replace=False)
    return kg, build_pkg(seeds, None, kg, k=2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_attention_normalised_per_target(seed):
    rng = np.random.default_rng(seed)
    kg, g = _random_pkg(rng)
    gb = collate_graphs([g], kg.n_relations)
    layer = _layer(seed=seed % 97)
    layer.keep_weights = True
    rel = nx.Tensor(rng.normal(size=(n_relation_ids(kg.n_relations), 8)))
    layer(nx.Tensor(rng.normal(size=(gb.n_nodes, 8))), rel, gb)
    sums = np.zeros(gb.n_nodes)
    np.add.at(sums, gb.dst, layer.last_alpha)
    assert np.abs(sums - 1).max() < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_graph_encoder_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    kg, g = _random_pkg(rng)
    enc = GraphEncoder(kg.n_relations, 8, 2, np.random.default_rng(1), feature_width=6)
    feats = rng.normal(size=(kg.n_nodes + 1, 6))
    gb = collate_graphs([g], kg.n_relations)
    out = enc(feats, gb)[-1].data

    perm = rng.permutation(len(g))
    g2 = type(g)(g.nodes[perm], g.origin[perm], g.edges, int(np.argsort(perm)[g.cls_index]), g.cls_id, g.cls_relation)
    gb2 = collate_graphs([g2], kg.n_relations)
    out2 = enc(feats, gb2)[-1].data
    np.testing.assert_allclose(out2, out[perm], atol=1e-10)


def test_graph_stack_gradcheck():
    rng = np.random.default_rng(5)
    kg, g = _random_pkg(rng, n=8, n_rel=2)
    gb = collate_graphs([g, build_pkg([0, 1], 2, kg)], kg.n_relations)
    enc = GraphEncoder(kg.n_relations, 8, 2, rng, feature_width=5)
    feats = rng.normal(size=(kg.n_nodes + 1, 5))
    w = nx.Tensor(rng.normal(size=(gb.n_nodes, 8)))
    params = list(enc.parameters().values())
    errs = check_grads(lambda: (enc(feats, gb)[-1] * w).sum(), params, atol=1e-9)
    assert max(errs.values()) < 1e-4


def test_strict_batchnorm_gradcheck():
    rng = np.random.default_rng(6)
    kg, g = _random_pkg(rng, n=8, n_rel=2)
    gb = collate_graphs([g], kg.n_relations)
    enc = GraphEncoder(kg.n_relations, 8, 1, rng, feature_width=5, strict_batchnorm=True)
    feats = rng.normal(size=(kg.n_nodes + 1, 5))
    w = nx.Tensor(rng.normal(size=(gb.n_nodes, 8)))
    errs = check_grads(lambda: (enc(feats, gb)[-1] * w).sum(), list(enc.parameters().values()), atol=1e-9)
    assert max(errs.values()) < 1e-4


def test_hidden_nodes_lose_identity():
    kg = _kg(4, [[0, 0, 1]])
    g = build_pkg([0, 1], None, kg)
    gb = collate_graphs([g], 2, hidden_nodes=[{1}])
    assert gb.hidden.tolist() == [False, True, False]
    enc = GraphEncoder(2, 8, 0, np.random.default_rng(0), feature_width=5)
    feats = np.random.default_rng(1).normal(size=(5, 5))
    v = enc.initial_states(feats, gb).data
    np.testing.assert_allclose(v[1], enc.in_proj.bias.data)
