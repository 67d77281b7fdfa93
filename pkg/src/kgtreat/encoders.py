"""Patient embedding, Transformer sequence encoder and relational graph encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .cohortgen import CLS, PAD, PatientRecord, Vocabulary
from .numerics import functional as F
from .numerics.nn import BatchNorm, Embedding, LayerNorm, Linear, Module, param
from .pkg import Pkg

DAYS_PER_BIN = 30


class DataError(ValueError):
    pass


# -- patient embedding -----------------------------------------------------------
@dataclass
class EncodedRecord:
    tokens: np.ndarray
    types: np.ndarray
    visits: np.ndarray
    bins: np.ndarray


def encode_record(
    record: PatientRecord,
    vocab: Vocabulary,
    max_len: int = 256,
    max_visits: int = 64,
    max_bins: int = 128,
) -> EncodedRecord:
    """Flatten visits into ``[CLS, age, gender, codes...]`` with time indices.

    Sequences longer than ``max_len`` keep their most recent codes. Physical
    time bins are ``day // 30``; visit and bin indices saturate at their table
    sizes.
    """
    days = [v.day for v in record.visits]
    if any(d < 0 for d in days):
        raise DataError(f"record {record.pid}: negative visit day")
    if any(b <= a for a, b in zip(days, days[1:])):
        raise DataError(f"record {record.pid}: visit days must strictly increase")
    code_types = vocab.code_types()
    toks = [CLS, vocab.age_code(record.age), vocab.gender_code(record.gender)]
    vis = [0, 0, 0]
    bins = [0, 0, 0]
    body_t, body_v, body_b = [], [], []
    for i, v in enumerate(record.visits, start=1):
        for c in v.codes:
            body_t.append(c)
            body_v.append(min(i, max_visits - 1))
            body_b.append(min(v.day // DAYS_PER_BIN, max_bins - 1))
    keep = max_len - len(toks)
    if len(body_t) > keep:
        body_t, body_v, body_b = body_t[-keep:], body_v[-keep:], body_b[-keep:]
    tokens = np.array(toks + body_t, dtype=np.int64)
    return EncodedRecord(
        tokens=tokens,
        types=code_types[tokens],
        visits=np.array(vis + body_v, dtype=np.int64),
        bins=np.array(bins + body_b, dtype=np.int64),
    )


@dataclass
class SeqBatch:
    tokens: np.ndarray  # (B, T)
    types: np.ndarray
    visits: np.ndarray
    bins: np.ndarray
    mask: np.ndarray  # (B, T) True for real tokens

    @property
    def shape(self):
        return self.tokens.shape

    def with_tokens(self, tokens: np.ndarray) -> "SeqBatch":
        return SeqBatch(tokens, self.types, self.visits, self.bins, self.mask)


def collate_sequences(encoded: list[EncodedRecord]) -> SeqBatch:
    T = max(e.tokens.size for e in encoded)
    B = len(encoded)
    out = {k: np.zeros((B, T), dtype=np.int64) for k in ("tokens", "types", "visits", "bins")}
    mask = np.zeros((B, T), dtype=bool)
    for i, e in enumerate(encoded):
        n = e.tokens.size
        out["tokens"][i, :n] = e.tokens
        out["types"][i, :n] = e.types
        out["visits"][i, :n] = e.visits
        out["bins"][i, :n] = e.bins
        mask[i, :n] = True
    out["tokens"][~mask] = PAD
    return SeqBatch(mask=mask, **out)


class PatientEmbeddingTables(Module):
    def __init__(self, vocab_size: int, d: int, rng, max_visits: int = 64, max_bins: int = 128):
        self.w_code = Embedding(vocab_size, d, rng)
        self.t_type = Embedding(3, d, rng)
        self.v_visit = Embedding(max_visits, d, rng)
        self.p_physical = Embedding(max_bins, d, rng)


def embed_patient(batch: SeqBatch, tables: PatientEmbeddingTables) -> nx.Tensor:
    """Token embedding = code + type + visit + physical-time rows."""
    return (
        tables.w_code(batch.tokens)
        + tables.t_type(batch.types)
        + tables.v_visit(batch.visits)
        + tables.p_physical(batch.bins)
    )


# -- Transformer -----------------------------------------------------------------
def _split_heads(x: nx.Tensor, n: int) -> nx.Tensor:
    B, T, d = x.shape
    return nx.transpose(x.reshape(B, T, n, d // n), (0, 2, 1, 3))


def _merge_heads(x: nx.Tensor) -> nx.Tensor:
    B, n, T, dh = x.shape
    return nx.transpose(x, (0, 2, 1, 3)).reshape(B, T, n * dh)


def attention(q, k, v, key_mask: np.ndarray | None, n_heads: int):
    """Multi-head scaled dot-product attention; returns (output, weights).

    ``key_mask`` is (B, Tk) with True for attendable keys. Scores are scaled
    by 1/sqrt(d_head).
    """
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = (qh @ nx.swapaxes(kh, -1, -2)) * scale
    mask = None if key_mask is None else key_mask[:, None, None, :]
    w = F.softmax(scores, axis=-1, mask=mask)
    return _merge_heads(w @ vh), w


class MultiHeadAttention(Module):
    def __init__(self, d_q: int, d_kv: int, d_att: int, d_out: int, n_heads: int, rng):
        if d_att % n_heads:
            raise ValueError(f"attention width {d_att} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.wq = Linear(d_q, d_att, rng)
        self.wk = Linear(d_kv, d_att, rng)
        self.wv = Linear(d_kv, d_att, rng)
        self.wo = Linear(d_att, d_out, rng)
        self.last_weights: np.ndarray | None = None
        self.keep_weights = False

    def __call__(self, xq, xkv, key_mask):
        out, w = attention(self.wq(xq), self.wk(xkv), self.wv(xkv), key_mask, self.n_heads)
        if self.keep_weights:
            self.last_weights = w.data.copy()
        return self.wo(out)


class TransformerLayer(Module):
    """Post-LN encoder block: self-attention then GELU feed-forward."""

    def __init__(self, d: int, n_heads: int, d_ff: int, dropout: float, rng):
        self.attn = MultiHeadAttention(d, d, d, d, n_heads, rng)
        self.ln1 = LayerNorm(d)
        self.ff1 = Linear(d, d_ff, rng)
        self.ff2 = Linear(d_ff, d, rng)
        self.ln2 = LayerNorm(d)
        self.dropout = dropout
        self.rng = None

    def __call__(self, h, mask):
        a = F.dropout(self.attn(h, h, mask), self.dropout, self.rng, self.training)
        h = self.ln1(h + a)
        f = self.ff2(F.gelu(self.ff1(h)))
        f = F.dropout(f, self.dropout, self.rng, self.training)
        return self.ln2(h + f)


class SequenceEncoder(Module):
    def __init__(self, d: int, n_heads: int, n_layers: int, d_ff: int, dropout: float, rng):
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by {n_heads} heads")
        self.layers = [TransformerLayer(d, n_heads, d_ff, dropout, rng) for _ in range(n_layers)]

    def __call__(self, h, mask) -> list[nx.Tensor]:
        """All layer outputs, input first; N = 0 returns just the input."""
        states = [h]
        for layer in self.layers:
            h = layer(h, mask)
            states.append(h)
        return states


def encode_sequence(embeddings, mask, encoder: SequenceEncoder) -> list[nx.Tensor]:
    return encoder(embeddings, mask)


# -- graph side --------------------------------------------------------------------
def init_node_embeddings(node_ids, seed: int, width: int = 200, sigma: float = 1.0) -> np.ndarray:
    """Fixed Gaussian features drawn from a generator keyed on (seed, node id)."""
    ids = np.asarray(node_ids, dtype=np.int64).reshape(-1)
    out = np.empty((ids.size, width))
    for i, n in enumerate(ids):
        out[i] = np.random.default_rng([seed, int(n), 0xD0DE]).normal(0.0, sigma, width)
    return out


def node_feature_table(n_nodes: int, seed: int, width: int = 200) -> np.ndarray:
    """Features for every KG node plus the CLS slot (row ``n_nodes``)."""
    return init_node_embeddings(np.arange(n_nodes + 1), seed, width) / math.sqrt(width)


@dataclass
class GraphBatch:
    """Several PKGs flattened into one node set with relation-typed edges."""

    node_ids: np.ndarray  # (N,) rows of the node-feature table
    graph_of: np.ndarray  # (N,)
    src: np.ndarray  # (E,) message source
    dst: np.ndarray  # (E,) message target
    rel: np.ndarray  # (E,) relation ids incl. inverse and self/CLS relations
    pad_index: np.ndarray  # (G, Nmax) flat index per padded slot
    pad_mask: np.ndarray  # (G, Nmax)
    cls_flat: np.ndarray  # (G,)
    anchor_flat: np.ndarray  # (G,) anchor node, or CLS when absent
    kg_edges: list[np.ndarray]  # per graph: local (h, r, t) KG edges (no CLS)
    offsets: np.ndarray  # (G,)
    hidden: np.ndarray  # (N,) nodes whose identity is withheld

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.size)

    @property
    def n_graphs(self) -> int:
        return int(self.cls_flat.size)

    def padded_position(self, flat: np.ndarray) -> np.ndarray:
        """Column of each flat node inside its padded row."""
        return np.asarray(flat) - self.offsets[self.graph_of[np.asarray(flat)]]


def n_relation_ids(n_kg_relations: int) -> int:
    """KG relations, the CLS/self relation, and an inverse of each."""
    return 2 * (n_kg_relations + 1)


def collate_graphs(pkgs: list[Pkg], n_kg_relations: int, hidden_nodes: list[set[int]] | None = None) -> GraphBatch:
    cls_rel = n_kg_relations
    inv = n_kg_relations + 1
    node_ids, graph_of, src, dst, rel, kg_edges = [], [], [], [], [], []
    offsets, cls_flat, anchor_flat, hidden = [], [], [], []
    off = 0
    for g_i, g in enumerate(pkgs):
        n = len(g)
        offsets.append(off)
        node_ids.append(g.nodes)
        graph_of.append(np.full(n, g_i))
        loc = g.local_edges()
        is_kg = loc[:, 1] != cls_rel
        kg = loc[is_kg]
        cl = loc[~is_kg]
        kg_edges.append(kg)
        idx = np.arange(n)
        # forward KG, inverse KG, CLS (already bidirectional), self loops
        src += [kg[:, 0] + off, kg[:, 2] + off, cl[:, 0] + off, idx + off]
        dst += [kg[:, 2] + off, kg[:, 0] + off, cl[:, 2] + off, idx + off]
        rel += [kg[:, 1], kg[:, 1] + inv, cl[:, 1], np.full(n, cls_rel)]
        cls_flat.append(off + g.cls_index)
        anchor_flat.append(off + (g.anchor_index if g.anchor_index is not None else g.cls_index))
        h = np.zeros(n, dtype=bool)
        if hidden_nodes is not None and hidden_nodes[g_i]:
            h = np.isin(g.nodes, list(hidden_nodes[g_i])) & (g.origin == 0)
        hidden.append(h)
        off += n
    G = len(pkgs)
    n_max = max(len(g) for g in pkgs)
    pad_index = np.zeros((G, n_max), dtype=np.int64)
    pad_mask = np.zeros((G, n_max), dtype=bool)
    for g_i, g in enumerate(pkgs):
        pad_index[g_i, : len(g)] = offsets[g_i] + np.arange(len(g))
        pad_mask[g_i, : len(g)] = True
    cat = lambda xs: np.concatenate(xs).astype(np.int64)
    return GraphBatch(
        node_ids=cat(node_ids),
        graph_of=cat(graph_of),
        src=cat(src),
        dst=cat(dst),
        rel=cat(rel),
        pad_index=pad_index,
        pad_mask=pad_mask,
        cls_flat=np.array(cls_flat, dtype=np.int64),
        anchor_flat=np.array(anchor_flat, dtype=np.int64),
        kg_edges=kg_edges,
        offsets=np.array(offsets, dtype=np.int64),
        hidden=np.concatenate(hidden),
    )


def to_padded(v_flat: nx.Tensor, gb: GraphBatch) -> nx.Tensor:
    return F.masked_rows(v_flat, gb.pad_index, gb.pad_mask)


def to_flat(v_pad: nx.Tensor, gb: GraphBatch) -> nx.Tensor:
    G, n_max, d = v_pad.shape
    flat_pos = gb.graph_of * n_max + gb.padded_position(np.arange(gb.n_nodes))
    return F.take_rows(v_pad.reshape(G * n_max, d), flat_pos)


class GNNLayer(Module):
    """Relation-aware graph attention with a residual node update.

    For node i with incoming set N(i) plus itself:
    ``v_i <- f_v(sum_s alpha_si m_si) + v_i`` where ``m_si = f_m(v_s, r_si)``,
    ``alpha_si = softmax_s(q_s . k_i / sqrt(d))``, ``q_s = f_q(v_s)`` and
    ``k_i = f_k(v_i, r_si)``. The two-argument transforms are linear maps of
    the concatenated inputs, computed as node part plus relation part.
    """

    def __init__(self, d: int, rng, dropout: float = 0.0, strict_batchnorm: bool = False):
        self.f_q = Linear(d, d, rng)
        self.f_k_node = Linear(d, d, rng)
        self.f_k_rel = Linear(d, d, rng, bias=False)
        self.f_m_node = Linear(d, d, rng)
        self.f_m_rel = Linear(d, d, rng, bias=False)
        self.f_v1 = Linear(d, d, rng)
        self.norm = BatchNorm(d) if strict_batchnorm else LayerNorm(d)
        self.f_v2 = Linear(d, d, rng)
        self.dropout = dropout
        self.rng = None
        self.last_alpha: np.ndarray | None = None
        self.keep_weights = False

    def f_v(self, x):
        return self.f_v2(F.gelu(self.norm(self.f_v1(x))))

    def __call__(self, v: nx.Tensor, rel_table: nx.Tensor, gb: GraphBatch) -> nx.Tensor:
        if gb.rel.size and gb.rel.max() >= rel_table.shape[0]:
            raise ValueError(f"edge relation {int(gb.rel.max())} outside relation table")
        n, d = v.shape
        q = F.take_rows(self.f_q(v), gb.src)
        k = F.take_rows(self.f_k_node(v), gb.dst) + F.take_rows(self.f_k_rel(rel_table), gb.rel)
        logits = (q * k).sum(axis=1) * (1.0 / math.sqrt(d))
        alpha = F.segment_softmax(logits, gb.dst, n)
        if self.keep_weights:
            self.last_alpha = alpha.data.copy()
        m = F.take_rows(self.f_m_node(v), gb.src) + F.take_rows(self.f_m_rel(rel_table), gb.rel)
        agg = F.segment_sum(m * alpha.reshape(-1, 1), gb.dst, n)
        upd = F.dropout(self.f_v(agg), self.dropout, self.rng, self.training)
        return upd + v


def gnn_layer(v, gb: GraphBatch, layer: GNNLayer, rel_table) -> nx.Tensor:
    return layer(v, rel_table, gb)


class GraphEncoder(Module):
    """Input projection of fixed node features, relation table, M GNN layers."""

    def __init__(
        self,
        n_kg_relations: int,
        d: int,
        n_layers: int,
        rng,
        feature_width: int = 200,
        dropout: float = 0.0,
        strict_batchnorm: bool = False,
    ):
        self.n_kg_relations = n_kg_relations
        self.in_proj = Linear(feature_width, d, rng)
        self.relations = Embedding(n_relation_ids(n_kg_relations), d, rng, std=1.0 / math.sqrt(d))
        self.layers = [GNNLayer(d, rng, dropout, strict_batchnorm) for _ in range(n_layers)]

    def initial_states(self, features: np.ndarray, gb: GraphBatch) -> nx.Tensor:
        x = features[gb.node_ids]
        if gb.hidden.any():
            x = x.copy()
            x[gb.hidden] = 0.0
        return self.in_proj(nx.Tensor(x))

    def __call__(self, features: np.ndarray, gb: GraphBatch) -> list[nx.Tensor]:
        v = self.initial_states(features, gb)
        states = [v]
        for layer in self.layers:
            v = layer(v, self.relations.weight, gb)
            states.append(v)
        return states
