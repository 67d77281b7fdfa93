"""Full model: sequence encoder, graph encoder, synergy layers and heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .cohortgen import PatientRecord, Vocabulary
from .dive import SynergyLayer
from .encoders import (
    GraphBatch,
    GraphEncoder,
    PatientEmbeddingTables,
    SeqBatch,
    SequenceEncoder,
    collate_graphs,
    collate_sequences,
    embed_patient,
    encode_record,
    node_feature_table,
    to_flat,
    to_padded,
)
from .numerics import functional as F
from .numerics.nn import LayerNorm, Linear, Module
from .pkg import DualPkg

HEAD_PREFIX = "heads."


@dataclass
class ModelConfig:
    vocab_size: int
    n_kg_nodes: int
    n_kg_relations: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    graph_dim: int = 64
    node_feature_width: int = 200
    gnn_layers: int = 2
    synergy_layers: int = 2
    max_len: int = 256
    max_visits: int = 64
    max_bins: int = 128
    dropout: float = 0.1
    use_kg: bool = True
    strict_batchnorm: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.use_kg:
            if self.gnn_layers > self.n_layers:
                raise ValueError("graph encoder deeper than sequence encoder")
            if self.synergy_layers > self.n_layers:
                raise ValueError("synergy layers cannot exceed sequence encoder depth")


@dataclass
class ModelBatch:
    seq: SeqBatch
    graph_a: GraphBatch | None = None
    graph_y: GraphBatch | None = None
    treatment: np.ndarray | None = None
    outcome: np.ndarray | None = None
    pids: list[int] = field(default_factory=list)

    @property
    def shared(self) -> bool:
        return self.graph_a is self.graph_y

    @property
    def size(self) -> int:
        return self.seq.tokens.shape[0]


def make_batch(
    records: list[PatientRecord],
    duals: list[DualPkg] | None,
    vocab: Vocabulary,
    cfg: ModelConfig,
    hidden_nodes: list[set[int]] | None = None,
) -> ModelBatch:
    seq = collate_sequences([encode_record(r, vocab, cfg.max_len, cfg.max_visits, cfg.max_bins) for r in records])
    ga = gy = None
    if cfg.use_kg and duals is not None:
        ga = collate_graphs([d.treatment_pkg for d in duals], cfg.n_kg_relations, hidden_nodes)
        if all(d.shared for d in duals):
            gy = ga
        else:
            gy = collate_graphs([d.outcome_pkg for d in duals], cfg.n_kg_relations, hidden_nodes)
    labeled = all(r.treatment is not None for r in records)
    return ModelBatch(
        seq=seq,
        graph_a=ga,
        graph_y=gy,
        treatment=np.array([r.treatment for r in records], dtype=float) if labeled else None,
        outcome=np.array([r.outcome for r in records], dtype=float) if labeled else None,
        pids=[r.pid for r in records],
    )


@dataclass
class Forward:
    h: nx.Tensor  # (B, T, d) final sequence states
    v_a: nx.Tensor | None = None  # flat final graph states
    v_y: nx.Tensor | None = None
    batch: ModelBatch | None = None


class Mlp(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng):
        self.l1 = Linear(d_in, d_hidden, rng)
        self.l2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x):
        return self.l2(F.gelu(self.l1(x)))


class EffectHeads(Module):
    """Treatment head plus parameter-disjoint control and treated outcome heads."""

    def __init__(self, d_feat: int, d_hidden: int, rng, pool_dims: tuple[int, int] | None = None):
        self.pool_query = Linear(pool_dims[0], pool_dims[1], rng) if pool_dims else None
        self.treatment = Linear(d_feat, 1, rng)
        self.control = Mlp(d_feat, d_hidden, 1, rng)
        self.treated = Mlp(d_feat, d_hidden, 1, rng)


class McpHead(Module):
    def __init__(self, d: int, vocab_size: int, rng):
        self.transform = Linear(d, d, rng)
        self.norm = LayerNorm(d)
        self.decoder = Linear(d, vocab_size, rng)

    def __call__(self, h):
        return self.decoder(self.norm(F.gelu(self.transform(h))))


class KGTreatModel(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0x1A17])
        d, g = cfg.d_model, cfg.graph_dim
        self.tables = PatientEmbeddingTables(cfg.vocab_size, d, rng, cfg.max_visits, cfg.max_bins)
        self.emb_norm = LayerNorm(d)
        self.seq = SequenceEncoder(d, cfg.n_heads, cfg.n_layers, cfg.d_ff, cfg.dropout, rng)
        self.mcp_head = McpHead(d, cfg.vocab_size, rng)
        if cfg.use_kg:
            self.graph = GraphEncoder(
                cfg.n_kg_relations, g, cfg.gnn_layers, rng, cfg.node_feature_width, cfg.dropout, cfg.strict_batchnorm
            )
            self.synergy = [SynergyLayer(d, g, cfg.n_heads, rng, cfg.dropout) for _ in range(cfg.synergy_layers)]
            self.node_features = node_feature_table(cfg.n_kg_nodes, cfg.seed, cfg.node_feature_width)
            d_feat = d + 2 * g
            self.heads = EffectHeads(d_feat, d, rng, (d, g))
        else:
            self.graph = None
            self.synergy = []
            self.node_features = None
            self.heads = EffectHeads(d, d, rng)
        self.attention: dict[str, list[np.ndarray]] = {}
        self.set_rng(np.random.default_rng([cfg.seed, 0xD207]))

    def set_rng(self, rng: np.random.Generator) -> None:
        """Share one dropout generator across every submodule."""
        for m in self.modules():
            if hasattr(m, "rng"):
                m.rng = rng
        self.rng = rng

    def backbone_parameters(self) -> dict:
        return {k: v for k, v in self.parameters().items() if not k.startswith(HEAD_PREFIX)}

    def head_parameters(self) -> dict:
        return {k: v for k, v in self.parameters().items() if k.startswith(HEAD_PREFIX)}

    # -- forward ---------------------------------------------------------------
    def embed(self, seq: SeqBatch) -> nx.Tensor:
        e = self.emb_norm(embed_patient(seq, self.tables))
        return F.dropout(e, self.cfg.dropout, self.rng, self.training)

    def forward(self, batch: ModelBatch) -> Forward:
        cfg = self.cfg
        seq_mask = batch.seq.mask
        h = self.embed(batch.seq)
        if not cfg.use_kg:
            for layer in self.seq.layers:
                h = layer(h, seq_mask)
            return Forward(h, batch=batch)

        ga, gy = batch.graph_a, batch.graph_y
        shared = batch.shared
        self.attention = {"graph_a": [], "graph_y": [], "pool_a": [], "pool_y": []}
        rel = self.graph.relations.weight
        va = self.graph.initial_states(self.node_features, ga)
        vy = va if shared else self.graph.initial_states(self.node_features, gy)
        pool_mask = seq_mask.copy()
        pool_mask[:, 0] = False
        n = cfg.n_layers
        for l, layer in enumerate(self.seq.layers):
            h = layer(h, seq_mask)
            j = l - (n - cfg.gnn_layers)
            if j >= 0:
                gnn = self.graph.layers[j]
                va = gnn(va, rel, ga)
                if gnn.keep_weights:
                    self.attention["graph_a"].append(gnn.last_alpha)
                vy = va if shared else gnn(vy, rel, gy)
                if gnn.keep_weights:
                    self.attention["graph_y"].append(gnn.last_alpha)
            s = l - (n - cfg.synergy_layers)
            if s >= 0:
                side_a = (to_padded(va, ga), ga.pad_mask, F.take_rows(va, ga.anchor_flat))
                side_y = side_a if shared else (to_padded(vy, gy), gy.pad_mask, F.take_rows(vy, gy.anchor_flat))
                h, pa, py = self.synergy[s](h, seq_mask, pool_mask, side_a, side_y)
                if self.synergy[s].keep_weights:
                    self.attention["pool_a"].append(self.synergy[s].last_pool_weights[0])
                    self.attention["pool_y"].append(self.synergy[s].last_pool_weights[1])
                va = to_flat(pa, ga)
                vy = va if shared else to_flat(py, gy)
        return Forward(h, va, vy, batch)

    # -- prediction features ---------------------------------------------------
    def _graph_summary(self, h_cls, v, gb: GraphBatch):
        """[v_CLS ; attention pool of graph nodes with query from h_CLS]."""
        g = v.shape[1]
        q = self.heads.pool_query(h_cls)
        v_pad = to_padded(v, gb)
        G, n_max, _ = v_pad.shape
        logits = (v_pad @ q.reshape(G, g, 1)).reshape(G, n_max) * (1.0 / math.sqrt(g))
        alpha = F.softmax(logits, axis=-1, mask=gb.pad_mask)
        pooled = (alpha.reshape(G, 1, n_max) @ v_pad).reshape(G, g)
        return nx.concat([F.take_rows(v, gb.cls_flat), pooled], axis=-1)

    def features(self, fwd: Forward):
        """Treatment-side and outcome-side feature vectors."""
        h_cls = fwd.h[:, 0, :]
        if not self.cfg.use_kg:
            return h_cls, h_cls
        b = fwd.batch
        x_a = nx.concat([h_cls, self._graph_summary(h_cls, fwd.v_a, b.graph_a)], axis=-1)
        if b.shared and fwd.v_y is fwd.v_a:
            return x_a, x_a
        x_y = nx.concat([h_cls, self._graph_summary(h_cls, fwd.v_y, b.graph_y)], axis=-1)
        return x_a, x_y

    def logits(self, fwd: Forward):
        """(treatment logit, control-outcome logit, treated-outcome logit), each (B,)."""
        x_a, x_y = self.features(fwd)
        B = x_a.shape[0]
        return (
            self.heads.treatment(x_a).reshape(B),
            self.heads.control(x_y).reshape(B),
            self.heads.treated(x_y).reshape(B),
        )

    # -- inspection ------------------------------------------------------------
    def keep_attention(self, on: bool = True) -> None:
        """Record graph edge weights and anchor-pool weights in ``self.attention``
        on every forward pass."""
        for m in self.modules():
            if hasattr(m, "keep_weights"):
                m.keep_weights = on


def concat_forward(model: KGTreatModel, batch: ModelBatch) -> Forward:
    """Sequence and graph stacks run side by side with no interaction.

    Matches ``model.forward`` exactly when the model has no synergy layers.
    """
    cfg = model.cfg
    h = model.embed(batch.seq)
    for layer in model.seq.layers:
        h = layer(h, batch.seq.mask)
    if not cfg.use_kg:
        return Forward(h, batch=batch)
    feats = model.node_features
    va = model.graph(feats, batch.graph_a)[-1]
    vy = va if batch.shared else model.graph(feats, batch.graph_y)[-1]
    return Forward(h, va, vy, batch)
