"""Bi-level attention between the patient sequence and its PKGs.

Level one pools the sequence with attention driven by an anchor node state.
Level two exchanges information through multi-head co-attention in both
directions; the sequence side fuses the two co-attended views and the two
pooled vectors (treatment side and outcome side) through a perceptron.
"""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .encoders import MultiHeadAttention
from .numerics import functional as F
from .numerics.nn import LayerNorm, Linear, Module


class ContractError(ValueError):
    pass


def anchor_attention_pool(h: nx.Tensor, anchor: nx.Tensor, mask: np.ndarray):
    """Pool ``h`` (B, T, d) with weights softmax_t(anchor . h_t / sqrt(d)).

    ``anchor`` is (B, d) and already at the sequence width. Returns the pooled
    (B, d) tensor and the (B, T) weights.
    """
    mask = np.asarray(mask, dtype=bool)
    if h.shape[-1] != anchor.shape[-1]:
        raise ContractError(f"anchor width {anchor.shape[-1]} != sequence width {h.shape[-1]}")
    if not mask.any(axis=1).all():
        raise ContractError("anchor pooling over a fully masked sequence")
    B, T, d = h.shape
    logits = (h @ anchor.reshape(B, d, 1)).reshape(B, T) * (1.0 / math.sqrt(d))
    alpha = F.softmax(logits, axis=-1, mask=mask)
    pooled = (alpha.reshape(B, 1, T) @ h).reshape(B, d)
    return pooled, alpha


class SynergyLayer(Module):
    """One synergy step over sequence states and two graph sides.

    Shapes: ``h`` (B, T, d); each graph side is padded (B, N, g) with a key
    mask and the (B, g) anchor state. Co-attention and fusion weights are
    shared by the treatment and outcome sides.
    """

    def __init__(self, d: int, g: int, n_heads: int, rng, dropout: float = 0.0):
        self.anchor_proj = Linear(g, d, rng)
        self.seq_from_graph = MultiHeadAttention(d, g, d, d, n_heads, rng)
        self.graph_from_seq = MultiHeadAttention(g, d, d, g, n_heads, rng)
        self.fuse1 = Linear(4 * d, d, rng)
        self.fuse2 = Linear(d, d, rng)
        self.ln_h = LayerNorm(d)
        self.ln_v = LayerNorm(g)
        self.dropout = dropout
        self.rng = None
        self.keep_weights = False
        self.last_pool_weights: tuple | None = None

    def pool(self, h, anchor_state, pool_mask):
        return anchor_attention_pool(h, self.anchor_proj(anchor_state), pool_mask)

    def graph_update(self, v_pad, v_mask, h, seq_mask):
        upd = self.graph_from_seq(v_pad, h, seq_mask)
        upd = F.dropout(upd, self.dropout, self.rng, self.training)
        return self.ln_v(v_pad + upd)

    def __call__(self, h, seq_mask, pool_mask, side_a, side_y):
        """``side_*`` = (v_pad, v_mask, anchor_state); returns (h, v_a, v_y).

        When both sides are the same tuple object the graph update is shared.
        """
        B, T, d = h.shape
        views, new_v, weights = [], [], []
        for side in (side_a, side_y):
            v_pad, v_mask, anchor = side
            pooled, alpha = self.pool(h, anchor, pool_mask)
            weights.append(alpha.data)
            h_prime = self.seq_from_graph(h, v_pad, v_mask)
            views += [h_prime, nx.expand(pooled.reshape(B, 1, d), (B, T, d))]
        if self.keep_weights:
            self.last_pool_weights = tuple(w.copy() for w in weights)
        v_a = self.graph_update(side_a[0], side_a[1], h, seq_mask)
        v_y = v_a if side_y is side_a else self.graph_update(side_y[0], side_y[1], h, seq_mask)
        fused = self.fuse2(F.gelu(self.fuse1(nx.concat(views, axis=-1))))
        fused = F.dropout(fused, self.dropout, self.rng, self.training)
        return self.ln_h(h + fused), v_a, v_y


def co_attention_synergy(h, seq_mask, pool_mask, side_a, side_y, layer: SynergyLayer):
    return layer(h, seq_mask, pool_mask, side_a, side_y)
