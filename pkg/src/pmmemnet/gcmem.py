"""Graph-convolutional memory layer.

Each layer blends the memory contexts of a node's k matched patterns into a
representative memory, scores pattern-level attention between hidden states
and those memories, then mixes memory rows across nodes through three
supports: the static road adjacency, a learned node-affinity matrix, and
the attention matrix itself. The result is batch-normalized and added back
to the hidden state (residual update).

Memory banks are tied adjacently: the bank a layer reads as its "output"
side is the same object the next layer reads as its "input" side, so a
stack of L layers owns L+1 bank matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import (
    ParamStore,
    RunningStats,
    Tensor,
    batchnorm_forward,
    relu,
    reshape,
    softmax,
    swapaxes,
    take_rows,
    tsum,
)
from .patterns import MatchResult


def match_weights(distances: np.ndarray) -> np.ndarray:
    """Blend weights for matched patterns: softmax of negative distance over k."""
    d = np.asarray(distances, dtype=np.float64)
    z = -d
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def select_memory_rows(bank: Tensor, ids: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted blend of bank rows: (..., k) ids and weights -> (..., d_h).

    ``weights`` should already sum to 1 over the trailing axis (see
    :func:`match_weights`).
    """
    gathered = take_rows(bank, ids)  # (..., k, d_h)
    w = np.asarray(weights, dtype=np.float64)[..., None]
    return tsum(gathered * w, axis=-2)


def select_memory(match: MatchResult, bank: Tensor) -> Tensor:
    """Representative memory for a single node's match (spec-shaped wrapper)."""
    return select_memory_rows(bank, match.ids, match_weights(match.distances))


def pattern_attention(hidden: Tensor, memory: Tensor) -> Tensor:
    """Row-stochastic attention between node hidden states and node memories.

    ``hidden`` and ``memory`` are (..., N, d_h); the result is (..., N, N):
    softmax over the last axis of the dot products scaled by 1/sqrt(d_h).
    """
    d_h = hidden.shape[-1]
    scores = (hidden @ swapaxes(memory, -1, -2)) * (1.0 / math.sqrt(d_h))
    return softmax(scores, axis=-1)


def adaptive_adjacency(src_embed: Tensor, dst_embed: Tensor) -> Tensor:
    """Learned node-affinity support: Softmax(ReLU(E1 E2^T)), rows sum to 1."""
    return softmax(relu(src_embed @ swapaxes(dst_embed, -1, -2)), axis=-1)


def graph_conv(
    memory_next: Tensor,
    adjacency: np.ndarray | Tensor,
    adaptive: Tensor | None,
    attention: Tensor,
    head_weights,
    simple_mem: bool = False,
) -> Tensor:
    """Tri-support graph convolution over next-layer memories.

    Every support acts on the node axis (support @ memory), then each head
    applies its own feature transform per support; head outputs are summed
    and passed through ReLU. ``head_weights`` is a list of (w_adj, w_adapt,
    w_attn) triples; in simple-mem mode only the attention support is used
    and the triples carry only w_attn.
    """
    att_mixed = attention @ memory_next
    if not simple_mem:
        adj = adjacency if isinstance(adjacency, Tensor) else Tensor(adjacency)
        adj_mixed = adj @ memory_next
        ada_mixed = adaptive @ memory_next
    total = None
    for weights in head_weights:
        if simple_mem:
            term = att_mixed @ weights[-1]
        else:
            w_adj, w_ada, w_att = weights
            term = adj_mixed @ w_adj + ada_mixed @ w_ada + att_mixed @ w_att
        total = term if total is None else total + term
    return relu(total)


def dense(x: Tensor, w: Tensor) -> Tensor:
    """(..., d) @ (d, e) through a single 2-D matmul (one BLAS call)."""
    if x.ndim == 2:
        return x @ w
    lead = x.shape[:-1]
    flat = reshape(x, (int(np.prod(lead)), x.shape[-1]))
    return reshape(flat @ w, lead + (w.shape[-1],))


@dataclass
class LayerContext:
    """Step-invariant pieces of one layer's forward pass, built once per window.

    The selected memories, the adjacency/adaptive support terms and the
    fused head weights do not depend on the evolving hidden state, so the
    decoder reuses them across every autoregressive step; gradients
    accumulate through the shared nodes exactly as if they were recomputed.
    """

    mem_in: Tensor  # (B, N, d_h) blend of the attention-side bank
    mem_out: Tensor  # (B, N, d_h) blend of the convolution-side bank
    attn_w: Tensor  # (d_h, d_h) summed attention-support head weights
    static: Tensor | None  # (B, N, d_h) adjacency + adaptive terms, None in simple-mem


class GCMemLayer:
    """One memory layer: attention + tri-support convolution + residual update.

    Owns its per-head feature transforms and batchnorm parameters under a
    name prefix in the shared store; memory banks and the adaptive node
    embeddings are shared across layers and passed in per call.
    """

    def __init__(self, store: ParamStore, prefix: str, hidden_dim: int, num_heads: int, simple_mem: bool = False):
        self.prefix = prefix
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.simple_mem = simple_mem
        self.head_weights = []
        for i in range(num_heads):
            if simple_mem:
                self.head_weights.append(
                    (store.add(f"{prefix}.head{i}.attn_w", (hidden_dim, hidden_dim)),)
                )
            else:
                self.head_weights.append(
                    (
                        store.add(f"{prefix}.head{i}.adj_w", (hidden_dim, hidden_dim)),
                        store.add(f"{prefix}.head{i}.adapt_w", (hidden_dim, hidden_dim)),
                        store.add(f"{prefix}.head{i}.attn_w", (hidden_dim, hidden_dim)),
                    )
                )
        self.bn_gamma = store.add(f"{prefix}.bn.gamma", (hidden_dim,), init="ones")
        self.bn_beta = store.add(f"{prefix}.bn.beta", (hidden_dim,), init="zeros")
        self.bn_stats = RunningStats(hidden_dim)
        store.add_state(f"{prefix}.bn.running_mean", self.bn_stats.mean)
        store.add_state(f"{prefix}.bn.running_var", self.bn_stats.var)
        # add_state copies into the store; keep the stored arrays as the live ones
        self.bn_stats.mean = store.state_arrays()[f"{prefix}.bn.running_mean"]
        self.bn_stats.var = store.state_arrays()[f"{prefix}.bn.running_var"]

    def _summed_heads(self, support_index: int) -> Tensor:
        total = self.head_weights[0][support_index]
        for weights in self.head_weights[1:]:
            total = total + weights[support_index]
        return total

    def prepare(
        self,
        memory_in: Tensor,
        memory_out: Tensor,
        adjacency: np.ndarray,
        adaptive: Tensor | None,
    ) -> LayerContext:
        """Hoist everything that does not depend on the hidden state.

        Heads sum linearly, so sum((S M) W_i) == (S M) sum(W_i); fusing the
        head weights is exact, not an approximation.
        """
        attn_w = self._summed_heads(-1)
        static = None
        if not self.simple_mem:
            adj_mixed = Tensor(adjacency) @ memory_out
            ada_mixed = adaptive @ memory_out
            static = dense(adj_mixed, self._summed_heads(0)) + dense(ada_mixed, self._summed_heads(1))
        return LayerContext(mem_in=memory_in, mem_out=memory_out, attn_w=attn_w, static=static)

    def forward(self, hidden: Tensor, ctx: LayerContext, training: bool) -> tuple[Tensor, Tensor]:
        """Returns (new hidden, normalized layer output used for decoding)."""
        attention = pattern_attention(hidden, ctx.mem_in)
        pre = dense(attention @ ctx.mem_out, ctx.attn_w)
        if ctx.static is not None:
            pre = pre + ctx.static
        conv = relu(pre)
        normalized = batchnorm_forward(
            conv, self.bn_gamma, self.bn_beta, self.bn_stats, training=training
        )
        return hidden + normalized, normalized

    def forward_reference(
        self,
        hidden: Tensor,
        memory_in: Tensor,
        memory_out: Tensor,
        adjacency: np.ndarray,
        adaptive: Tensor | None,
        training: bool,
    ) -> tuple[Tensor, Tensor]:
        """Unfused per-head path; used to cross-check the hoisted forward."""
        attention = pattern_attention(hidden, memory_in)
        conv = graph_conv(
            memory_out, adjacency, adaptive, attention, self.head_weights, self.simple_mem
        )
        normalized = batchnorm_forward(
            conv, self.bn_gamma, self.bn_beta, self.bn_stats, training=training
        )
        return hidden + normalized, normalized


def gcmem_forward(
    hidden: Tensor,
    matches: list[MatchResult],
    bank_in: Tensor,
    bank_out: Tensor,
    adjacency: np.ndarray,
    adaptive: Tensor,
    layer: GCMemLayer,
    training: bool = False,
) -> Tensor:
    """Single-window layer pass from per-node match results (spec-shaped wrapper)."""
    ids = np.stack([m.ids for m in matches])
    wts = match_weights(np.stack([m.distances for m in matches]))
    mem_in = select_memory_rows(bank_in, ids, wts)
    mem_out = select_memory_rows(bank_out, ids, wts)
    new_hidden, _ = layer.forward_reference(hidden, mem_in, mem_out, adjacency, adaptive, training)
    return new_hidden
