"""End-to-end forecaster: pattern-matched memory encoder and GRU decoder.

The encoder embeds the input window's time-of-day slots and the residual
against the nearest pattern, then refines node states through L memory
layers. The decoder autoregresses one step at a time: a GRU consumes the
previous prediction, its state passes through L memory layers, and a
layer-level attention blends the per-layer outputs into the next speed
prediction. Matching happens once per window; the same matches feed the
encoder and every decoder step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .gcmem import GCMemLayer, adaptive_adjacency, dense, match_weights, select_memory_rows
from .graph import RoadGraph, normalize_adjacency
from .numcore import ParamStore, Tensor, gru_cell, no_grad, reshape, softmax, stack, take_rows, tsum
from .patterns import SLOTS_PER_DAY, PatternSet, match_many, zero_based
from .validation import check_shape


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and matching hyperparameters."""

    window_len: int = 18
    horizon: int = 18
    hidden_dim: int = 128
    num_layers: int = 3
    num_neighbors: int = 3
    num_patterns: int = 1000
    num_heads: int = 4
    node_embed_dim: int = 10
    seed: int = 0
    simple_mem: bool = False

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if not 1 <= self.num_neighbors <= self.num_patterns:
            raise ValueError("num_neighbors must be in [1, num_patterns]")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        fields = {k: d[k] for k in ModelConfig.__dataclass_fields__ if k in d}
        return ModelConfig(**fields)


class ForecastModel:
    """All learnable parameters plus the forward passes.

    Binds a config to a road graph (for the static support) and a pattern
    bank (for matching); the bank's content hash travels with checkpoints
    so a model is never resumed against a different bank.
    """

    def __init__(self, config: ModelConfig, graph: RoadGraph, patterns: PatternSet):
        if patterns.count != config.num_patterns:
            raise ValueError(
                f"config expects {config.num_patterns} patterns, bank has {patterns.count}"
            )
        if patterns.window_len != config.window_len:
            raise ValueError(
                f"config window_len {config.window_len} != bank window {patterns.window_len}"
            )
        self.config = config
        self.graph = graph
        self.patterns = patterns
        self.pattern_hash = patterns.content_hash
        self.num_nodes = graph.num_nodes
        self.adjacency = normalize_adjacency(graph.adjacency)

        st = ParamStore(seed=config.seed)
        self.store = st
        dh = config.hidden_dim
        st.add("time_embed", (SLOTS_PER_DAY, dh))
        st.add("noise_proj", (config.window_len, dh))
        # L+1 banks; layer l reads bank l for attention and bank l+1 for the
        # convolution (adjacent tying). Encoder and decoder share these.
        self.banks = [
            st.add(f"memory.{l}", (config.num_patterns, dh))
            for l in range(config.num_layers + 1)
        ]
        self.src_embed = st.add("adapt_src", (self.num_nodes, config.node_embed_dim))
        self.dst_embed = st.add("adapt_dst", (self.num_nodes, config.node_embed_dim))
        self.encoder = [
            GCMemLayer(st, f"enc{l}", dh, config.num_heads, config.simple_mem)
            for l in range(config.num_layers)
        ]
        self.gru = {
            name: st.add(f"gru.{name}", shape, init="zeros" if name.startswith("b_") else "xavier")
            for name, shape in [
                ("w_xr", (1, dh)), ("w_hr", (dh, dh)), ("b_r", (1, dh)),
                ("w_xz", (1, dh)), ("w_hz", (dh, dh)), ("b_z", (1, dh)),
                ("w_xn", (1, dh)), ("w_hn", (dh, dh)), ("b_n", (1, dh)),
            ]
        }
        self.decoder = [
            GCMemLayer(st, f"dec{l}", dh, config.num_heads, config.simple_mem)
            for l in range(config.num_layers)
        ]
        self.score_weights = [
            st.add(f"dec{l}.score", (dh, dh)) for l in range(config.num_layers)
        ]
        self.proj = st.add("proj", (dh, 1))

    # ---- forward pieces --------------------------------------------------------

    def _selected_memories(self, ids: np.ndarray, weights: np.ndarray) -> list[Tensor]:
        """Blend each bank's rows once per forward; reused by every layer and step."""
        return [select_memory_rows(bank, ids, weights) for bank in self.banks]

    def initial_hidden(self, slots: np.ndarray, residuals: np.ndarray) -> Tensor:
        """Window representation: summed time-of-day embeddings plus the
        projected residual against each node's nearest pattern."""
        b, t_in = slots.shape
        emb = take_rows(self.store["time_embed"], slots)  # (B, T', d_h)
        emb_sum = reshape(tsum(emb, axis=1), (b, 1, self.config.hidden_dim))
        return dense(Tensor(residuals), self.store["noise_proj"]) + emb_sum

    def encode(self, slots: np.ndarray, residuals: np.ndarray, contexts, training: bool) -> Tensor:
        """Initial node states refined by the encoder memory stack."""
        hidden = self.initial_hidden(slots, residuals)
        for layer, ctx in zip(self.encoder, contexts):
            hidden, _ = layer.forward(hidden, ctx, training)
        return hidden

    def decode_step(self, y_prev: Tensor, state: Tensor, contexts, scored, training: bool) -> tuple[Tensor, Tensor]:
        """One autoregressive step; returns (next prediction, new GRU state).

        ``state`` is kept flat (B*N, d_h) so the GRU matmuls run as single
        gemms; ``scored`` holds the per-layer step-invariant products of the
        selected memories with the decoder score matrices.
        """
        state = gru_cell(y_prev, state, self.gru)
        b_nodes = state.shape[0]
        dh = self.config.hidden_dim
        hidden = reshape(state, (b_nodes // self.num_nodes, self.num_nodes, dh))
        scale = 1.0 / math.sqrt(dh)
        energies = []
        outputs = []
        for l, (layer, ctx) in enumerate(zip(self.decoder, contexts)):
            prev = hidden
            hidden, normalized = layer.forward(hidden, ctx, training)
            energies.append(tsum(prev * scored[l], axis=-1) * scale)
            outputs.append(dense(normalized, self.proj))  # (B, N, 1)
        alpha = softmax(stack(energies, axis=-1), axis=-1)  # (B, N, L)
        alpha4 = reshape(alpha, alpha.shape + (1,))
        y_next = tsum(stack(outputs, axis=2) * alpha4, axis=2)  # (B, N, 1)
        return y_next, state

    def forward_batch(
        self,
        slots: np.ndarray,
        ids: np.ndarray,
        weights: np.ndarray,
        residuals: np.ndarray,
        first_input: np.ndarray,
        horizon: int | None = None,
        training: bool = False,
    ) -> Tensor:
        """Normalized predictions (B, N, horizon) for a batch of windows.

        ``slots`` is (B, T') time-of-day indices, ``ids``/``weights`` are the
        (B, N, k) match arrays, ``residuals`` is (B, N, T') in speed units and
        ``first_input`` is the normalized last observed speed (B, N, 1).
        """
        horizon = self.config.horizon if horizon is None else horizon
        b, n = ids.shape[:2]
        adaptive = adaptive_adjacency(self.src_embed, self.dst_embed)
        memories = self._selected_memories(ids, weights)
        enc_ctx = [
            layer.prepare(memories[l], memories[l + 1], self.adjacency, adaptive)
            for l, layer in enumerate(self.encoder)
        ]
        dec_ctx = [
            layer.prepare(memories[l], memories[l + 1], self.adjacency, adaptive)
            for l, layer in enumerate(self.decoder)
        ]
        scored = [dense(memories[l], w) for l, w in enumerate(self.score_weights)]
        hidden = self.encode(slots, residuals, enc_ctx, training)
        state = reshape(hidden, (b * n, self.config.hidden_dim))
        y = reshape(Tensor(first_input), (b * n, 1))
        preds = []
        for _ in range(horizon):
            y_next, state = self.decode_step(y, state, dec_ctx, scored, training)
            preds.append(y_next)
            y = reshape(y_next, (b * n, 1))
        out = stack(preds, axis=2)  # (B, N, horizon, 1)
        return reshape(out, out.shape[:-1])

    # ---- single-window inference ---------------------------------------------------

    def match_window(self, window_raw: np.ndarray):
        """k-NN match of every node's speed window; one scan for all nodes."""
        k = self.config.num_neighbors
        ids, dists = match_many(window_raw, self.patterns, k)
        weights = match_weights(dists)
        residuals = zero_based(window_raw) - self.patterns.values[ids[:, 0]]
        return ids, dists, weights, residuals

    def forecast(
        self,
        window_raw: np.ndarray,
        slots: np.ndarray,
        mean: float,
        std: float,
        horizon: int | None = None,
    ) -> np.ndarray:
        """Speed forecast (N, horizon) from one raw window (N, T').

        Matching runs once per node; the decoder consumes its own previous
        prediction starting from the last observed (normalized) speed.
        Output is de-normalized back to speed units.
        """
        window_raw = np.asarray(window_raw, dtype=np.float64)
        check_shape(window_raw, (self.num_nodes, self.config.window_len), "window")
        if not np.isfinite(window_raw).all():
            raise ValueError("window contains NaN; fill missing values first")
        slots = np.asarray(slots, dtype=np.intp) % SLOTS_PER_DAY
        if slots.shape != (self.config.window_len,):
            raise ValueError("slots must have one entry per window step")
        ids, _, weights, residuals = self.match_window(window_raw)
        first = (window_raw[:, -1] - mean) / std
        with no_grad():
            preds = self.forward_batch(
                slots[None, :],
                ids[None, :, :],
                weights[None, :, :],
                residuals[None, :, :],
                first[None, :, None],
                horizon=horizon,
                training=False,
            )
        return preds.data[0] * std + mean
