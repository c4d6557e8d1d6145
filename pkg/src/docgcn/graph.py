"""Graph convolution over document graphs with explicit edge embeddings.

Each layer builds a triplet feature ``h_ij = MLP([t_i || r_ij || t_j])`` for
every ordered node pair, attends over ``j`` with a shared weight vector, and
emits new node embeddings ``tanh(sum_j a_ij h_ij)`` and edge embeddings
``MLP(h_ij)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .document import TextSegment, edge_feature_tensor
from .layers import BiLSTM, Embedding, Linear, Module, Vocab, glorot, pad_batch, uniform
from .numeric import Parameter, Tensor, ops

EDGE_DIM = 5


@dataclass
class GraphState:
    nodes: Tensor  # (n, d_node)
    edges: Tensor  # (n, n, d_edge)


@dataclass
class LayerOutput:
    state: GraphState
    triplets: Tensor  # (n, n, d_hidden)
    attention: Tensor  # (n, n)


class SegmentEncoder(Module):
    """Single-layer BiLSTM over a segment's tokens; the node embedding is the
    concatenation of the final forward and backward states."""

    def __init__(self, vocab_size: int, d_tok: int, d_node: int, rng: np.random.Generator, name="encoder"):
        if d_node % 2:
            raise ValueError("d_node must be even (two LSTM directions)")
        self.embedding = Embedding(vocab_size, d_tok, rng, f"{name}.embedding")
        self.lstm = BiLSTM(d_tok, d_node // 2, rng, f"{name}.lstm")
        self.d_node = d_node

    def __call__(self, token_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """``token_ids``/``mask`` are ``(n, T)``; empty segments must already
        hold a single PAD token."""
        _, final = self.lstm(self.embedding(token_ids), mask)
        return final


def encoder_inputs(segments: Sequence[TextSegment], vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Token ids for the segment encoder; an empty segment becomes ``[PAD]``."""
    return pad_batch([vocab.encode(s.tokens) or [0] for s in segments])


class GraphConvLayer(Module):
    def __init__(
        self,
        d_node: int,
        d_edge: int,
        d_hidden: int,
        d_edge_out: int,
        rng: np.random.Generator,
        name: str,
        slope: float = 0.01,
    ):
        d_in = 2 * d_node + d_edge
        self.d_node, self.d_edge, self.d_hidden = d_node, d_edge, d_hidden
        self.slope = slope
        self.triplet_w1 = Parameter(glorot(rng, d_in, d_hidden), f"{name}.triplet_w1")
        self.triplet_b1 = Parameter(np.zeros(d_hidden), f"{name}.triplet_b1")
        self.triplet_out = Linear(d_hidden, d_hidden, rng, f"{name}.triplet_out")
        self.attention = Parameter(uniform(rng, d_hidden, np.sqrt(3.0 / d_hidden)), f"{name}.attention")
        self.edge_out = Linear(d_hidden, d_edge_out, rng, f"{name}.edge_out")

    def triplets(self, nodes, edges) -> Tensor:
        """``h[i, j] = MLP(concat(t_i, r_ij, t_j))`` for all pairs, ``(n, n, d_hidden)``.

        The first affine map is applied blockwise, which equals applying it to
        the concatenation.
        """
        n = nodes.shape[0]
        d, de = self.d_node, self.d_edge
        w = self.triplet_w1
        src = ops.matmul(nodes, w[:d])
        rel = ops.matmul(edges, w[d : d + de])
        dst = ops.matmul(nodes, w[d + de :])
        pre = ops.add(ops.add(rel, src.reshape(n, 1, -1)), dst.reshape(1, n, -1))
        hidden = ops.leaky_relu(ops.add(pre, self.triplet_b1), self.slope)
        return self.triplet_out(hidden)

    def attention_weights(self, h, uniform_weights: bool = False) -> Tensor:
        n = h.shape[0]
        if uniform_weights:
            return Tensor(np.full((n, n), 1.0 / n))
        scores = ops.leaky_relu(ops.matmul(h, self.attention), self.slope)
        return ops.masked_softmax(scores, None, axis=-1)

    def __call__(self, state: GraphState, uniform_attention: bool = False) -> LayerOutput:
        h = self.triplets(state.nodes, state.edges)
        n = h.shape[0]
        alpha = self.attention_weights(h, uniform_attention)
        pooled = ops.matmul(alpha.reshape(n, 1, n), h).reshape(n, self.d_hidden)
        nodes = ops.tanh(pooled)
        edges = ops.tanh(self.edge_out(h))
        return LayerOutput(GraphState(nodes, edges), h, alpha)


class GraphStack(Module):
    """Segment encoder followed by ``L`` unshared graph convolution layers."""

    def __init__(
        self,
        vocab_size: int,
        rng: np.random.Generator,
        n_layers: int = 2,
        d_tok: int = 64,
        d_node: int = 64,
        d_hidden: int = 64,
        d_edge_out: int = 16,
        slope: float = 0.01,
    ):
        if n_layers < 1:
            raise ValueError("need at least one graph convolution layer")
        self.encoder = SegmentEncoder(vocab_size, d_tok, d_node, rng)
        self.layers = []
        dn, de = d_node, EDGE_DIM
        for k in range(n_layers):
            self.layers.append(GraphConvLayer(dn, de, d_hidden, d_edge_out, rng, f"graph.{k}", slope))
            dn, de = d_hidden, d_edge_out
        self.d_out = d_hidden

    def initial_state(
        self,
        token_ids: np.ndarray,
        mask: np.ndarray,
        edges: np.ndarray,
        no_text: bool = False,
        no_edges: bool = False,
    ) -> GraphState:
        n = edges.shape[0]
        if no_text:
            nodes = Tensor(np.zeros((n, self.encoder.d_node)))
        else:
            nodes = self.encoder(token_ids, mask)
        edge_t = Tensor(np.zeros_like(edges) if no_edges else edges)
        return GraphState(nodes, edge_t)

    def __call__(
        self,
        token_ids: np.ndarray,
        mask: np.ndarray,
        edges: np.ndarray,
        no_text: bool = False,
        no_edges: bool = False,
        no_attention: bool = False,
    ) -> tuple[Tensor, list[LayerOutput]]:
        state = self.initial_state(token_ids, mask, edges, no_text, no_edges)
        outputs = []
        for layer in self.layers:
            out = layer(state, uniform_attention=no_attention)
            outputs.append(out)
            state = out.state
        return state.nodes, outputs

    def embed_segments(self, segments: Sequence[TextSegment], vocab: Vocab, **flags) -> tuple[Tensor, list[LayerOutput]]:
        ids, mask = encoder_inputs(segments, vocab)
        return self(ids, mask, edge_feature_tensor(segments), **flags)
