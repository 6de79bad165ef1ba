"""
Intent-slot interaction graphs.

At every decoding step the slot decoder state becomes node 0 of a small graph
whose remaining nodes are the embeddings of the utterance's intents.  The slot
node is connected to every intent, intents form a clique, and every node has a
self-loop, so over the valid nodes the graph is complete.  Batches are padded
to the largest intent count; padded nodes only see themselves and never
receive attention from a valid node.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..util import ShapeError


class GraphActivation(Enum):
    LEAKY_RELU = "leaky_relu"
    ELU = "elu"
    TANH = "tanh"


class Aggregation(Enum):
    ATTENTION = "attention"
    MEAN = "mean"


def activate(x: Tensor, activation: GraphActivation, slope: float) -> Tensor:
    if activation == GraphActivation.LEAKY_RELU:
        return ad.leaky_relu(x, slope)
    if activation == GraphActivation.ELU:
        return ad.elu(x)
    if activation == GraphActivation.TANH:
        return ad.tanh(x)
    raise ValueError(f"Unknown graph activation {activation}")


def build_interaction_graph(n: int) -> np.ndarray:
    """
    Adjacency over n+1 nodes: node 0 is the slot state, nodes 1..n the
    intents.  Slot-intent edges, an intent clique and self-loops.
    """
    if n < 0:
        raise ValueError(f"Expected a non-negative intent count, got {n}")
    adjacency = np.zeros((n + 1, n + 1), dtype=bool)
    adjacency[0, :] = True
    adjacency[:, 0] = True
    adjacency[1:, 1:] = True
    np.fill_diagonal(adjacency, True)
    return adjacency


def batch_interaction_graph(intent_counts: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pad per-utterance graphs to the largest intent count.  Returns the
    adjacency (B, N+1, N+1) and the valid-node mask (B, N+1).
    """
    width = max(intent_counts, default=0) + 1
    adjacency = np.zeros((len(intent_counts), width, width), dtype=bool)
    node_mask = np.zeros((len(intent_counts), width), dtype=bool)
    for b, n in enumerate(intent_counts):
        adjacency[b, : n + 1, : n + 1] = build_interaction_graph(n)
        node_mask[b, : n + 1] = True
    idx = np.arange(width)
    adjacency[:, idx, idx] = True
    return adjacency, node_mask


@dataclass
class GraphLayerParams:
    W: Tensor  # (K, F', F), one projection per head
    a: Optional[Tensor] = None  # (K, 2F'), absent for mean aggregation

    @classmethod
    def initialize(
        cls,
        in_dim: int,
        head_dim: int,
        heads: int,
        rng: np.random.Generator,
        attention: bool = True,
        dtype=None,
    ) -> "GraphLayerParams":
        W = ad.Tensor(
            np.stack([ad.xavier_init(head_dim, in_dim, rng, dtype=dtype).data for _ in range(heads)]),
            requires_grad=True,
        )
        a = None
        if attention:
            a = ad.Tensor(
                np.stack([ad.xavier_init(1, 2 * head_dim, rng, dtype=dtype).data[0] for _ in range(heads)]),
                requires_grad=True,
            )
        return cls(W=W, a=a)

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W.shape[1]

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.W", self.W
        if self.a is not None:
            yield f"{prefix}.a", self.a


def gat_layer(
    nodes: Tensor,
    adjacency: np.ndarray,
    params: GraphLayerParams,
    final: bool,
    activation: GraphActivation = GraphActivation.LEAKY_RELU,
    slope: float = 0.01,
    aggregation: Aggregation = Aggregation.ATTENTION,
) -> Tuple[Tensor, np.ndarray]:
    """
    One multi-head graph layer over nodes (B, N, F) or (N, F).

    Each head scores neighbours with LeakyReLU(a^T [W h_i || W h_j]),
    normalizes over the neighbourhood and aggregates W h_j; with MEAN
    aggregation the weights are 1/degree instead.  Middle layers concatenate
    the heads, the final layer averages them.  Returns the new nodes and the
    per-head weights (B, K, N, N).
    """
    unbatched = nodes.ndim == 2
    if unbatched:
        nodes = ad.reshape(nodes, (1,) + nodes.shape)
        adjacency = adjacency[None]
    batch, count, width = nodes.shape
    heads, head_dim, in_dim = params.W.shape
    if width != in_dim:
        raise ShapeError(f"gat_layer: node width {width} does not match layer input {in_dim}")
    if adjacency.shape != (batch, count, count):
        raise ShapeError(f"gat_layer: adjacency {adjacency.shape} does not match {count} nodes")
    if not adjacency.any(axis=-1).all():
        raise ValueError("gat_layer: a node has an empty neighbourhood")

    projected = ad.matmul(ad.reshape(nodes, (batch, 1, count, width)), ad.swapaxes(params.W, -1, -2))
    mask = adjacency[:, None, :, :]
    if aggregation == Aggregation.ATTENTION:
        if params.a is None:
            raise ShapeError("gat_layer: attention aggregation needs attention vectors")
        a_src = ad.reshape(params.a[:, :head_dim], (heads, head_dim, 1))
        a_dst = ad.reshape(params.a[:, head_dim:], (heads, head_dim, 1))
        scores = ad.matmul(projected, a_src) + ad.swapaxes(ad.matmul(projected, a_dst), -1, -2)
        weights = ad.masked_softmax(ad.leaky_relu(scores, slope), mask, axis=-1)
    else:
        degree = adjacency.sum(axis=-1, keepdims=True)
        norm = np.where(adjacency, 1.0, 0.0) / degree
        weights = ad.Tensor(np.broadcast_to(norm[:, None], (batch, heads, count, count)).astype(nodes.dtype))

    out = activate(ad.matmul(weights, projected), activation, slope)
    if final:
        out = ad.mean(out, axis=1)
    else:
        out = ad.rearrange(out, "b k n f -> b n (k f)")
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
        return out, weights.data[0]
    return out, weights.data


def graph_interact(
    slot_state: Tensor,
    intent_nodes: Tensor,
    adjacency: np.ndarray,
    layers: Sequence[GraphLayerParams],
    activation: GraphActivation = GraphActivation.LEAKY_RELU,
    slope: float = 0.01,
    aggregation: Aggregation = Aggregation.ATTENTION,
) -> Tuple[Tensor, List[np.ndarray]]:
    """
    Refine slot states (B, d_g) with intent nodes (B, N, d_g) through the
    graph layers.  Returns node 0 of the last layer and every layer's weights.
    With no layers the slot state comes back untouched.
    """
    if not layers:
        return slot_state, []
    batch, dim = slot_state.shape
    nodes = ad.concat([ad.reshape(slot_state, (batch, 1, dim)), intent_nodes], axis=1)
    attentions = []
    for i, params in enumerate(layers):
        nodes, weights = gat_layer(
            nodes,
            adjacency,
            params,
            final=i == len(layers) - 1,
            activation=activation,
            slope=slope,
            aggregation=aggregation,
        )
        attentions.append(weights)
    return nodes[:, 0, :], attentions


def vanilla_attention_interact(
    slot_state: Tensor, intent_nodes: Tensor, intent_mask: np.ndarray
) -> Tuple[Tensor, np.ndarray]:
    """
    The slot state queries the intent embeddings; the attended context is
    added to the state.  Returns the new state and the weights (B, N).
    """
    batch, dim = slot_state.shape
    scores = ad.reshape(ad.matmul(intent_nodes, ad.reshape(slot_state, (batch, dim, 1))), (batch, -1))
    weights = ad.masked_softmax(scores, intent_mask, axis=-1)
    context = ad.reshape(ad.matmul(ad.reshape(weights, (batch, 1, -1)), intent_nodes), (batch, dim))
    return slot_state + context, weights.data


def sentence_intent_summary(intent_nodes: Tensor, intent_mask: np.ndarray) -> Tensor:
    """Sum of the valid intent embeddings, (B, d_g)."""
    masked = ad.where(intent_mask[:, :, None], intent_nodes, 0.0)
    return ad.sum(masked, axis=1)
