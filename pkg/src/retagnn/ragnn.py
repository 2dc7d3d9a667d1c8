"""Relational attentive message passing over enclosing subgraphs.

One layer maps node embeddings ``X`` (rows) to

    x_i' = x_i W_o + sum_j alpha_ij x_j W_r(i, j)

where ``alpha_ij`` is a softmax over all neighbours of ``i`` of
``leaky_relu(a . [x_i W_o, x_j W_r])``. Row vectors are used throughout, so a
``d x d`` matrix multiplies from the right.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .graph import Relation

NUM_RELATIONS = len(Relation)


@dataclass
class RagnnLayerParams:
    W_o: nk.Tensor
    W_r: list[nk.Tensor]
    a: nk.Tensor  # length 2d: first half scores the receiver, second half the sender

    @property
    def d(self) -> int:
        return self.W_o.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "RagnnLayerParams":
        return cls(
            W_o=nk.Tensor(nk.glorot(rng, d, d), requires_grad=True),
            W_r=[nk.Tensor(nk.glorot(rng, d, d), requires_grad=True) for _ in range(NUM_RELATIONS)],
            a=nk.Tensor(nk.glorot(rng, 2 * d, 1, shape=(2 * d,)), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, nk.Tensor]:
        out = {f"{prefix}.W_o": self.W_o}
        for r, w in zip(Relation, self.W_r):
            out[f"{prefix}.W_r.{r.name}"] = w
        out[f"{prefix}.a"] = self.a
        return out


@dataclass
class RagnnStack:
    layers: list[RagnnLayerParams]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, depth: int) -> "RagnnStack":
        if depth < 1:
            raise ValueError("RA-GNN depth must be >= 1")
        return cls([RagnnLayerParams.init(rng, d) for _ in range(depth)])

    def named(self, prefix: str) -> dict[str, nk.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layer{i}"))
        return out

    def relation_matrices(self, relation: Relation) -> list[nk.Tensor]:
        return [layer.W_r[relation] for layer in self.layers]


def attention_weights(layer: RagnnLayerParams, x_i, neighbors, slope: float = 0.2) -> np.ndarray:
    """Attention of one node over ``neighbors = [(relation, x_j), ...]``."""
    if not neighbors:
        return np.zeros(0)
    d = layer.d
    a = layer.a.value
    own = np.asarray(x_i) @ layer.W_o.value @ a[:d]
    logits = np.array([own + np.asarray(x_j) @ layer.W_r[r].value @ a[d:] for r, x_j in neighbors])
    logits = np.where(logits > 0, logits, slope * logits)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def layer_forward(layer: RagnnLayerParams, edges, X: nk.Tensor, slope: float = 0.2,
                  use_attention: bool = True) -> nk.Tensor:
    """One message-passing step over CSR ``edges = (indptr, indices, relation)``.

    Without attention every neighbour gets weight ``1 / degree``.
    """
    indptr, indices, rel = edges
    n, d = X.shape
    if len(indptr) != n + 1:
        raise nk.ShapeError(f"edge rows {len(indptr) - 1} vs embedding rows {n}")
    own = nk.matmul(X, layer.W_o)
    stacked = nk.concat([nk.matmul(X, w) for w in layer.W_r], axis=0)   # (4n, d)
    source = rel * n + indices
    deg = np.diff(indptr)
    if use_attention:
        a = nk.reshape(layer.a, (2 * d, 1))
        a_own = nk.gather_rows(a, np.arange(d))
        a_nbr = nk.gather_rows(a, np.arange(d, 2 * d))
        rows = np.repeat(np.arange(n), deg)
        logit = nk.add(nk.gather_rows(nk.matmul(own, a_own), rows),
                       nk.gather_rows(nk.matmul(stacked, a_nbr), source))
        logit = nk.leaky_relu(nk.reshape(logit, (len(source),)), slope)
        alpha = nk.segment_softmax(logit, indptr)
    else:
        alpha = nk.Tensor((1.0 / np.repeat(np.maximum(deg, 1), deg)).astype(X.value.dtype))
    return nk.add(own, nk.edge_aggregate(alpha, stacked, indptr, source))


def stack_forward(stack: RagnnStack, edges, X0: nk.Tensor, slope: float = 0.2,
                  use_attention: bool = True, activation: str = "none") -> nk.Tensor:
    X = X0
    for i, layer in enumerate(stack.layers):
        X = layer_forward(layer, edges, X, slope, use_attention)
        if i < stack.depth - 1 and activation != "none":
            X = nk.relu(X) if activation == "relu" else nk.leaky_relu(X, slope)
    return X


def batch_edges(subgraphs) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], np.ndarray]:
    """Disjoint union of subgraph edge arrays plus per-subgraph node offsets."""
    indptrs, indices, rels, offsets = [np.zeros(1, dtype=np.int64)], [], [], []
    node_off = edge_off = 0
    for sg in subgraphs:
        p, ix, r = sg.edge_arrays()
        offsets.append(node_off)
        indptrs.append(p[1:] + edge_off)
        indices.append(ix + node_off)
        rels.append(r)
        node_off += sg.num_nodes
        edge_off += len(ix)
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64))
    return (np.concatenate(indptrs), cat(indices), cat(rels)), np.array(offsets, dtype=np.int64)
