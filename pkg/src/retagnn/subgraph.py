"""Enclosing subgraph extraction around a seed node set."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .graph import REL_TABLE, Kind, NodeRef, Sizes, TripartiteGraph, U, V
from .ingest import TrainingSample


@dataclass
class EnclosingSubgraph:
    """Vertex-induced subgraph over every node within ``h`` hops of the seeds.

    Local nodes are ordered by unified parent id, so kinds stay contiguous and
    ``graph`` is itself a :class:`TripartiteGraph` with locally dense indices.
    """

    graph: TripartiteGraph
    nodes: np.ndarray          # local index -> parent unified id
    parent_sizes: Sizes
    seed_locals: np.ndarray
    hop_of: np.ndarray
    _edge_cache: tuple | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def local_to_global(self) -> list[NodeRef]:
        return [self.parent_sizes.node(int(g)) for g in self.nodes]

    def local_index(self, node: NodeRef) -> int:
        g = self.parent_sizes.gid(node)
        i = int(np.searchsorted(self.nodes, g))
        if i >= len(self.nodes) or self.nodes[i] != g:
            raise KeyError(node)
        return i

    def node_set(self) -> set[NodeRef]:
        return set(self.local_to_global)

    def global_edge_set(self) -> set[tuple[int, int]]:
        coo = self.graph.adj.tocoo()
        return set(zip(self.nodes[coo.row].tolist(), self.nodes[coo.col].tolist()))

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR ``(indptr, indices, relation)`` with rows as message receivers.

        ``relation[e]`` is the relation from the receiving node to the sender.
        """
        if self._edge_cache is None:
            adj = self.graph.adj
            kinds = self.graph.sizes.kinds(np.arange(self.num_nodes))
            rows = np.repeat(np.arange(self.num_nodes), np.diff(adj.indptr))
            rel = REL_TABLE[kinds[rows], kinds[adj.indices]]
            self._edge_cache = (adj.indptr.astype(np.int64), adj.indices.astype(np.int64),
                                rel.astype(np.int64))
        return self._edge_cache

    def dump(self, path) -> None:
        refs = self.local_to_global
        with open(path, "w", encoding="utf-8") as fh:
            for i, ref in enumerate(refs):
                seed = " seed" if i in set(self.seed_locals.tolist()) else ""
                fh.write(f"# node {i} {ref.kind.name} {ref.index} hop={self.hop_of[i]}{seed}\n")
            for src, rel, dst in self.graph.edges():
                a, b = refs[self.graph.gid(src)], refs[self.graph.gid(dst)]
                fh.write(f"{a.kind.name} {a.index} {rel.name} {b.kind.name} {b.index}\n")


def _truncate(new: np.ndarray, sizes: Sizes, cap: int | None) -> np.ndarray:
    if cap is None or len(new) <= cap:
        return new
    kinds = sizes.kinds(new)
    local = new - np.array([sizes.offset(Kind(k)) for k in range(3)])[kinds]
    order = np.lexsort((kinds, local))
    return np.sort(new[order[:cap]])


def extract(parent: TripartiteGraph, seeds: Iterable[NodeRef], h: int,
            extra_edges: Iterable[tuple[NodeRef, NodeRef]] = (),
            max_nodes_per_hop: int | None = None) -> EnclosingSubgraph:
    """Layer-by-layer BFS from ``seeds`` over all relations, then induce.

    ``extra_edges`` are undirected pairs added to the parent view before the
    search (used to place a user's own history into the graph). Seeds absent
    from the parent are kept as isolated nodes.
    """
    if h < 0:
        raise ValueError("hop count must be >= 0")
    sizes = parent.sizes
    seed_gids = np.unique(np.array([sizes.gid(s) for s in seeds], dtype=np.int64))
    if not len(seed_gids):
        raise ValueError("seed set is empty")

    extra = {}
    extra_pairs = []
    for a, b in extra_edges:
        ga, gb = sizes.gid(a), sizes.gid(b)
        if REL_TABLE[a.kind, b.kind] < 0:
            raise ValueError(f"cannot inject edge {a!r}-{b!r}")
        extra.setdefault(ga, []).append(gb)
        extra.setdefault(gb, []).append(ga)
        extra_pairs.append((ga, gb))

    hop = np.full(sizes.total, -1, dtype=np.int64)
    hop[seed_gids] = 0
    frontier = seed_gids
    for depth in range(1, h + 1):
        if not len(frontier):
            break
        chunks = [parent.adj[frontier].indices.astype(np.int64)]
        chunks += [np.asarray(extra[f], dtype=np.int64) for f in frontier.tolist() if f in extra]
        reached = np.unique(np.concatenate(chunks))
        new = reached[hop[reached] < 0]
        new = _truncate(new, sizes, max_nodes_per_hop)
        hop[new] = depth
        frontier = new

    nodes = np.flatnonzero(hop >= 0)
    sub = parent.adj[nodes][:, nodes]
    if extra_pairs:
        pos = {int(g): i for i, g in enumerate(nodes)}
        rows, cols = [], []
        for ga, gb in extra_pairs:
            if ga in pos and gb in pos:
                rows += [pos[ga], pos[gb]]
                cols += [pos[gb], pos[ga]]
        if rows:
            inj = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=sub.shape)
            sub = (sub + inj).tocsr()
            sub.data[:] = 1
    kinds = sizes.kinds(nodes)
    local_sizes = Sizes(int(np.sum(kinds == 0)), int(np.sum(kinds == 1)), int(np.sum(kinds == 2)))
    graph = TripartiteGraph(local_sizes, sub, window=parent.window)
    return EnclosingSubgraph(
        graph=graph,
        nodes=nodes,
        parent_sizes=sizes,
        seed_locals=np.searchsorted(nodes, seed_gids),
        hop_of=hop[nodes],
    )


def extract_for_sample(parent: TripartiteGraph, sample: TrainingSample, h: int,
                       items: Iterable[int] | None = None,
                       max_nodes_per_hop: int | None = None) -> EnclosingSubgraph:
    """Subgraph seeded by the sample's user and its history items.

    ``items`` restricts the seed items (e.g. one short-term subsession). The
    user's edges to those items are injected if the parent lacks them.
    """
    items = list(sample.history if items is None else items)
    if not items:
        raise ValueError("sample history is empty")
    user = U(sample.user)
    seeds = [user] + [V(v) for v in items]
    inject = [(user, V(v)) for v in dict.fromkeys(items)]
    return extract(parent, seeds, h, extra_edges=inject, max_nodes_per_hop=max_nodes_per_hop)
