"""Time-windowed user-item-attribute tripartite graph.

Nodes share one unified index space: users occupy ``[0, M)``, items
``[M, M + N)`` and attribute values ``[M + N, M + N + k)``. Adjacency is a
symmetric CSR matrix over that space; the relation of an edge follows from
the kinds of its endpoints, so it is not stored.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .ingest import TRAIN, Catalog, TrainingSample

log = logging.getLogger(__name__)


class Kind(enum.IntEnum):
    USER = 0
    ITEM = 1
    ATTRIBUTE = 2


class Relation(enum.IntEnum):
    UserLikesItem = 0
    ItemAdoptedByUser = 1
    ItemHasAttr = 2
    AttrPossessedByItem = 3

    @property
    def source_kind(self) -> Kind:
        return _REL_KINDS[self][0]

    @property
    def target_kind(self) -> Kind:
        return _REL_KINDS[self][1]


_REL_KINDS = {
    Relation.UserLikesItem: (Kind.USER, Kind.ITEM),
    Relation.ItemAdoptedByUser: (Kind.ITEM, Kind.USER),
    Relation.ItemHasAttr: (Kind.ITEM, Kind.ATTRIBUTE),
    Relation.AttrPossessedByItem: (Kind.ATTRIBUTE, Kind.ITEM),
}

# relation code for an edge i -> j indexed as [kind(i), kind(j)]; -1 = forbidden
REL_TABLE = np.full((3, 3), -1, dtype=np.int8)
for _r, (_a, _b) in _REL_KINDS.items():
    REL_TABLE[_a, _b] = int(_r)


class GraphContractError(ValueError):
    pass


class NodeRef(NamedTuple):
    kind: Kind
    index: int

    def __repr__(self):
        return f"{'uva'[self.kind]}{self.index}"


def U(i: int) -> NodeRef:
    return NodeRef(Kind.USER, i)


def V(i: int) -> NodeRef:
    return NodeRef(Kind.ITEM, i)


def A(i: int) -> NodeRef:
    return NodeRef(Kind.ATTRIBUTE, i)


def relation_of(src: Kind, dst: Kind) -> Relation:
    code = REL_TABLE[src, dst]
    if code < 0:
        raise GraphContractError(f"no relation from {src.name} to {dst.name}")
    return Relation(int(code))


@dataclass(frozen=True)
class Sizes:
    users: int
    items: int
    attrs: int

    @property
    def total(self) -> int:
        return self.users + self.items + self.attrs

    def offset(self, kind: Kind) -> int:
        return (0, self.users, self.users + self.items)[kind]

    def count(self, kind: Kind) -> int:
        return (self.users, self.items, self.attrs)[kind]

    def gid(self, node: NodeRef) -> int:
        if not 0 <= node.index < self.count(node.kind):
            raise GraphContractError(f"{node!r} outside catalog size {self.count(node.kind)}")
        return self.offset(node.kind) + node.index

    def node(self, gid: int) -> NodeRef:
        if gid < self.users:
            return U(gid)
        if gid < self.users + self.items:
            return V(gid - self.users)
        return A(gid - self.users - self.items)

    def kinds(self, gids: np.ndarray) -> np.ndarray:
        gids = np.asarray(gids)
        return ((gids >= self.users).astype(np.int8)
                + (gids >= self.users + self.items).astype(np.int8))


class TripartiteGraph:
    """Immutable tripartite graph with paired directed relations."""

    def __init__(self, sizes: Sizes, adjacency: sp.csr_matrix, window=None):
        adjacency = sp.csr_matrix(adjacency, dtype=np.int8)
        adjacency.sum_duplicates()
        adjacency.sort_indices()
        for arr in (adjacency.data, adjacency.indices, adjacency.indptr):
            arr.flags.writeable = False
        self.sizes = sizes
        self.adj = adjacency
        self.window = window

    @classmethod
    def from_edges(cls, sizes: Sizes, pairs: Iterable[tuple[int, int]], window=None):
        """Build from undirected unified-id pairs; both directions are stored."""
        pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if len(pairs):
            ka, kb = sizes.kinds(pairs[:, 0]), sizes.kinds(pairs[:, 1])
            if np.any(REL_TABLE[ka, kb] < 0):
                raise GraphContractError("edge between incompatible node kinds")
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        adj = sp.coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)),
                            shape=(sizes.total, sizes.total)).tocsr()
        adj.data[:] = 1
        return cls(sizes, adj, window)

    @property
    def num_nodes(self) -> int:
        return self.sizes.total

    @property
    def edge_count(self) -> int:
        """Number of directed edges."""
        return int(self.adj.nnz)

    def gid(self, node: NodeRef) -> int:
        return self.sizes.gid(node)

    def neighbors(self, node: NodeRef, relation: Relation) -> list[NodeRef]:
        relation = Relation(relation)
        if relation.source_kind != node.kind:
            raise GraphContractError(f"relation {relation.name} does not start at {node.kind.name}")
        g = self.gid(node)
        row = self.adj.indices[self.adj.indptr[g]:self.adj.indptr[g + 1]]
        lo = self.sizes.offset(relation.target_kind)
        hi = lo + self.sizes.count(relation.target_kind)
        row = row[(row >= lo) & (row < hi)]
        return [NodeRef(relation.target_kind, int(j - lo)) for j in row]

    def degree(self, node: NodeRef, relation: Relation) -> int:
        return len(self.neighbors(node, relation))

    def edges(self):
        """Yield ``(src, relation, dst)`` for every directed edge in CSR order."""
        coo = self.adj.tocoo()
        kinds = self.sizes.kinds(np.arange(self.num_nodes))
        for i, j in zip(coo.row, coo.col):
            yield (self.sizes.node(int(i)), Relation(int(REL_TABLE[kinds[i], kinds[j]])),
                   self.sizes.node(int(j)))

    def edge_pairs(self) -> set[tuple[int, int]]:
        coo = self.adj.tocoo()
        return set(zip(coo.row.tolist(), coo.col.tolist()))

    def count_relation(self, relation: Relation) -> int:
        return sum(1 for _, r, _ in self.edges() if r == relation)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for src, rel, dst in self.edges():
                fh.write(f"{src.kind.name} {src.index} {rel.name} {dst.kind.name} {dst.index}\n")

    def __eq__(self, other):
        if not isinstance(other, TripartiteGraph):
            return NotImplemented
        return (self.sizes == other.sizes
                and np.array_equal(self.adj.indptr, other.adj.indptr)
                and np.array_equal(self.adj.indices, other.adj.indices))

    __hash__ = None


def catalog_sizes(catalog: Catalog, use_attributes: bool = True) -> Sizes:
    return Sizes(catalog.num_users, catalog.num_items,
                 catalog.num_attrs if use_attributes else 0)


class GraphBuilder:
    """Builds window graphs from train-split samples.

    The (user, position, item) triples covered by train samples are indexed
    once; each :meth:`build` filters them by position.
    """

    def __init__(self, samples: Iterable[TrainingSample], catalog: Catalog,
                 use_attributes: bool = True):
        self.catalog = catalog
        self.use_attributes = use_attributes and catalog.num_attrs > 0
        self.sizes = catalog_sizes(catalog, self.use_attributes)
        seen = set()
        for s in samples:
            if s.split != TRAIN:
                continue
            a = s.window[0]
            for p, v in enumerate(s.history + s.future):
                seen.add((s.user, a + p, v))
        triples = np.array(sorted(seen), dtype=np.int64).reshape(-1, 3)
        self._users, self._pos, self._items = triples[:, 0], triples[:, 1], triples[:, 2]
        self._attr_pairs = self._attribute_pairs()
        self._cache: dict = {}

    def _attribute_pairs(self) -> np.ndarray:
        if not self.use_attributes:
            return np.zeros((0, 2), dtype=np.int64)
        s = self.sizes
        pairs = [(s.offset(Kind.ITEM) + v, s.offset(Kind.ATTRIBUTE) + a)
                 for v in sorted(self.catalog.item_attrs)
                 for a in sorted(self.catalog.item_attrs[v])]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def user_items(self, user: int) -> set[int]:
        return set(self._items[self._users == user].tolist())

    def item_counts(self) -> np.ndarray:
        """Train-split interaction count per item (each user-item pair once)."""
        pairs = np.unique(np.stack([self._users, self._items], axis=1), axis=0)
        return np.bincount(pairs[:, 1], minlength=self.catalog.num_items) if len(pairs) \
            else np.zeros(self.catalog.num_items, dtype=np.int64)

    def build(self, window: tuple[int, int]) -> TripartiteGraph:
        key = tuple(window)
        if key in self._cache:
            return self._cache[key]
        a, b = key
        if a > b:
            raise GraphContractError(f"invalid window {window}")
        keep = (self._pos >= a) & (self._pos <= b)
        ui = np.stack([self._users[keep], self.sizes.offset(Kind.ITEM) + self._items[keep]],
                      axis=1)
        # attribute edges cover every catalog item in every window
        pairs = np.concatenate([ui, self._attr_pairs])
        graph = TripartiteGraph.from_edges(self.sizes, pairs, window=key)
        if not keep.any():
            log.warning("window %s has no user-item edges", key)
        self._cache[key] = graph
        return graph


def build_graph(samples: Iterable[TrainingSample], catalog: Catalog, window,
                use_attributes: bool = True) -> TripartiteGraph:
    return GraphBuilder(samples, catalog, use_attributes).build(window)
