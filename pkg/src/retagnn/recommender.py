"""Full RetaGNN model: primitive embeddings, long/short pipelines, fusion, scoring, loss."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .config import ModelConfig
from .graph import GraphBuilder, Kind, Relation, Sizes, U, V
from .ingest import Catalog, TrainingSample
from .ragnn import RagnnStack, batch_edges, stack_forward
from .ssa import SsaParams, ssa_forward
from .subgraph import EnclosingSubgraph, extract_for_sample

LONG = -1


def subsessions(t: int, tau: int) -> list[tuple[int, int]]:
    """Half-open ``[lo, hi)`` spans of consecutive length-``tau`` pieces of ``range(t)``."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return [(lo, min(lo + tau, t)) for lo in range(0, t, tau)]


class PrimitiveEmbeddings:
    """Frozen per-node random base vectors, reproducible from ``(seed, kind, index)``.

    A node's vector never depends on catalog size, so unseen users and nodes
    of another domain get a vector the same way as training nodes.
    """

    def __init__(self, seed: int, d0: int):
        self.seed = seed
        self.d0 = d0
        self.half_width = 0.5 / d0
        self._tables: dict[Sizes, np.ndarray] = {}

    def base(self, kind: Kind, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, int(kind), index])
        return rng.uniform(-self.half_width, self.half_width, self.d0).astype(nk.default_dtype())

    def table(self, sizes: Sizes) -> np.ndarray:
        if sizes not in self._tables:
            rows = [self.base(Kind(k), i) for k in range(3) for i in range(sizes.count(Kind(k)))]
            table = np.array(rows).reshape(-1, self.d0).astype(nk.default_dtype())
            table.flags.writeable = False
            self._tables[sizes] = table
        return self._tables[sizes]


@dataclass
class FFN:
    """One hidden layer, leaky-ReLU hidden activation, linear output."""

    W1: nk.Tensor
    b1: nk.Tensor
    W2: nk.Tensor
    b2: nk.Tensor

    @classmethod
    def init(cls, rng, d_in: int, d_hidden: int, d_out: int) -> "FFN":
        dt = nk.default_dtype()
        return cls(nk.Tensor(nk.glorot(rng, d_in, d_hidden), requires_grad=True),
                   nk.Tensor(np.zeros(d_hidden, dtype=dt), requires_grad=True),
                   nk.Tensor(nk.glorot(rng, d_hidden, d_out), requires_grad=True),
                   nk.Tensor(np.zeros(d_out, dtype=dt), requires_grad=True))

    def __call__(self, x, slope: float = 0.2) -> nk.Tensor:
        hidden = nk.leaky_relu(nk.add(nk.matmul(x, self.W1), self.b1), slope)
        return nk.add(nk.matmul(hidden, self.W2), self.b2)

    def named(self, prefix: str) -> dict[str, nk.Tensor]:
        return {f"{prefix}.W1": self.W1, f"{prefix}.b1": self.b1,
                f"{prefix}.W2": self.W2, f"{prefix}.b2": self.b2}


class ParamSet:
    """All transferable learnable tensors. No shape depends on catalog sizes."""

    def __init__(self, embed: FFN, long: RagnnStack, short: RagnnStack, ssa_long: SsaParams,
                 ssa_short: SsaParams, fusion_user: FFN, fusion_item: FFN):
        self.embed = embed
        self.long = long
        self.short = short
        self.ssa_long = ssa_long
        self.ssa_short = ssa_short
        self.fusion_user = fusion_user
        self.fusion_item = fusion_item

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ParamSet":
        rng = np.random.default_rng(seed)
        d = config.d
        fused = d * (1 + config.pi)
        return cls(
            embed=FFN.init(rng, d, d, d),
            long=RagnnStack.init(rng, d, config.l_lo),
            short=RagnnStack.init(rng, d, config.l_sh),
            ssa_long=SsaParams.init(rng, d),
            ssa_short=SsaParams.init(rng, d),
            fusion_user=FFN.init(rng, fused, d, d),
            fusion_item=FFN.init(rng, fused, d, d),
        )

    def named(self) -> dict[str, nk.Tensor]:
        out = {}
        out.update(self.embed.named("embed"))
        out.update(self.long.named("long"))
        out.update(self.short.named("short"))
        out.update(self.ssa_long.named("long.ssa"))
        out.update(self.ssa_short.named("short.ssa"))
        out.update(self.fusion_user.named("fusion.user"))
        out.update(self.fusion_item.named("fusion.item"))
        return out

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.named().items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named().items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        named = self.named()
        if set(values) != set(named):
            missing, extra = set(named) - set(values), set(values) - set(named)
            raise ValueError(f"parameter names differ: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for k, t in named.items():
            v = np.asarray(values[k])
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {t.shape}")
            t.value[...] = v

    def copy(self) -> "ParamSet":
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None

    def stacks(self) -> list[RagnnStack]:
        return [self.long, self.short]


def rar_term(params: ParamSet) -> nk.Tensor:
    """Sum over stacks and relations of squared differences of adjacent layers' W_r."""
    total = nk.Tensor(np.zeros((), dtype=nk.default_dtype()))
    for stack in params.stacks():
        for r in Relation:
            mats = stack.relation_matrices(r)
            for lo, hi in zip(mats[:-1], mats[1:]):
                total = nk.add(total, nk.frobenius_norm_sq(nk.sub(hi, lo)))
    return total


def l2_term(params: ParamSet) -> nk.Tensor:
    total = nk.Tensor(np.zeros((), dtype=nk.default_dtype()))
    for t in params.named().values():
        total = nk.add(total, nk.frobenius_norm_sq(t))
    return total


def bpr_term(pos_scores: nk.Tensor, neg_scores: nk.Tensor) -> nk.Tensor:
    return nk.scale(nk.sum(nk.log_sigmoid(nk.sub(pos_scores, neg_scores))), -1.0)


def score(u_tilde, v_tildes, x_v) -> float:
    """``u . x_v + sum_i v_i . x_v`` for one candidate."""
    x_v = np.asarray(x_v)
    return float(np.dot(u_tilde, x_v) + sum(np.dot(v, x_v) for v in v_tildes))


class Domain:
    """One dataset's graphs, base vectors and subgraph cache.

    Graphs only ever contain train-split interactions; each sample's own
    history edges are injected at extraction time.
    """

    def __init__(self, catalog: Catalog, samples: list[TrainingSample], config: ModelConfig,
                 primitive_seed: int = 0, extra_train=()):
        self.catalog = catalog
        self.config = config
        self.samples = samples
        self.builder = GraphBuilder(list(samples) + list(extra_train), catalog,
                                    use_attributes=config.attributes_enabled)
        self.sizes = self.builder.sizes
        self.primitives = PrimitiveEmbeddings(primitive_seed, config.d)
        self.base = self.primitives.table(self.sizes)
        self.item_gids = np.arange(self.sizes.offset(Kind.ITEM),
                                   self.sizes.offset(Kind.ITEM) + self.sizes.items)
        self._cache: dict = {}
        self._seen: dict[int, set[int]] = {}

    def reseed_primitives(self, seed: int) -> None:
        self.primitives = PrimitiveEmbeddings(seed, self.config.d)
        self.base = self.primitives.table(self.sizes)

    def train_items(self, user: int) -> set[int]:
        if user not in self._seen:
            self._seen[user] = self.builder.user_items(user)
        return self._seen[user]

    def term_span(self, sample: TrainingSample, term: int) -> tuple[int, int]:
        if term == LONG:
            return 0, len(sample.history)
        return subsessions(len(sample.history), self.config.tau)[term]

    def subgraph(self, sample: TrainingSample, term: int) -> EnclosingSubgraph:
        key = (sample.sid, sample.user, sample.window, term)
        hit = self._cache.get(key) if sample.sid >= 0 else None
        if hit is not None:
            return hit
        lo, hi = self.term_span(sample, term)
        a = sample.window[0]
        graph = self.builder.build((a + lo, a + hi - 1))
        sg = extract_for_sample(graph, sample, self.config.h, items=sample.history[lo:hi],
                                max_nodes_per_hop=self.config.node_cap)
        if sample.sid >= 0:
            self._cache[key] = sg
        return sg


@dataclass
class _TermBatch:
    nodes: np.ndarray
    edges: tuple
    user_rows: np.ndarray
    item_rows: np.ndarray  # (B, T)


class RetaGNN:
    def __init__(self, config: ModelConfig, seed: int = 0, params: ParamSet | None = None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else ParamSet.init(config, seed)
        self.steps = 0

    # -- assembling ----------------------------------------------------------

    def _term_batch(self, domain: Domain, samples, term: int) -> _TermBatch:
        sizes = domain.sizes
        if self.config.no_ragnn:
            rows, users, items, off = [], [], [], 0
            for s in samples:
                lo, hi = domain.term_span(s, term)
                seq = s.history[lo:hi]
                rows.append(np.array([sizes.gid(U(s.user))] + [sizes.gid(V(v)) for v in seq]))
                users.append(off)
                items.append(off + 1 + np.arange(len(seq)))
                off += 1 + len(seq)
            nodes = np.concatenate(rows)
            empty = (np.zeros(len(nodes) + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                     np.zeros(0, dtype=np.int64))
            return _TermBatch(nodes, empty, np.array(users), np.array(items))
        subs = [domain.subgraph(s, term) for s in samples]
        edges, offsets = batch_edges(subs)
        nodes = np.concatenate([sg.nodes for sg in subs])
        users, items = [], []
        for s, sg, off in zip(samples, subs, offsets):
            lo, hi = domain.term_span(s, term)
            users.append(off + np.searchsorted(sg.nodes, sizes.gid(U(s.user))))
            gids = [sizes.gid(V(v)) for v in s.history[lo:hi]]
            items.append(off + np.searchsorted(sg.nodes, gids))
        return _TermBatch(nodes, edges, np.array(users), np.array(items))

    def _stack_embed(self, stack: RagnnStack, edges, X0: nk.Tensor) -> nk.Tensor:
        if self.config.no_ragnn:
            return X0
        return stack_forward(stack, edges, X0, self.config.leaky_slope,
                             use_attention=not self.config.no_rel_attention,
                             activation=self.config.inter_layer_activation)

    def forward(self, domain: Domain, samples: list[TrainingSample], candidates=None):
        """Return ``(q, X_cand, betas)``.

        ``q[b] = u~_b + sum_i v~_{b,i}`` so the score of item ``v`` is
        ``q[b] . x_v``. ``X_cand`` holds primitive embeddings of ``candidates``
        (item indices); ``betas`` maps a term to its attention matrices.
        """
        cfg, p = self.config, self.params
        B, t, d = len(samples), cfg.t, cfg.d
        if any(len(s.history) != t for s in samples):
            raise ValueError(f"every history must have length t={t}")
        spans = subsessions(t, cfg.tau)
        long_terms = [] if cfg.no_long else [LONG]
        short_terms = [] if cfg.no_short else list(range(len(spans)))
        batches = {term: self._term_batch(domain, samples, term)
                   for term in long_terms + short_terms}

        cand_gids = (domain.item_gids[np.asarray(candidates, dtype=np.int64)]
                     if candidates is not None else np.zeros(0, dtype=np.int64))
        all_gids = np.concatenate([b.nodes for b in batches.values()] + [cand_gids])
        uniq, inverse = np.unique(all_gids, return_inverse=True)
        table = p.embed(nk.Tensor(domain.base[uniq]), cfg.leaky_slope)
        pos_of = {}
        cursor = 0
        for term, b in batches.items():
            pos_of[term] = inverse[cursor:cursor + len(b.nodes)]
            cursor += len(b.nodes)
        cand_rows = inverse[cursor:]

        betas = {}
        zeros_u = nk.Tensor(np.zeros((B, d), dtype=nk.default_dtype()))
        zeros_v = nk.Tensor(np.zeros((B, t, d), dtype=nk.default_dtype()))

        def run(stack, ssa_params, terms):
            if not terms:
                return {}
            merged = _merge([(k, batches[k]) for k in terms])
            X0 = nk.gather_rows(table, np.concatenate([pos_of[k] for k in terms]))
            H = self._stack_embed(stack, merged.edges, X0)
            out = {}
            for k in terms:
                b = batches[k]
                shift = merged.shift[k]
                u = nk.gather_rows(H, b.user_rows + shift)
                T = b.item_rows.shape[1]
                seq = nk.reshape(nk.gather_rows(H, (b.item_rows + shift).reshape(-1)), (B, T, d))
                if cfg.no_ssa:
                    z = seq
                else:
                    z, beta = ssa_forward(ssa_params, seq)
                    betas[k] = beta.value
                out[k] = (u, z)
            return out

        res = {}
        res.update(run(p.long, p.ssa_long, long_terms))
        res.update(run(p.short, p.ssa_short, short_terms))

        user_parts = [res[LONG][0] if LONG in res else zeros_u]
        item_parts = [res[LONG][1] if LONG in res else zeros_v]
        for j, (lo, hi) in enumerate(spans):
            if j in res:
                u_j, z_j = res[j]
                user_parts.append(u_j)
                pieces = []
                if lo > 0:
                    pieces.append(nk.Tensor(np.zeros((B, lo, d), dtype=nk.default_dtype())))
                pieces.append(z_j)
                if hi < t:
                    pieces.append(nk.Tensor(np.zeros((B, t - hi, d), dtype=nk.default_dtype())))
                item_parts.append(nk.concat(pieces, axis=1) if len(pieces) > 1 else z_j)
            else:
                user_parts.append(zeros_u)
                item_parts.append(zeros_v)
        u_tilde = p.fusion_user(nk.concat(user_parts, axis=1), cfg.leaky_slope)
        fused = nk.reshape(nk.concat(item_parts, axis=2), (B * t, d * (1 + len(spans))))
        v_tilde = nk.reshape(p.fusion_item(fused, cfg.leaky_slope), (B, t, d))
        q = nk.add(u_tilde, nk.sum(v_tilde, axis=1))
        x_cand = nk.gather_rows(table, cand_rows) if candidates is not None else None
        return q, x_cand, betas

    # -- objective -----------------------------------------------------------

    def loss(self, domain: Domain, samples, positives, negatives, owners):
        """BPR + lambda * RAR + eta * L2 over pairs ``(owners[i], positives[i], negatives[i])``.

        ``owners`` indexes into ``samples``. Returns ``(loss, parts)``.
        """
        cfg = self.config
        pos = np.asarray(positives, dtype=np.int64)
        neg = np.asarray(negatives, dtype=np.int64)
        owners = np.asarray(owners, dtype=np.int64)
        q, x, _ = self.forward(domain, samples, np.concatenate([pos, neg]))
        n = len(pos)
        x_pos = nk.gather_rows(x, np.arange(n))
        x_neg = nk.gather_rows(x, np.arange(n, 2 * n))
        q_rows = nk.gather_rows(q, owners)
        s_pos = nk.sum(nk.mul(q_rows, x_pos), axis=1)
        s_neg = nk.sum(nk.mul(q_rows, x_neg), axis=1)
        bpr = bpr_term(s_pos, s_neg)
        total = bpr
        rar = rar_term(self.params)
        lam = cfg.effective_lambda
        if lam:
            total = nk.add(total, nk.scale(rar, lam))
        l2 = l2_term(self.params)
        if cfg.l2_eta:
            total = nk.add(total, nk.scale(l2, cfg.l2_eta))
        parts = {"bpr": float(bpr.value), "rar": float(rar.value), "l2": float(l2.value),
                 "total": float(total.value)}
        return total, parts

    # -- inference -----------------------------------------------------------

    def item_embeddings(self, domain: Domain) -> np.ndarray:
        with nk.no_grad():
            return self.params.embed(nk.Tensor(domain.base[domain.item_gids]),
                                     self.config.leaky_slope).value

    def score_all(self, domain: Domain, samples, batch_size: int = 64) -> np.ndarray:
        """``(len(samples), N)`` score matrix over every catalog item."""
        X = self.item_embeddings(domain)
        out = []
        with nk.no_grad():
            for i in range(0, len(samples), batch_size):
                q, _, _ = self.forward(domain, samples[i:i + batch_size])
                out.append(q.value @ X.T)
        return np.concatenate(out) if out else np.zeros((0, X.shape[0]))

    def attention(self, domain: Domain, samples, batch_size: int = 64) -> dict[int, list]:
        out: dict[int, list] = {}
        with nk.no_grad():
            for i in range(0, len(samples), batch_size):
                _, _, betas = self.forward(domain, samples[i:i + batch_size])
                for k, b in betas.items():
                    out.setdefault(k, []).append(b)
        return out


@dataclass
class _Merged:
    edges: tuple
    shift: dict


def _merge(batches) -> _Merged:
    """Concatenate ``(term, batch)`` pairs into one disjoint graph."""
    indptrs, indices, rels = [np.zeros(1, dtype=np.int64)], [], []
    shift, node_off, edge_off = {}, 0, 0
    for key, b in batches:
        p, ix, r = b.edges
        indptrs.append(p[1:] + edge_off)
        indices.append(ix + node_off)
        rels.append(r)
        shift[key] = node_off
        node_off += len(b.nodes)
        edge_off += len(ix)
    return _Merged((np.concatenate(indptrs), np.concatenate(indices), np.concatenate(rels)),
                   shift)
