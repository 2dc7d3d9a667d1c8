"""Planted-preference sequential data for desk-scale checks.

Users belong to latent clusters. Each cluster prefers a bundle of two
attribute values; over a user's sequence the emphasis drifts from the first
attribute of the bundle to the second. Items carry two attribute values each.
"""
from __future__ import annotations

import numpy as np

from .ingest import Catalog, DatasetStats, UserSequence


def planted_dataset(num_users: int = 300, num_items: int = 200, num_attrs: int = 8,
                    num_clusters: int = 4, min_len: int = 20, max_len: int = 30,
                    noise: float = 0.1, taste_spread: float = 0.0, seed: int = 0,
                    prefix: str = ""):
    """Return ``(sequences, catalog, stats)``; no user repeats an item."""
    if num_attrs < 2:
        raise ValueError("need at least two attribute values")
    if max_len > num_items or min_len > max_len:
        raise ValueError("need min_len <= max_len <= num_items (no repeats)")
    rng = np.random.default_rng(seed)
    primary = rng.integers(0, num_attrs, num_items)
    secondary = (primary + rng.integers(1, num_attrs, num_items)) % num_attrs
    item_attrs = {v: frozenset((int(primary[v]), int(secondary[v]))) for v in range(num_items)}
    has_attr = np.zeros((num_attrs, num_items), dtype=bool)
    has_attr[primary, np.arange(num_items)] = True
    has_attr[secondary, np.arange(num_items)] = True

    bundles = [((2 * c) % num_attrs, (2 * c + 1) % num_attrs) for c in range(num_clusters)]
    taste = np.exp(rng.normal(0.0, 1.0, size=(num_clusters, num_items)) * taste_spread)

    sequences = []
    for u in range(num_users):
        c = int(rng.integers(num_clusters))
        first, second = bundles[c]
        length = int(rng.integers(min_len, max_len + 1))
        used = np.zeros(num_items, dtype=bool)
        seq = []
        for p in range(length):
            drift = p / max(length - 1, 1)
            if rng.random() < noise:
                pool = ~used
                w = np.ones(num_items)
            else:
                attr = second if rng.random() < drift else first
                pool = has_attr[attr] & ~used
                if not pool.any():
                    pool = ~used
                w = taste[c]
            w = np.where(pool, w, 0.0)
            v = int(rng.choice(num_items, p=w / w.sum()))
            used[v] = True
            seq.append(v)
        sequences.append(UserSequence(u, tuple(seq)))

    catalog = Catalog(
        users=[f"{prefix}u{u}" for u in range(num_users)],
        items=[f"{prefix}v{v}" for v in range(num_items)],
        attributes=[f"{prefix}a{a}" for a in range(num_attrs)],
        item_attrs=item_attrs,
    )
    stats = DatasetStats(num_users, num_items, sum(len(s.items) for s in sequences), num_attrs)
    return sequences, catalog, stats
