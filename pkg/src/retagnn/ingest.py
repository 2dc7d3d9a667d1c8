"""Dataset loading, implicit-feedback conversion and sample construction."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ML_SCALE = (1, 5)
BC_SCALE = (0, 10)
MALFORMED_LIMIT = 0.01

TRAIN, VALIDATION, TEST = "train", "validation", "test"


class ConfigurationError(Exception):
    """Missing or unusable inputs (exit code 2)."""


class DataError(Exception):
    """Inputs that parse but cannot be used (exit code 3)."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: int
    timestamp: int


@dataclass
class Catalog:
    users: list[str]
    items: list[str]
    attributes: list[str]
    item_attrs: dict[int, frozenset[int]] = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.items)

    @property
    def num_attrs(self) -> int:
        return len(self.attributes)

    def attrs_of(self, item: int) -> frozenset[int]:
        return self.item_attrs.get(item, frozenset())


@dataclass(frozen=True)
class UserSequence:
    user: int
    items: tuple[int, ...]


@dataclass(frozen=True)
class TrainingSample:
    user: int
    history: tuple[int, ...]
    future: tuple[int, ...]
    window: tuple[int, int]
    split: str
    sid: int = -1

    @property
    def start(self) -> int:
        return self.window[0]


@dataclass
class DatasetStats:
    users: int
    items: int
    interactions: int
    attributes: int

    @property
    def density(self) -> float:
        return interaction_density(self.interactions, self.users, self.items)

    def to_text(self) -> str:
        return (f"users={self.users}\nitems={self.items}\ninteractions={self.interactions}\n"
                f"attributes={self.attributes}\ndensity={self.density:.6f}\n")


def interaction_density(interactions: int, users: int, items: int) -> float:
    return interactions / (users * items)


# -- loaders -------------------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.is_file():
        raise ConfigurationError(f"missing file: {path}")
    return path


def _check_malformed(bad: int, total: int, path: Path) -> None:
    if total and bad / total > MALFORMED_LIMIT:
        raise DataError(f"{path}: {bad} of {total} lines malformed")
    if bad:
        log.warning("%s: skipped %d malformed lines", path, bad)


def parse_ml_rating(line: str) -> Interaction:
    user, item, rating, ts = line.strip().split("::")
    r = int(rating)
    if not ML_SCALE[0] <= r <= ML_SCALE[1]:
        raise ValueError(f"rating {r} outside MovieLens scale")
    return Interaction(user, item, r, int(ts))


def parse_ml_genres(line: str) -> tuple[str, list[str]]:
    movie_id, _title, genres = line.rstrip("\n").split("::")
    return movie_id, [g for g in genres.split("|") if g]


def load_movielens(path) -> tuple[list[Interaction], Catalog]:
    path = Path(path)
    ratings_path = _require(path / "ratings.dat")
    movies_path = _require(path / "movies.dat")

    interactions, bad, total = [], 0, 0
    with open(ratings_path, encoding="latin-1") as fh:
        for line in fh:
            if not line.strip():
                continue
            total += 1
            try:
                interactions.append(parse_ml_rating(line))
            except ValueError:
                bad += 1
    _check_malformed(bad, total, ratings_path)

    genres_of, bad, total = {}, 0, 0
    with open(movies_path, encoding="latin-1") as fh:
        for line in fh:
            if not line.strip():
                continue
            total += 1
            try:
                movie, genres = parse_ml_genres(line)
            except ValueError:
                bad += 1
                continue
            genres_of[movie] = genres
    _check_malformed(bad, total, movies_path)
    return _dedupe(interactions), _catalog(interactions, genres_of)


def parse_bc_row(row: list[str]) -> tuple[str, str, int]:
    user, isbn, rating = row
    r = int(rating)
    if not BC_SCALE[0] <= r <= BC_SCALE[1]:
        raise ValueError(f"rating {r} outside Book-Crossing scale")
    return user, isbn, r


def load_bookcrossing(path) -> tuple[list[Interaction], Catalog]:
    """Book-Crossing has no timestamps: file order per user defines chronology."""
    path = Path(path)
    ratings_path = _require(path / "BX-Book-Ratings.csv")
    interactions, bad, total = [], 0, 0
    ordinal: dict[str, int] = {}
    with open(ratings_path, encoding="latin-1", newline="") as fh:
        reader = csv.reader(fh, delimiter=";", quotechar='"')
        for i, row in enumerate(reader):
            if i == 0 and row and row[0] == "User-ID":
                continue
            if not row:
                continue
            total += 1
            try:
                user, isbn, r = parse_bc_row(row)
            except ValueError:
                bad += 1
                continue
            ts = ordinal.get(user, 0)
            ordinal[user] = ts + 1
            interactions.append(Interaction(user, isbn, r, ts))
    _check_malformed(bad, total, ratings_path)
    return _dedupe(interactions), _catalog(interactions, {})


def _dedupe(interactions: list[Interaction]) -> list[Interaction]:
    seen, out = set(), []
    for x in interactions:
        key = (x.user_id, x.item_id, x.timestamp)
        if key not in seen:
            seen.add(key)
            out.append(x)
    return out


def _catalog(interactions, attrs_of_raw: dict[str, list[str]]) -> Catalog:
    users = sorted({x.user_id for x in interactions})
    items = sorted({x.item_id for x in interactions} | set(attrs_of_raw))
    attributes = sorted({a for v in attrs_of_raw.values() for a in v})
    a_index = {a: i for i, a in enumerate(attributes)}
    v_index = {v: i for i, v in enumerate(items)}
    item_attrs = {v_index[v]: frozenset(a_index[a] for a in attrs)
                  for v, attrs in attrs_of_raw.items() if attrs}
    return Catalog(users, items, attributes, item_attrs)


# -- preprocessing -------------------------------------------------------------

def binarize(interactions: list[Interaction], threshold: int) -> list[Interaction]:
    return [Interaction(x.user_id, x.item_id, 1, x.timestamp)
            for x in interactions if x.rating >= threshold]


def preprocess(interactions: list[Interaction], catalog: Catalog,
               min_interactions: int = 4) -> tuple[list[UserSequence], Catalog, DatasetStats]:
    """Filter users and items, re-densify indices, order each user's items in time.

    Items without attributes are dropped when the dataset has an attribute
    universe; ties in timestamp keep file order.
    """
    has_attrs = catalog.num_attrs > 0
    raw_attrs = {catalog.items[v]: [catalog.attributes[a] for a in sorted(s)]
                 for v, s in catalog.item_attrs.items()}
    rows = [(x.user_id, x.item_id, x.timestamp, i) for i, x in enumerate(interactions)
            if not has_attrs or raw_attrs.get(x.item_id)]
    counts: dict[str, int] = {}
    for u, *_ in rows:
        counts[u] = counts.get(u, 0) + 1
    rows = [r for r in rows if counts[r[0]] >= min_interactions]
    if not rows:
        raise DataError("no interactions left after preprocessing")

    users = sorted({r[0] for r in rows})
    items = sorted({r[1] for r in rows})
    u_index = {u: i for i, u in enumerate(users)}
    v_index = {v: i for i, v in enumerate(items)}
    kept_attrs = sorted({a for v in items for a in raw_attrs.get(v, [])})
    a_index = {a: i for i, a in enumerate(kept_attrs)}
    item_attrs = {v_index[v]: frozenset(a_index[a] for a in raw_attrs[v])
                  for v in items if raw_attrs.get(v)}

    rows.sort(key=lambda r: (u_index[r[0]], r[2], r[3]))
    per_user: dict[int, list[int]] = {}
    for u, v, _, _ in rows:
        per_user.setdefault(u_index[u], []).append(v_index[v])
    sequences = [UserSequence(u, tuple(vs)) for u, vs in sorted(per_user.items())]
    new_catalog = Catalog(users, items, kept_attrs, item_attrs)
    stats = DatasetStats(len(users), len(items), len(rows), len(kept_attrs))
    log.info("preprocessed: %s", stats.to_text().replace("\n", " "))
    return sequences, new_catalog, stats


# -- samples -------------------------------------------------------------------

def window_starts(length: int, t: int, g: int, stride: int) -> list[int]:
    if length < t + g:
        return []
    return list(range(0, length - (t + g) + 1, stride))


def _split_labels(n: int) -> list[str]:
    if n < 5:
        labels = [TRAIN] * n
        if n >= 2:
            labels[-1] = TEST
        if n >= 3:
            labels[-2] = VALIDATION
        return labels
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    n_test = n - n_train - n_val
    return [TRAIN] * n_train + [VALIDATION] * n_val + [TEST] * n_test


def make_csr_samples(sequences: list[UserSequence], t: int, g: int,
                     stride: int | None = None) -> list[TrainingSample]:
    """Sliding windows of length ``t + g`` with a chronological per-user split.

    Per user the earliest ~60% of windows are train, the next ~20% validation
    and the latest ~20% test. Users with fewer than five windows keep all but
    the last two in train, then one validation and one test window.
    """
    if t < 2 or g < 1:
        raise ValueError(f"need t >= 2 and g >= 1, got t={t}, g={g}")
    stride = g if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    samples = []
    for seq in sequences:
        starts = window_starts(len(seq.items), t, g, stride)
        for s, label in zip(starts, _split_labels(len(starts))):
            samples.append(TrainingSample(
                user=seq.user,
                history=tuple(seq.items[s:s + t]),
                future=tuple(seq.items[s + t:s + t + g]),
                window=(s, s + t - 1),
                split=label,
                sid=len(samples),
            ))
    return samples


def make_isr_split(sequences: list[UserSequence], train_user_fraction: float,
                   seed: int) -> tuple[list[UserSequence], list[UserSequence]]:
    if not 0.0 < train_user_fraction < 1.0:
        raise ValueError(f"train_user_fraction must be in (0, 1), got {train_user_fraction}")
    users = sorted(s.user for s in sequences)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(users))
    n_train = int(round(train_user_fraction * len(users)))
    train_users = {users[i] for i in perm[:n_train]}
    train = [s for s in sequences if s.user in train_users]
    test = [s for s in sequences if s.user not in train_users]
    return train, test


def make_isr_samples(train_seqs, test_seqs, t: int, g: int,
                     stride: int | None = None) -> list[TrainingSample]:
    """Train users keep their CSR split; every window of a held-out user is a test sample."""
    samples = make_csr_samples(train_seqs, t, g, stride)
    held_out = make_csr_samples(test_seqs, t, g, stride)
    offset = len(samples)
    for i, s in enumerate(held_out):
        samples.append(TrainingSample(s.user, s.history, s.future, s.window, TEST, offset + i))
    return samples


@dataclass(frozen=True)
class TransferJob:
    source: str
    target: str
    use_attributes: bool = False


def make_tsr_pair(source: str, target: str) -> TransferJob:
    if source == target:
        raise ValueError(f"transfer needs disjoint domains, got {source!r} twice")
    return TransferJob(source, target, use_attributes=False)


# -- normalized bundle ---------------------------------------------------------

@dataclass
class Bundle:
    sequences: list[UserSequence]
    catalog: Catalog
    stats: DatasetStats
    name: str = ""


def write_bundle(out_dir, sequences, catalog: Catalog, stats: DatasetStats,
                 extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
        fh.write("user\titem\tposition\n")
        for seq in sequences:
            for p, v in enumerate(seq.items):
                fh.write(f"{seq.user}\t{v}\t{p}\n")
    with open(out / "item_attrs.tsv", "w", encoding="utf-8") as fh:
        fh.write("item\tattribute\n")
        for v in sorted(catalog.item_attrs):
            for a in sorted(catalog.item_attrs[v]):
                fh.write(f"{v}\t{a}\n")
    with open(out / "id_maps.tsv", "w", encoding="utf-8") as fh:
        fh.write("kind\tindex\traw_id\n")
        for kind, ids in (("user", catalog.users), ("item", catalog.items),
                          ("attribute", catalog.attributes)):
            for i, raw in enumerate(ids):
                fh.write(f"{kind}\t{i}\t{raw}\n")
    text = stats.to_text()
    for k, v in (extra or {}).items():
        text += f"{k}={v}\n"
    (out / "stats.txt").write_text(text, encoding="utf-8")
    return out


def read_bundle(path) -> Bundle:
    path = Path(path)
    for name in ("interactions.tsv", "item_attrs.tsv", "id_maps.tsv"):
        _require(path / name)
    ids: dict[str, list[str]] = {"user": [], "item": [], "attribute": []}
    with open(path / "id_maps.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            kind, idx, raw = line.rstrip("\n").split("\t")
            if int(idx) != len(ids[kind]):
                raise DataError(f"{path}: id map for {kind} is not dense at {idx}")
            ids[kind].append(raw)
    item_attrs: dict[int, set[int]] = {}
    with open(path / "item_attrs.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            v, a = map(int, line.split("\t"))
            item_attrs.setdefault(v, set()).add(a)
    per_user: dict[int, list[tuple[int, int]]] = {}
    with open(path / "interactions.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            u, v, p = map(int, line.split("\t"))
            per_user.setdefault(u, []).append((p, v))
    sequences = [UserSequence(u, tuple(v for _, v in sorted(rows)))
                 for u, rows in sorted(per_user.items())]
    catalog = Catalog(ids["user"], ids["item"], ids["attribute"],
                      {v: frozenset(s) for v, s in item_attrs.items()})
    n = sum(len(s.items) for s in sequences)
    stats = DatasetStats(catalog.num_users, catalog.num_items, n, catalog.num_attrs)
    return Bundle(sequences, catalog, stats, name=os.path.basename(os.path.normpath(path)))


def ingest_dataset(kind: str, path, threshold: int | None = None,
                   min_interactions: int = 4) -> tuple[list[UserSequence], Catalog, DatasetStats]:
    if kind == "movielens":
        interactions, catalog = load_movielens(path)
        threshold = 4 if threshold is None else threshold
    elif kind == "bookcrossing":
        interactions, catalog = load_bookcrossing(path)
        threshold = 9 if threshold is None else threshold
    else:
        raise ConfigurationError(f"unknown dataset kind {kind!r}")
    return preprocess(binarize(interactions, threshold), catalog, min_interactions)


def num_windows(length: int, t: int, g: int, stride: int) -> int:
    return max(0, math.floor((length - (t + g)) / stride) + 1) if length >= t + g else 0
