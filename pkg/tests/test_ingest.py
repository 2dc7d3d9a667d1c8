import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retagnn import ingest
from retagnn.ingest import (TEST, TRAIN, VALIDATION, Catalog, DataError, ConfigurationError,
                            Interaction, UserSequence)

DENSITY_FIXTURES = [
    # (users, items, interactions, expected density)
    (1204, 3952, 125112, 0.0263),
    (7943, 4687, 215927, 0.0058),
    (52406, 41264, 1856747, 0.0009),
]


def _write_ml(tmp_path, ratings, movies):
    (tmp_path / "ratings.dat").write_text("\n".join(ratings) + "\n", encoding="latin-1")
    (tmp_path / "movies.dat").write_text("\n".join(movies) + "\n", encoding="latin-1")
    return tmp_path


def test_parse_ml_line():
    assert ingest.parse_ml_rating("1::1193::5::978300760") == Interaction("1", "1193", 5, 978300760)


def test_ml_genres_split():
    movie, genres = ingest.parse_ml_genres("1::Toy Story (1995)::Animation|Children's")
    assert movie == "1" and genres == ["Animation", "Children's"]


def test_ml_rating_out_of_scale_is_malformed():
    with pytest.raises(ValueError):
        ingest.parse_ml_rating("1::2::7::3")


def test_parse_bc_row():
    assert ingest.parse_bc_row(["276725", "034545104X", "0"]) == ("276725", "034545104X", 0)


def test_load_bookcrossing_ordinals_and_no_attributes(tmp_path):
    (tmp_path / "BX-Book-Ratings.csv").write_text(
        '"User-ID";"ISBN";"Book-Rating"\n"7";"B";"9"\n"9";"A";"3"\n"7";"A";"10"\n',
        encoding="latin-1")
    rows, catalog = ingest.load_bookcrossing(tmp_path)
    assert [(r.user_id, r.item_id, r.timestamp) for r in rows] == [("7", "B", 0), ("9", "A", 0),
                                                                  ("7", "A", 1)]
    assert catalog.num_attrs == 0 and catalog.item_attrs == {}


def test_load_movielens(tmp_path):
    _write_ml(tmp_path, ["1::10::5::100", "1::11::3::50", "2::10::4::70"],
              ["10::A (1990)::Drama|Comedy", "11::B (1991)::Drama"])
    rows, catalog = ingest.load_movielens(tmp_path)
    assert len(rows) == 3
    assert catalog.attributes == ["Comedy", "Drama"]
    assert catalog.attrs_of(catalog.items.index("10")) == frozenset({0, 1})


def test_missing_file_is_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError):
        ingest.load_movielens(tmp_path)


def test_too_many_malformed_lines_is_data_error(tmp_path):
    good = [f"1::{i}::5::{i}" for i in range(50)]
    _write_ml(tmp_path, good + ["garbage"], [f"{i}::T::Drama" for i in range(50)])
    with pytest.raises(DataError):
        ingest.load_movielens(tmp_path)


def test_few_malformed_lines_are_skipped(tmp_path):
    good = [f"1::{i}::5::{i}" for i in range(200)]
    _write_ml(tmp_path, good + ["garbage"], [f"{i}::T::Drama" for i in range(200)])
    rows, _ = ingest.load_movielens(tmp_path)
    assert len(rows) == 200


def test_binarize_thresholds():
    ml = Interaction("u", "v", 4, 0)
    bc = Interaction("u", "w", 8, 0)
    assert ingest.binarize([ml], 4) == [Interaction("u", "v", 1, 0)]
    assert ingest.binarize([bc], 9) == []
    assert ingest.binarize([], 4) == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), max_size=30), st.integers(1, 5))
def test_binarize_idempotent(ratings, threshold):
    xs = [Interaction("u", str(i), r, i) for i, r in enumerate(ratings)]
    once = ingest.binarize(xs, threshold)
    assert ingest.binarize(once, 1) == once


@pytest.mark.parametrize("users,items,interactions,expected", DENSITY_FIXTURES)
def test_density_fixture(users, items, interactions, expected):
    assert ingest.interaction_density(interactions, users, items) == pytest.approx(expected, abs=1e-4)


def _toy_interactions():
    xs = []
    for u, n in (("a", 3), ("b", 5), ("c", 4)):
        for i in range(n):
            xs.append(Interaction(u, f"v{i}", 1, 10 - i))
    return xs


def test_preprocess_drops_light_users_and_orders_by_time():
    xs = _toy_interactions()
    catalog = Catalog(["a", "b", "c"], [f"v{i}" for i in range(5)], [], {})
    seqs, cat, stats = ingest.preprocess(xs, catalog, 4)
    assert cat.users == ["b", "c"]
    assert stats.users == 2 and stats.interactions == 9
    # timestamps decrease with i, so chronological order is v4..v0
    assert [cat.items[v] for v in seqs[0].items] == ["v4", "v3", "v2", "v1", "v0"]


def test_preprocess_ties_keep_file_order():
    xs = [Interaction("u", f"v{i}", 1, 5) for i in (3, 1, 2, 0)]
    catalog = Catalog(["u"], [f"v{i}" for i in range(4)], [], {})
    seqs, cat, _ = ingest.preprocess(xs, catalog, 4)
    assert [cat.items[v] for v in seqs[0].items] == ["v3", "v1", "v2", "v0"]


def test_preprocess_removes_items_without_attributes():
    xs = [Interaction("u", f"v{i}", 1, i) for i in range(5)]
    catalog = Catalog(["u"], [f"v{i}" for i in range(5)], ["g"],
                      {0: frozenset({0}), 1: frozenset({0}), 2: frozenset({0}), 3: frozenset({0})})
    seqs, cat, stats = ingest.preprocess(xs, catalog, 4)
    assert cat.items == ["v0", "v1", "v2", "v3"]
    assert all(cat.attrs_of(v) for v in range(cat.num_items))


def test_preprocess_empty_is_data_error():
    with pytest.raises(DataError):
        ingest.preprocess([], Catalog([], [], [], {}), 4)


@pytest.mark.parametrize("length,expected", [(14, 1), (20, 3), (13, 0)])
def test_window_counts(length, expected):
    assert len(ingest.window_starts(length, 11, 3, 3)) == expected
    assert ingest.num_windows(length, 11, 3, 3) == expected


def test_window_positions():
    seqs = [UserSequence(0, tuple(range(100, 114)))]
    (s,) = ingest.make_csr_samples(seqs, 11, 3)
    assert s.history == tuple(range(100, 111)) and s.future == (111, 112, 113)
    assert s.window == (0, 10)


@pytest.mark.parametrize("n,labels", [
    (1, [TRAIN]),
    (2, [TRAIN, TEST]),
    (3, [TRAIN, VALIDATION, TEST]),
    (4, [TRAIN, TRAIN, VALIDATION, TEST]),
    (5, [TRAIN, TRAIN, TRAIN, VALIDATION, TEST]),
    (10, [TRAIN] * 6 + [VALIDATION] * 2 + [TEST] * 2),
])
def test_split_labels(n, labels):
    assert ingest._split_labels(n) == labels


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=1, max_size=8), st.integers(2, 6), st.integers(1, 4))
def test_csr_samples_properties(lengths, t, g):
    seqs = [UserSequence(u, tuple(range(1000 * u, 1000 * u + n))) for u, n in enumerate(lengths)]
    samples = ingest.make_csr_samples(seqs, t, g)
    for u, group in itertools.groupby(samples, key=lambda s: s.user):
        group = list(group)
        order = [s.split for s in group]
        rank = {TRAIN: 0, VALIDATION: 1, TEST: 2}
        assert [rank[x] for x in order] == sorted(rank[x] for x in order)
        futures = [set(s.future) for s in group]
        for a, b in itertools.combinations(futures, 2):
            assert not a & b
        for s in group:
            assert len(s.history) == t and len(s.future) == g
            assert s.future[0] == s.history[-1] + 1
    assert [s.sid for s in samples] == list(range(len(samples)))


def test_csr_rejects_bad_arguments():
    with pytest.raises(ValueError):
        ingest.make_csr_samples([], 1, 3)


def test_isr_split_properties():
    seqs = [UserSequence(u, (u,)) for u in range(10)]
    tr, te = ingest.make_isr_split(seqs, 0.7, seed=3)
    assert len(tr) == 7 and len(te) == 3
    assert not {s.user for s in tr} & {s.user for s in te}
    assert {s.user for s in tr} | {s.user for s in te} == set(range(10))
    tr2, te2 = ingest.make_isr_split(seqs, 0.7, seed=3)
    assert tr == tr2 and te == te2
    tr3, _ = ingest.make_isr_split(seqs, 0.3, seed=3)
    assert len(tr3) == 3


def test_isr_samples_mark_held_out_windows_as_test():
    seqs = [UserSequence(u, tuple(range(20))) for u in range(4)]
    tr, te = ingest.make_isr_split(seqs, 0.5, seed=0)
    samples = ingest.make_isr_samples(tr, te, 11, 3)
    held = {s.user for s in te}
    assert all(s.split == TEST for s in samples if s.user in held)
    assert any(s.split == TRAIN for s in samples if s.user not in held)


def test_tsr_pairs():
    job = ingest.make_tsr_pair("ml", "bc")
    assert job.use_attributes is False
    with pytest.raises(ValueError):
        ingest.make_tsr_pair("ml", "ml")
    names = ["ml", "bc", "ig"]
    jobs = [ingest.make_tsr_pair(a, b) for a, b in itertools.permutations(names, 2)]
    assert len(jobs) == 6


def test_bundle_roundtrip(tmp_path):
    seqs = [UserSequence(0, (2, 0, 1)), UserSequence(1, (1, 2))]
    catalog = Catalog(["x", "y"], ["i0", "i1", "i2"], ["g0"], {0: frozenset({0}), 2: frozenset({0})})
    stats = ingest.DatasetStats(2, 3, 5, 1)
    ingest.write_bundle(tmp_path, seqs, catalog, stats, extra={"seed": 4})
    b = ingest.read_bundle(tmp_path)
    assert b.sequences == seqs
    assert b.catalog.items == catalog.items and b.catalog.item_attrs == catalog.item_attrs
    text = (tmp_path / "stats.txt").read_text()
    assert "density=0.833333" in text and "seed=4" in text
