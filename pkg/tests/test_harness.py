import dataclasses
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retagnn import harness
from retagnn.checkpoint import load_params, save_checkpoint
from retagnn.config import ModelConfig, TrainConfig
from retagnn.graph import Relation
from retagnn.ingest import (TEST, TRAIN, Catalog, TrainingSample, make_csr_samples,
                            make_isr_samples, make_isr_split)
from retagnn.metrics import (expected_random_ndcg, ndcg_at_k, precision_at_k, rank_items,
                             recall_at_k)
from retagnn.recommender import Domain, RetaGNN, rar_term
from retagnn.synthetic import planted_dataset
from oracles import ref_ndcg, ref_precision, ref_recall, toy_domain


# -- metrics -------------------------------------------------------------------

def test_metrics_match_reference_exhaustively():
    items = list(range(5))
    for k in (1, 3, 5, 10):
        for ranked in itertools.permutations(items):
            for r in range(1, 6):
                for rel in itertools.combinations(items, r):
                    assert precision_at_k(ranked, rel, k) == ref_precision(ranked, rel, k)
                    assert recall_at_k(ranked, rel, k) == ref_recall(ranked, rel, k)
                    assert ndcg_at_k(ranked, rel, k) == ref_ndcg(ranked, rel, k)


def test_metrics_match_reference_up_to_twenty_items():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n = int(rng.integers(1, 21))
        ranked = rng.permutation(n).tolist()
        rel = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist()
        k = int(rng.integers(1, 21))
        assert precision_at_k(ranked, rel, k) == ref_precision(ranked, rel, k)
        assert recall_at_k(ranked, rel, k) == ref_recall(ranked, rel, k)
        assert ndcg_at_k(ranked, rel, k) == ref_ndcg(ranked, rel, k)


def test_metric_spot_values():
    ranked = list(range(20))
    assert ndcg_at_k(ranked, [0], 10) == 1.0
    assert ndcg_at_k(ranked, [2], 10) == 0.5
    assert ndcg_at_k(ranked, [15], 10) == 0.0
    assert precision_at_k(ranked, [0, 1, 30], 10) == pytest.approx(0.2)
    assert recall_at_k(ranked, [0, 1, 30, 31], 10) == 0.5
    assert ndcg_at_k(ranked, [], 10) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=30, unique=True),
       st.lists(st.integers(0, 40), min_size=1, max_size=10, unique=True),
       st.integers(1, 15))
def test_metric_bounds(ranked, rel, k):
    for f in (precision_at_k, recall_at_k, ndcg_at_k):
        assert 0.0 <= f(ranked, rel, k) <= 1.0 + 1e-12


def test_rank_items_ties_to_lower_index():
    scores = np.array([0.5, 2.0, 0.5, 2.0, -1.0])
    assert rank_items(scores, np.array([4, 3, 2, 1, 0])).tolist() == [1, 3, 0, 2, 4]
    assert rank_items(scores, np.array([2, 0])).tolist() == [0, 2]


def test_expected_random_ndcg_matches_enumeration():
    n, rel, k = 6, [1, 4], 3
    vals = [ndcg_at_k(p, rel, k) for p in itertools.permutations(range(n))]
    assert expected_random_ndcg(n, len(rel), k) == pytest.approx(np.mean(vals), abs=1e-12)


# -- baselines and candidates --------------------------------------------------

def test_candidates_exclude_known_items():
    dom, _, samples = toy_domain()
    s = [x for x in samples if x.split == TEST and x.user == 0][0]
    cand = harness.candidate_items(dom, s)
    assert not set(cand.tolist()) & (dom.train_items(0) | set(s.history))
    assert set(s.future) <= set(cand.tolist())


def test_popularity_baseline_example():
    cat = Catalog(["a", "b", "c"], [f"v{i}" for i in range(6)], [], {})
    samples = [TrainingSample(0, (0, 1), (2,), (0, 1), TRAIN, 0),
               TrainingSample(1, (0, 2), (3,), (0, 1), TRAIN, 1),
               TrainingSample(2, (0, 5), (4,), (0, 1), TEST, 2)]
    cfg = ModelConfig(d=2, t=2, tau=1, use_attributes=False)
    dom = Domain(cat, samples, cfg)
    np.testing.assert_array_equal(harness.popularity_scores(dom), [2, 1, 2, 1, 0, 0])
    # user 2 excludes 0 and 5; ranking 2, 1, 3, 4 puts the truth (4) fourth
    P, R, N = harness.popularity_baseline(dom, [samples[2]], k=10)
    assert (P, R) == (0.1, 1.0)
    assert N == pytest.approx(1 / math.log2(5))


def test_report_text_and_json(tmp_path):
    rep = harness.RankingReport("CSR", 10, 0.125, 0.5, 0.25, 4, 7, {"d": 16})
    assert rep.to_text().splitlines() == [
        "setting=CSR", "k=10", "precision=0.1250000000", "recall=0.5000000000",
        "ndcg=0.2500000000", "samples=4", "seed=7", "config.d=16"]
    txt, js = rep.write(tmp_path)
    assert txt.read_text() == rep.to_text()
    assert json.loads(js.read_text())["ndcg"] == 0.25
    with pytest.raises(ValueError):
        harness.RankingReport("CSR", 10, 1.5, 0, 0, 1, 0)
    with pytest.raises(ValueError):
        harness.RankingReport("CSR", 10, 0, 0, 0, 0, 0)


# -- training ------------------------------------------------------------------

def small_planted(seed=0, users=24, d=4):
    seqs, cat, _ = planted_dataset(num_users=users, num_items=30, num_attrs=4, min_len=8,
                                   max_len=10, seed=seed)
    cfg = ModelConfig(d=d, t=4, g=1, tau=2, l_lo=1, l_sh=1, batch_size=8)
    samples = make_csr_samples(seqs, cfg.t, cfg.g, stride=2)
    return Domain(cat, samples, cfg), cfg, samples, seqs, cat


def test_loss_drops_over_first_epochs():
    dom, cfg, _, _, _ = small_planted()
    cfg = dataclasses.replace(cfg, l_lo=2, l_sh=2)
    res = harness.train(RetaGNN(cfg, seed=0), dom, TrainConfig(epochs=2, patience=5), seed=0)
    assert res.curve[1][1] < res.curve[0][1]
    assert res.steps > 0


def test_training_is_deterministic():
    curves = []
    for _ in range(2):
        dom, cfg, _, _, _ = small_planted()
        res = harness.train(RetaGNN(cfg, seed=3), dom, TrainConfig(epochs=2), seed=3)
        curves.append((res.curve, res.val_ndcg))
    assert curves[0] == curves[1]


def test_large_lambda_pulls_layers_together():
    def spread(lam):
        dom, cfg, _, _, _ = small_planted()
        cfg = dataclasses.replace(cfg, rar_lambda=lam, l_lo=2, l_sh=2, lr=0.01)
        model = RetaGNN(cfg, seed=1)
        harness.train(model, dom, TrainConfig(epochs=2, patience=9), seed=1, val_samples=[])
        return float(rar_term(model.params).value)
    assert spread(50.0) < spread(0.0)


def test_no_leakage_into_graphs_or_negatives():
    dom, _, samples, _, _ = small_planted()
    train_pairs = {(s.user, v) for s in samples if s.split == TRAIN
                   for v in s.history + s.future}
    g = dom.builder.build((0, 10**6))
    for src, rel, dst in g.edges():
        if rel == Relation.UserLikesItem:
            assert (src.index, dst.index) in train_pairs
    rng = np.random.default_rng(0)
    train = [s for s in samples if s.split == TRAIN]
    owners, pos, neg = harness.sample_negatives(dom, train, rng)
    for b, v in zip(owners, neg):
        s = train[b]
        assert v not in s.future and v not in s.history and v not in dom.train_items(s.user)


def test_isr_rejects_overlap_and_keeps_params():
    seqs, cat, _ = planted_dataset(num_users=20, num_items=30, num_attrs=4, min_len=8,
                                   max_len=10, seed=2)
    cfg = ModelConfig(d=4, t=4, g=1, tau=2, l_lo=1, l_sh=1)
    tr, te = make_isr_split(seqs, 0.7, seed=0)
    samples = make_isr_samples(tr, te, cfg.t, cfg.g, stride=2)
    held = {q.user for q in te}
    train_s = [q for q in samples if q.user not in held]
    test_s = [q for q in samples if q.user in held]
    assert test_s and all(q.split == TEST for q in test_s)
    dom = Domain(cat, samples, cfg)
    model = RetaGNN(cfg, seed=0)
    before = model.params.values()
    rep = harness.eval_isr(model, dom, test_s, TrainConfig(), seed=0)
    assert rep.setting == harness.ISR and rep.samples == len(test_s)
    for k, v in model.params.values().items():
        np.testing.assert_array_equal(v, before[k])
    leaked = [dataclasses.replace(test_s[0], user=train_s[0].user)]
    with pytest.raises(harness.ProtocolError):
        harness.eval_isr(model, dom, leaked, TrainConfig(), seed=0)


def test_tsr_applies_loaded_params(tmp_path):
    dom, cfg, _, _, _ = small_planted(d=4)
    cfg = dataclasses.replace(cfg, use_attributes=False)
    src = RetaGNN(cfg, seed=0)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, src.params, {"d": cfg.d})
    params, _ = load_params(path, cfg)
    seqs, cat, _ = planted_dataset(num_users=17, num_items=41, num_attrs=5, min_len=8,
                                   max_len=10, seed=9)
    samples = make_csr_samples(seqs, cfg.t, cfg.g, stride=2)
    rep, model, target = harness.eval_tsr(params, cfg, cat, samples, TrainConfig(), seed=0)
    assert rep.setting == harness.TSR
    assert target.sizes.attrs == 0 and target.catalog.num_items == 41
    assert not np.array_equal(target.base[:5], dom.base[:5])


def test_evaluate_flags_non_finite_scores():
    dom, cfg, samples = toy_domain(d=3)
    model = RetaGNN(cfg, seed=0)
    model.params.fusion_user.b2.value[0] = np.nan
    with pytest.raises(harness.DivergenceError):
        harness.evaluate(model, dom, [s for s in samples if s.split == TEST])
