"""Training loop, CSR/ISR/TSR evaluation and run reports."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .config import ModelConfig, TrainConfig
from .ingest import TEST, TRAIN, VALIDATION, Catalog, TrainingSample
from .metrics import expected_random_ndcg, ndcg_at_k, precision_at_k, rank_items, recall_at_k
from .recommender import Domain, ParamSet, RetaGNN

log = logging.getLogger(__name__)

CSR, ISR, TSR = "CSR", "ISR", "TSR"


class DivergenceError(FloatingPointError):
    """Non-finite loss or gradient during training (exit code 4)."""


class ProtocolError(ValueError):
    """Evaluation protocol violated, e.g. train and test users overlap."""


@dataclass
class RankingReport:
    setting: str
    k: int
    precision: float
    recall: float
    ndcg: float
    samples: int
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples <= 0:
            raise ValueError("a report needs at least one test sample")
        for name in ("precision", "recall", "ndcg"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_text(self) -> str:
        lines = [f"setting={self.setting}", f"k={self.k}",
                 f"precision={self.precision:.10f}", f"recall={self.recall:.10f}",
                 f"ndcg={self.ndcg:.10f}", f"samples={self.samples}", f"seed={self.seed}"]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        txt, rec = out / f"{stem}.txt", out / f"{stem}.json"
        txt.write_text(self.to_text(), encoding="utf-8")
        rec.write_text(self.to_json() + "\n", encoding="utf-8")
        return txt, rec


# -- ranking -------------------------------------------------------------------

def excluded_items(domain: Domain, sample: TrainingSample) -> set[int]:
    """Items the user is already known to have: train-split items plus the sample's history."""
    return domain.train_items(sample.user) | set(sample.history)


def candidate_items(domain: Domain, sample: TrainingSample, num_neg_eval: int = 0,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Full catalog minus known items; with ``num_neg_eval`` a sampled set plus the truth."""
    N = domain.catalog.num_items
    keep = np.ones(N, dtype=bool)
    known = excluded_items(domain, sample)
    keep[list(known)] = False
    pool = np.flatnonzero(keep)
    if num_neg_eval <= 0:
        return pool
    truth = np.array(sorted(set(sample.future) - known), dtype=np.int64)
    negs = np.setdiff1d(pool, truth)
    rng = rng or np.random.default_rng(sample.sid)
    picked = rng.choice(negs, size=min(num_neg_eval, len(negs)), replace=False)
    return np.union1d(picked, truth)


def rank_candidates(scores: np.ndarray, domain: Domain, sample: TrainingSample,
                    num_neg_eval: int = 0) -> np.ndarray:
    return rank_items(scores, candidate_items(domain, sample, num_neg_eval))


def metrics_from_scores(score_matrix: np.ndarray, domain: Domain, samples, k: int = 10,
                        num_neg_eval: int = 0) -> tuple[float, float, float]:
    P = R = G = 0.0
    for row, s in zip(score_matrix, samples):
        ranked = rank_candidates(row, domain, s, num_neg_eval)
        P += precision_at_k(ranked, s.future, k)
        R += recall_at_k(ranked, s.future, k)
        G += ndcg_at_k(ranked, s.future, k)
    n = max(len(samples), 1)
    return P / n, R / n, G / n


def popularity_scores(domain: Domain) -> np.ndarray:
    """Train-split interaction counts; ties fall to the lower item index when ranking."""
    return domain.builder.item_counts().astype(np.float64)


def popularity_baseline(domain: Domain, samples, k: int = 10, num_neg_eval: int = 0):
    scores = np.tile(popularity_scores(domain), (len(samples), 1))
    return metrics_from_scores(scores, domain, samples, k, num_neg_eval)


def random_ranker_ndcg(domain: Domain, samples, k: int = 10) -> float:
    """Expected NDCG@k of a uniformly random ranking over each sample's candidates."""
    vals = []
    for s in samples:
        cand = candidate_items(domain, s)
        rel = len(set(s.future) & set(cand.tolist()))
        vals.append(expected_random_ndcg(len(cand), rel, k) if rel else 0.0)
    return float(np.mean(vals)) if vals else 0.0


def evaluate(model: RetaGNN, domain: Domain, samples, k: int = 10,
             num_neg_eval: int = 0) -> tuple[float, float, float]:
    if not samples:
        return 0.0, 0.0, 0.0
    scores = model.score_all(domain, samples)
    if not np.all(np.isfinite(scores)):
        raise DivergenceError("non-finite scores at evaluation time")
    return metrics_from_scores(scores, domain, samples, k, num_neg_eval)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamSet
    curve: list[tuple[int, float]]
    val_ndcg: list[float]
    best_epoch: int
    steps: int
    seconds: float


def sample_negatives(domain: Domain, samples, rng: np.random.Generator):
    """One ``(owner, positive, negative)`` triple per future item of each sample."""
    N = domain.catalog.num_items
    owners, pos, neg = [], [], []
    for b, s in enumerate(samples):
        taken = domain.train_items(s.user) | set(s.history) | set(s.future)
        if len(taken) >= N:
            continue
        for v in s.future:
            while True:
                cand = int(rng.integers(N))
                if cand not in taken:
                    break
            owners.append(b)
            pos.append(v)
            neg.append(cand)
    return np.array(owners), np.array(pos), np.array(neg)


def train(model: RetaGNN, domain: Domain, train_cfg: TrainConfig, seed: int,
          val_samples=None, epochs: int | None = None, on_epoch=None) -> TrainResult:
    """Mini-batch Adam on the BPR objective with early stopping on validation NDCG@k."""
    cfg = model.config
    train_samples = [s for s in domain.samples if s.split == TRAIN]
    if not train_samples:
        raise ValueError("training split is empty")
    val_samples = [s for s in domain.samples if s.split == VALIDATION] \
        if val_samples is None else list(val_samples)
    epochs = train_cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng([seed, 7])
    opt = nk.AdamState(lr=cfg.lr)
    named = model.params.named()
    best = (-np.inf, 0, model.params.copy())
    curve, val_hist, since_best = [], [], 0
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_samples))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_samples[j] for j in order[i:i + cfg.batch_size]]
            owners, pos, neg = sample_negatives(domain, batch, rng)
            if len(pos) == 0:
                continue
            loss, parts = model.loss(domain, batch, pos, neg, owners)
            if not np.isfinite(parts["total"]):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}: {parts}")
            model.params.zero_grad()
            nk.backward(loss)
            try:
                opt.step(named)
            except nk.NonFiniteGradient as exc:
                raise DivergenceError(
                    f"non-finite gradient for {exc} at epoch {epoch}, batch {i // cfg.batch_size}"
                ) from exc
            model.steps += 1
            total += parts["total"]
        curve.append((epoch, total))
        if val_samples:
            _, _, ndcg = evaluate(model, domain, val_samples, train_cfg.k, train_cfg.num_neg_eval)
        else:
            ndcg = -total
        val_hist.append(ndcg)
        log.info("epoch %d loss %.6f val_ndcg %.6f", epoch, total, ndcg)
        if on_epoch is not None:
            on_epoch(epoch, total, ndcg)
        if ndcg > best[0]:
            best = (ndcg, epoch, model.params.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_cfg.patience:
                break
    model.params = best[2]
    return TrainResult(best[2], curve, val_hist, best[1], model.steps,
                       time.perf_counter() - start)


def write_loss_curve(path, curve, header: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header.splitlines():
            fh.write(f"# {line}\n")
        for epoch, loss in curve:
            fh.write(f"{epoch} {loss:.10f}\n")


# -- protocols -----------------------------------------------------------------

def _report(setting, model, domain, samples, train_cfg, seed, config) -> RankingReport:
    P, R, G = evaluate(model, domain, samples, train_cfg.k, train_cfg.num_neg_eval)
    return RankingReport(setting, train_cfg.k, P, R, G, len(samples), seed, dict(config or {}))


def eval_csr(model: RetaGNN, domain: Domain, train_cfg: TrainConfig, seed: int,
             config=None, split: str = TEST) -> RankingReport:
    samples = [s for s in domain.samples if s.split == split]
    return _report(CSR, model, domain, samples, train_cfg, seed, config)


def eval_isr(model: RetaGNN, domain: Domain, test_samples, train_cfg: TrainConfig, seed: int,
             config=None) -> RankingReport:
    """Score held-out users; their history only enters through subgraph injection."""
    train_users = {s.user for s in domain.samples if s.split == TRAIN}
    overlap = train_users & {s.user for s in test_samples}
    if overlap:
        raise ProtocolError(f"ISR test users overlap training users: {sorted(overlap)[:5]}")
    before = model.steps
    report = _report(ISR, model, domain, list(test_samples), train_cfg, seed, config)
    if model.steps != before:
        raise ProtocolError("parameters changed during inductive evaluation")
    return report


def eval_tsr(params: ParamSet, source_config: ModelConfig, catalog: Catalog, samples,
             train_cfg: TrainConfig, seed: int, config=None, fine_tune_epochs: int = 0,
             reinit_embed_ffn: bool = False) -> tuple[RankingReport, RetaGNN, Domain]:
    """Apply transferred parameters to a target domain with fresh base vectors.

    Attributes are off in the target graphs. With ``fine_tune_epochs > 0`` the
    model takes that many epochs on the target's train split first.
    """
    cfg = dataclasses.replace(source_config, use_attributes=False)
    target_params = params.copy()
    if reinit_embed_ffn:
        target_params.embed = ParamSet.init(cfg, seed + 1).embed
    model = RetaGNN(cfg, seed, target_params)
    domain = Domain(catalog, samples, cfg, primitive_seed=seed + 1_000_003)
    if fine_tune_epochs > 0:
        train(model, domain, train_cfg, seed, epochs=fine_tune_epochs)
    test = [s for s in samples if s.split == TEST]
    return _report(TSR, model, domain, test, train_cfg, seed, config), model, domain
