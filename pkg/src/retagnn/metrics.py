"""Top-k ranking metrics with binary relevance."""
from __future__ import annotations

import math

import numpy as np


def precision_at_k(ranked, relevant, k: int = 10) -> float:
    relevant = set(relevant)
    return sum(1 for v in list(ranked)[:k] if v in relevant) / k


def recall_at_k(ranked, relevant, k: int = 10) -> float:
    relevant = set(relevant)
    if not relevant:
        return 0.0
    return sum(1 for v in list(ranked)[:k] if v in relevant) / len(relevant)


def ndcg_at_k(ranked, relevant, k: int = 10) -> float:
    """DCG over the top ``k`` divided by the ideal DCG over ``min(|relevant|, k)`` slots."""
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(i + 2) for i, v in enumerate(list(ranked)[:k]) if v in relevant)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(len(relevant), k)))
    return dcg / idcg


def rank_items(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates by descending score; ties go to the lower item index."""
    candidates = np.asarray(candidates)
    s = np.asarray(scores)[candidates]
    order = np.lexsort((candidates, -s))
    return candidates[order]


def expected_random_ndcg(num_candidates: int, num_relevant: int, k: int = 10) -> float:
    """Expected NDCG@k of a uniformly random ordering of the candidates."""
    if num_relevant == 0 or num_candidates == 0:
        return 0.0
    p_hit = num_relevant / num_candidates
    top = min(k, num_candidates)
    dcg = sum(p_hit / math.log2(i + 2) for i in range(top))
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(num_relevant, k)))
    return dcg / idcg
