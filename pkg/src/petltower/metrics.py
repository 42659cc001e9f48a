"""Retrieval metrics: Rank-k and non-interpolated mean average precision.

Ranking is by descending similarity with ties broken by stable (ascending)
gallery index, so evaluation is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError


@dataclass
class RetrievalResult:
    r1: float
    r5: float
    r10: float
    map: float
    first_hit_ranks: list[int] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {"r1": self.r1, "r5": self.r5, "r10": self.r10, "map": self.map}


def _relevance(query_ids: np.ndarray, gallery_ids: np.ndarray) -> np.ndarray:
    rel = query_ids[:, None] == gallery_ids[None, :]
    if np.any(~rel.any(axis=1)):
        raise EvaluationError("every query needs at least one relevant gallery item")
    return rel


def _sorted_gallery(s_row: np.ndarray) -> np.ndarray:
    # argsort is stable on the negated scores: ties keep ascending index order
    return np.argsort(-s_row, kind="stable")


def rank_k(s: np.ndarray, query_ids, gallery_ids, k: int) -> float:
    """Fraction of queries with a relevant item in the top-k candidates."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    rel = _relevance(query_ids, gallery_ids)
    hits = 0
    for qi in range(s.shape[0]):
        order = _sorted_gallery(s[qi])
        if rel[qi, order[:k]].any():
            hits += 1
    return hits / s.shape[0]


def mean_ap(s: np.ndarray, query_ids, gallery_ids) -> float:
    """Mean over queries of non-interpolated average precision."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    rel = _relevance(query_ids, gallery_ids)
    aps = []
    for qi in range(s.shape[0]):
        order = _sorted_gallery(s[qi])
        rel_sorted = rel[qi, order]
        hits = np.cumsum(rel_sorted)
        ranks = np.arange(1, len(order) + 1)
        precision_at_hits = hits[rel_sorted] / ranks[rel_sorted]
        aps.append(precision_at_hits.mean())
    return float(np.mean(aps))


def evaluate_retrieval(s: np.ndarray, query_ids, gallery_ids) -> RetrievalResult:
    """Full metric bundle for one similarity matrix."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    rel = _relevance(query_ids, gallery_ids)
    first_hits = []
    for qi in range(s.shape[0]):
        order = _sorted_gallery(s[qi])
        first_hits.append(int(np.argmax(rel[qi, order])) + 1)
    result = RetrievalResult(
        r1=rank_k(s, query_ids, gallery_ids, 1),
        r5=rank_k(s, query_ids, gallery_ids, 5),
        r10=rank_k(s, query_ids, gallery_ids, 10),
        map=mean_ap(s, query_ids, gallery_ids),
        first_hit_ranks=first_hits,
    )
    return result
