"""Retrieval metrics: mean reciprocal rank and Recall@K."""

from __future__ import annotations

from typing import Mapping, Sequence

DEFAULT_KS = (1, 5, 10)


def ranks_of_truth(rankings: Mapping[str, Sequence[str]], ground_truth: Mapping[str, str]) -> dict[str, int]:
    """1-based rank of the true track per query."""
    out = {}
    for q, truth in ground_truth.items():
        if q not in rankings:
            raise KeyError(f"query {q} has no ranking")
        order = list(rankings[q])
        if truth not in order:
            raise ValueError(f"query {q}: ground-truth track {truth} is not among the candidates")
        out[q] = order.index(truth) + 1
    return out


def mrr_from_ranks(ranks: Sequence[int]) -> float:
    if not ranks:
        raise ValueError("no queries to evaluate")
    return sum(1.0 / r for r in ranks) / len(ranks)


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if not ranks:
        raise ValueError("no queries to evaluate")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def run_evaluate(rankings: Mapping[str, Sequence[str]], ground_truth: Mapping[str, str],
                 ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    ranks = list(ranks_of_truth(rankings, ground_truth).values())
    metrics = {"mrr": mrr_from_ranks(ranks)}
    for k in ks:
        metrics[f"recall@{k}"] = recall_at_k(ranks, k)
    return metrics
