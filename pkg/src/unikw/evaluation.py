"""Retrieval evaluation: good-keyword density and standard ranked metrics.

Good-keyword density Q@s is the average number of retrieved keywords per
query whose quality score strictly exceeds the threshold s.  The quality
scorer is pluggable — any deterministic total function of (query text,
keyword text) into [0, 1] — because learned judgment models are
deployment-specific; a token-overlap scorer ships as the default
synthetic stand-in.

Ranked metrics follow the usual conventions:

    P@k    hits in the top k, over k
    R@k    hits in the top k, over |labels|
    nDCG@k binary gains with log2(rank+1) discounts, ideal-normalized
    PSP@k  propensity-scored precision: each hit counts 1/p_l, the sum
           normalized per query by the best achievable top-k value
    PSN@k  as PSP@k but with DCG discounts on both sides

Queries with no labels are excluded from R@k / nDCG@k / PSP@k / PSN@k
averages (their count is reported by ``compute_metrics``); P@k keeps them
since its denominator does not involve labels.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable

from .errors import ValidationError
from .retriever import RetrievalResult


@dataclass(frozen=True)
class Scorer:
    """Quality-judgment contract: deterministic, total, range [0, 1]."""

    fn: Callable[[str, str], float]
    match_type: str  # "exact" | "phrase"

    def __call__(self, query: str, keyword: str) -> float:
        return self.fn(query, keyword)


def _jaccard_tokens(query: str, keyword: str) -> float:
    a, b = set(query.lower().split()), set(keyword.lower().split())
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


def _containment_tokens(query: str, keyword: str) -> float:
    a, b = set(query.lower().split()), set(keyword.lower().split())
    if not b:
        return 0.0
    return len(a & b) / len(b)


def token_overlap_scorer(match_type: str = "exact") -> Scorer:
    """Synthetic scorer: token Jaccard for exact, containment for phrase."""
    if match_type == "exact":
        return Scorer(fn=_jaccard_tokens, match_type="exact")
    if match_type == "phrase":
        return Scorer(fn=_containment_tokens, match_type="phrase")
    raise ValidationError(f"unknown match type: {match_type!r}")


@dataclass(frozen=True)
class LabeledSet:
    """Per-query relevant ids, with optional per-keyword propensities."""

    labels: dict[str, set[int]]
    propensities: dict[int, float] | None = None

    def relevant(self, query: str) -> set[int]:
        return self.labels.get(query, set())


def good_keyword_density(retrievals, scorer: Scorer, threshold: float) -> float:
    """Q@s over ``retrievals``: iterable of (query text, [keyword texts]).

    Counts every retrieved pair scoring strictly above the threshold and
    divides by the number of queries; a density, not a rate, so values
    above 1 are normal.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must lie in [0, 1]")
    retrievals = list(retrievals)
    if not retrievals:
        raise ValidationError("no queries to evaluate")
    good = sum(
        1
        for query, keywords in retrievals
        for keyword in keywords
        if scorer(query, keyword) > threshold
    )
    return good / len(retrievals)


def _check_k(k: int) -> None:
    if k < 1:
        raise ValidationError("k must be >= 1")


def precision_at_k(ranked_ids_per_query, labels: LabeledSet, k: int) -> float:
    """Mean over all queries of |top-k ∩ relevant| / k."""
    _check_k(k)
    values = []
    for query, ranked in ranked_ids_per_query:
        relevant = labels.relevant(query)
        hits = sum(1 for kid in ranked[:k] if kid in relevant)
        values.append(hits / k)
    if not values:
        raise ValidationError("no queries to evaluate")
    return sum(values) / len(values)


def recall_at_k(ranked_ids_per_query, labels: LabeledSet, k: int) -> float:
    """Mean over labeled queries of |top-k ∩ relevant| / |relevant|."""
    _check_k(k)
    values = []
    for query, ranked in ranked_ids_per_query:
        relevant = labels.relevant(query)
        if not relevant:
            continue
        hits = sum(1 for kid in ranked[:k] if kid in relevant)
        values.append(hits / len(relevant))
    if not values:
        raise ValidationError("no labeled queries to evaluate")
    return sum(values) / len(values)


def ndcg_at_k(ranked_ids_per_query, labels: LabeledSet, k: int) -> float:
    """Binary-gain nDCG with log2(rank+1) discounts, per-query normalized."""
    _check_k(k)
    values = []
    for query, ranked in ranked_ids_per_query:
        relevant = labels.relevant(query)
        if not relevant:
            continue
        dcg = sum(
            1.0 / math.log2(rank + 2)
            for rank, kid in enumerate(ranked[:k])
            if kid in relevant
        )
        ideal = sum(1.0 / math.log2(rank + 2) for rank in range(min(k, len(relevant))))
        values.append(dcg / ideal)
    if not values:
        raise ValidationError("no labeled queries to evaluate")
    return sum(values) / len(values)


def _inverse_propensity(labels: LabeledSet, keyword_id: int) -> float:
    if labels.propensities is None:
        raise ValidationError("propensities are required for propensity-scored metrics")
    p = labels.propensities.get(keyword_id)
    if p is None:
        raise ValidationError(f"missing propensity for keyword id {keyword_id}")
    if not 0.0 < p <= 1.0:
        raise ValidationError(f"propensity for keyword id {keyword_id} must be in (0, 1]")
    return 1.0 / p


def _ps_at_k(ranked_ids_per_query, labels: LabeledSet, k: int, discounted: bool) -> float:
    _check_k(k)
    values = []
    for query, ranked in ranked_ids_per_query:
        relevant = labels.relevant(query)
        if not relevant:
            continue
        gain = 0.0
        for rank, kid in enumerate(ranked[:k]):
            if kid in relevant:
                g = _inverse_propensity(labels, kid)
                gain += g / math.log2(rank + 2) if discounted else g
        ideal_gains = sorted((_inverse_propensity(labels, kid) for kid in relevant), reverse=True)
        ideal = 0.0
        for rank, g in enumerate(ideal_gains[:k]):
            ideal += g / math.log2(rank + 2) if discounted else g
        values.append(gain / ideal)
    if not values:
        raise ValidationError("no labeled queries to evaluate")
    return sum(values) / len(values)


def psp_at_k(ranked_ids_per_query, labels: LabeledSet, k: int) -> float:
    """Propensity-scored precision, normalized by the per-query ideal at k."""
    return _ps_at_k(ranked_ids_per_query, labels, k, discounted=False)


def psn_at_k(ranked_ids_per_query, labels: LabeledSet, k: int) -> float:
    """Propensity-scored nDCG, normalized by the per-query ideal at k."""
    return _ps_at_k(ranked_ids_per_query, labels, k, discounted=True)


def length_distribution(results) -> dict[str, dict[int, int]]:
    """Histogram of keyword token lengths per source channel."""
    hist: dict[str, Counter] = {}
    for result in results:
        if not isinstance(result, RetrievalResult):
            raise ValidationError("length_distribution expects RetrievalResult items")
        length = len(result.text.split())
        hist.setdefault(result.source, Counter())[length] += 1
    return {channel: dict(sorted(counter.items())) for channel, counter in hist.items()}


def compute_metrics(
    ranked_ids_per_query,
    labels: LabeledSet,
    ks,
    retrieved_texts=None,
    scorer: Scorer | None = None,
    thresholds=(),
) -> dict:
    """One-call aggregate used by the command line.

    ``ranked_ids_per_query`` is a list of (query, ranked ids); metrics are
    emitted for every k in ``ks``; Q@s values additionally require
    ``retrieved_texts`` (query, keyword texts) and a scorer.
    """
    ranked = list(ranked_ids_per_query)
    metrics: dict = {}
    unlabeled = sum(1 for query, _ in ranked if not labels.relevant(query))
    for k in ks:
        metrics[f"P@{k}"] = precision_at_k(ranked, labels, k)
        metrics[f"R@{k}"] = recall_at_k(ranked, labels, k)
        metrics[f"nDCG@{k}"] = ndcg_at_k(ranked, labels, k)
        if labels.propensities is not None:
            metrics[f"PSP@{k}"] = psp_at_k(ranked, labels, k)
            metrics[f"PSN@{k}"] = psn_at_k(ranked, labels, k)
    if scorer is not None and retrieved_texts is not None:
        for threshold in thresholds:
            metrics[f"Q@{threshold:g}"] = good_keyword_density(
                retrieved_texts, scorer, threshold
            )
    metrics["queries"] = len(ranked)
    metrics["queries_without_labels"] = unlabeled
    return metrics


def load_labels(path, propensity_path=None) -> LabeledSet:
    """Labels TSV ``query<TAB>id[,id...]``; propensities TSV ``id<TAB>p``."""
    labels: dict[str, set[int]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"labels line {line_no}: expected 2 columns")
            ids = {int(x) for x in parts[1].split(",") if x}
            labels.setdefault(parts[0], set()).update(ids)
    propensities = None
    if propensity_path is not None:
        propensities = {}
        with open(propensity_path, encoding="utf-8") as f:
            for line_no, line in enumerate(f):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValidationError(f"propensity line {line_no}: expected 2 columns")
                propensities[int(parts[0])] = float(parts[1])
    return LabeledSet(labels=labels, propensities=propensities)
