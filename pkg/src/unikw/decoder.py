"""Trie-constrained beam search over a per-position log-probability table.

The generative head emits all position distributions in one pass (an M x V
table of log-probabilities).  Decoding walks the keyword trie: at each
step only the children of the current prefix are legal, every other token
has probability zero.  A completed path is therefore always a catalog
keyword, and its score is the plain sum of the consumed positions'
log-probabilities.

Orders.  Summation commutes, so the same keyword scores identically no
matter the order its positions are consumed in.  Left-to-right decoding
uses the forward trie and consumes row t at depth t.  Right-to-left
decoding uses the reversed trie: a hypothesis inside the length-m
partition at scored depth j consumes row m-1-j (0-based), i.e. the same
absolute positions in the opposite order.  Running both orders and
ranking the union by score surfaces keywords whose best tokens sit at
different ends.

Pruning.  A finite ``prune_threshold`` drops any expansion whose single
token log-probability falls below it, shrinking the beam early without
changing surviving scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .corpus import TokenSeq
from .errors import ConsistencyError, ValidationError
from .trie import FORWARD, REVERSED, KeywordTrie, length_partitions, step, terminal_id, walk

NEG_INF = float("-inf")

LEFT_TO_RIGHT = "l2r"
RIGHT_TO_LEFT = "r2l"

_ORDER_DIRECTION = {LEFT_TO_RIGHT: FORWARD, RIGHT_TO_LEFT: REVERSED}

#: Two orders finding the same keyword must agree on its score within this.
SCORE_AGREEMENT_TOL = 1e-9


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 100
    prune_threshold: float = NEG_INF
    orders: tuple[str, ...] = (LEFT_TO_RIGHT, RIGHT_TO_LEFT)

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValidationError("beam_size must be >= 1")
        if not self.orders:
            raise ValidationError("at least one decoding order is required")
        for order in self.orders:
            if order not in _ORDER_DIRECTION:
                raise ValidationError(f"unknown decoding order: {order!r}")


@dataclass
class Hypothesis:
    """A partial (or just-completed) path through the trie."""

    prefix: tuple[int, ...]
    node: int
    score: float
    min_logprob: float = math.inf
    target_len: int = 0  # reversed order only: keyword length of the partition


def constrained_logprob(
    prob_table: np.ndarray, trie: KeywordTrie, prefix: TokenSeq, token: int
) -> float:
    """Log-probability of ``token`` after ``prefix`` under the trie mask.

    Returns the raw table entry when the token is a child of the prefix's
    node, and -inf otherwise (the masked, unnormalized next-token
    distribution of trie-guided decoding).
    """
    if trie.direction != FORWARD:
        raise ValidationError("constrained_logprob expects a forward trie")
    max_len = prob_table.shape[0]
    if len(prefix) >= max_len:
        raise ValidationError(
            f"prefix length {len(prefix)} leaves no table row (max {max_len})"
        )
    node = walk(trie, prefix)
    if node is None:
        raise ValidationError("prefix is not a valid path in the trie")
    if step(trie, node, token) is None:
        return NEG_INF
    return float(prob_table[len(prefix), token])


def _initial_hypotheses(trie: KeywordTrie, max_len: int) -> list[Hypothesis]:
    if trie.direction == FORWARD:
        return [Hypothesis(prefix=(), node=0, score=0.0)]
    # Partition selection is structural, not scored: one starting hypothesis
    # per keyword length that fits the table.
    hyps = []
    for length, node in length_partitions(trie):
        if length <= max_len:
            hyps.append(Hypothesis(prefix=(), node=node, score=0.0, target_len=length))
    return hyps


def _row_for(hyp: Hypothesis, direction: str) -> int:
    depth = len(hyp.prefix)
    if direction == FORWARD:
        return depth
    return hyp.target_len - 1 - depth


def beam_search(
    prob_table: np.ndarray, trie: KeywordTrie, config: DecodeConfig
) -> list[tuple[int, float]]:
    """Single-order beam search; up to ``beam_size`` completed keywords.

    Completed hypotheses leave the active beam immediately and are
    collected on the side, so the beam always holds the best incomplete
    prefixes.  Results are sorted by cumulative log-probability, ties
    broken by smaller keyword id.  Scores carry no length normalization:
    the EOW position already prices sequence length.
    """
    if len(config.orders) != 1:
        raise ValidationError("beam_search takes a config with exactly one order")
    order = config.orders[0]
    if _ORDER_DIRECTION[order] != trie.direction:
        raise ValidationError(
            f"order {order!r} requires a {_ORDER_DIRECTION[order]} trie, "
            f"got {trie.direction}"
        )
    max_len, vocab_size = prob_table.shape
    threshold = config.prune_threshold

    active = _initial_hypotheses(trie, max_len)
    completed: list[tuple[float, int]] = []
    offsets, labels = trie.offsets, trie.labels

    while active:
        candidates: list[Hypothesis] = []
        for hyp in active:
            row = _row_for(hyp, trie.direction)
            if not 0 <= row < max_len:
                continue
            table_row = prob_table[row]
            start, end = int(offsets[hyp.node]), int(offsets[hyp.node + 1])
            for e in range(start, end):
                label = int(labels[e])
                if label >= vocab_size:
                    continue
                logprob = float(table_row[label])
                if logprob < threshold:
                    continue  # early pruning on the single-token bound
                child = e + 1
                nxt = Hypothesis(
                    prefix=hyp.prefix + (label,),
                    node=child,
                    score=hyp.score + logprob,
                    min_logprob=min(hyp.min_logprob, logprob),
                    target_len=hyp.target_len,
                )
                keyword_id = terminal_id(trie, child)
                if keyword_id is not None:
                    completed.append((nxt.score, keyword_id))
                else:
                    candidates.append(nxt)
        candidates.sort(key=lambda h: (-h.score, h.prefix))
        active = candidates[: config.beam_size]

    completed.sort(key=lambda item: (-item[0], item[1]))
    return [(kid, score) for score, kid in completed[: config.beam_size]]


def permutation_decode(
    prob_table: np.ndarray,
    forward_trie: KeywordTrie,
    reversed_trie: KeywordTrie,
    config: DecodeConfig,
) -> list[tuple[int, float]]:
    """Beam search per configured order, union by keyword id, rank by score.

    A keyword reached by several orders must score identically (the sum of
    the same table entries); any larger disagreement means the two tries
    were not built over the same catalog and raises ConsistencyError.
    """
    tries = {FORWARD: forward_trie, REVERSED: reversed_trie}
    for direction, trie in tries.items():
        if trie is not None and trie.direction != direction:
            raise ValidationError(f"{direction} trie has direction {trie.direction}")

    merged: dict[int, float] = {}
    for order in config.orders:
        trie = tries[_ORDER_DIRECTION[order]]
        if trie is None:
            raise ValidationError(f"order {order!r} requested but its trie is missing")
        for keyword_id, score in beam_search(
            prob_table, trie, replace(config, orders=(order,))
        ):
            if keyword_id in merged:
                if abs(merged[keyword_id] - score) > SCORE_AGREEMENT_TOL:
                    raise ConsistencyError(
                        f"keyword {keyword_id} scored {merged[keyword_id]!r} and "
                        f"{score!r} under different orders"
                    )
            else:
                merged[keyword_id] = score

    ranked = sorted(merged.items(), key=lambda item: (-item[1], item[0]))
    return ranked[: config.beam_size]
