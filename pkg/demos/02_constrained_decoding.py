"""Trie-constrained beam search over a per-position probability table.

The decoder treats the trie as a hard mask: a token is only scorable if
it extends a valid catalog prefix, so every completed hypothesis is a
real keyword.  Running the search in two orders (left-to-right over the
forward trie, right-to-left over the length-partitioned reversed trie)
and ranking the union by cumulative log-probability recovers keywords a
single greedy order would miss; the score itself is order-invariant.
"""

import math

import numpy as np

from unikw import (
    DecodeConfig,
    FORWARD,
    REVERSED,
    build_trie,
    beam_search,
    constrained_logprob,
    permutation_decode,
)

EOW, A, B, C, D = 2, 3, 4, 5, 6
NAMES = {A: "alpha", B: "beta", C: "cyan", D: "delta", EOW: "</kw>"}

catalog = {0: (A, C, EOW), 1: (B, D, EOW)}
entries = [(tokens, kid) for kid, tokens in catalog.items()]
fwd = build_trie(entries, FORWARD)
rev = build_trie(entries, REVERSED)

# One row of log-probabilities per output position (vocabulary of 7 ids).
rows = [
    {A: 0.60, B: 0.35, C: 0.025, D: 0.02, EOW: 0.005},   # position 1
    {D: 0.85, C: 0.10, A: 0.02, B: 0.02, EOW: 0.01},     # position 2
    {EOW: 0.95, A: 0.02, B: 0.01, C: 0.01, D: 0.01},     # position 3
]
table = np.full((3, 7), -1e9)
for t, row in enumerate(rows):
    for token, p in row.items():
        table[t, token] = math.log(p)

print("masking: only trie children are scorable")
print("  p(alpha | '') =", math.exp(constrained_logprob(table, fwd, (), A)))
print("  p(delta | '') =", constrained_logprob(table, fwd, (), D), "(not a child)")

print("\ngreedy left-to-right (beam 1) commits to the strong first token:")
for kid, score in beam_search(table, fwd, DecodeConfig(beam_size=1, orders=("l2r",))):
    words = " ".join(NAMES[t] for t in catalog[kid][:-1])
    print(f"  keyword {kid} ({words}): logprob {score:.4f}")

print("\npermutation decoding (union of l2r and r2l) finds the better keyword")
print("hiding behind a weak first token:")
for kid, score in permutation_decode(table, fwd, rev, DecodeConfig(beam_size=2)):
    words = " ".join(NAMES[t] for t in catalog[kid][:-1])
    print(f"  keyword {kid} ({words}): logprob {score:.4f}")

print("\nearly pruning drops any hypothesis whose single-token probability")
print("falls below the threshold (here 0.3):")
config = DecodeConfig(beam_size=4, prune_threshold=math.log(0.3), orders=("l2r",))
print("  survivors:", beam_search(table, fwd, config))
