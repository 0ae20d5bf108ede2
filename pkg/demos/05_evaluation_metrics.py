"""Evaluation harness: good-keyword density and ranked metrics.

Q@s counts retrieved keywords whose quality score strictly exceeds a
threshold, averaged over queries; it is a density, so values above 1 are
normal.  The scorer is pluggable; the shipped token-overlap scorer
stands in for a learned judgment model.
"""

from unikw import (
    LabeledSet,
    RetrievalResult,
    good_keyword_density,
    length_distribution,
    ndcg_at_k,
    precision_at_k,
    psn_at_k,
    psp_at_k,
    recall_at_k,
    token_overlap_scorer,
)

retrieved = [
    ("currys 912 black", ["hp 912 ink black", "currys ink", "black kettle"]),
    ("student houses nottingham", ["student flats nottingham", "nottingham lettings"]),
]
scorer = token_overlap_scorer("exact")
print("good keyword density (token-overlap scorer):")
for s in (0.1, 0.3, 0.5, 0.7):
    print(f"  Q@{s} = {good_keyword_density(retrieved, scorer, s):.2f}")

ranked = [("q1", [0, 9, 1, 8, 7]), ("q2", [5, 3])]
labels = LabeledSet(
    labels={"q1": {0, 1, 2}, "q2": {3}},
    propensities={0: 0.5, 1: 0.25, 2: 1.0, 3: 0.2},
)
print("\nranked metrics on a two-query fixture:")
for name, fn in [
    ("P@5", precision_at_k), ("R@5", recall_at_k), ("nDCG@5", ndcg_at_k),
    ("PSP@5", psp_at_k), ("PSN@5", psn_at_k),
]:
    print(f"  {name:7s} = {fn(ranked, labels, 5):.4f}")

results = [
    RetrievalResult(0, "hp 912 ink black", nlg_score=-1.2, dr_score=None, source="NLG"),
    RetrievalResult(1, "currys ink", nlg_score=-2.0, dr_score=0.81, source="BOTH"),
    RetrievalResult(2, "black kettle", nlg_score=None, dr_score=0.66, source="DR"),
    RetrievalResult(3, "student flats nottingham", nlg_score=None, dr_score=0.74, source="DR"),
]
print("\nkeyword token-length histogram per channel:")
for channel, hist in length_distribution(results).items():
    print(f"  {channel}: {hist}")
