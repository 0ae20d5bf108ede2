"""Graph-based approximate nearest neighbor search vs the exact oracle.

Builds the navigable graph (greedy search + robust pruning, reciprocal
edges), measures recall against exhaustive scan at several search
widths, and shows leader clustering collapsing near-duplicate vectors
into representatives.
"""

import time

import numpy as np

from unikw import build_exact, build_graph, cluster_keywords, search

rng = np.random.default_rng(0)
n, dim = 4000, 32
vectors = rng.normal(size=(n, dim))
vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
ids = np.arange(n)

t0 = time.perf_counter()
graph = build_graph(vectors, ids, max_degree=32, build_width=64, prune_slack=1.2, seed=0)
print(f"graph over {n} vectors in {time.perf_counter() - t0:.1f}s, "
      f"mean out-degree {np.diff(graph.offsets).mean():.1f}")

exact = build_exact(vectors, ids)
queries = rng.normal(size=(100, dim))

print("\nrecall@10 and latency vs exhaustive scan:")
for width in (20, 50, 100, 200):
    hits = 0
    t0 = time.perf_counter()
    for q in queries:
        want = {k for k, _ in search(exact, q, 10)}
        got = {k for k, _ in search(graph, q, 10, search_width=width)}
        hits += len(want & got)
    dt = (time.perf_counter() - t0) / len(queries) * 1e3
    print(f"  search_width {width:4d}: recall {hits / (10 * len(queries)):.3f}  {dt:.2f} ms/query")

# Leader clustering: plant 10% near-duplicates, watch the index shrink.
dupes = vectors[:400] + rng.normal(0, 1e-4, (400, dim))
all_vectors = np.vstack([vectors, dupes])
all_ids = np.arange(len(all_vectors))
mapping = cluster_keywords(all_vectors, all_ids, similarity_threshold=0.999)
reps = sorted({r for r in mapping.values()})
print(f"\nleader clustering at 0.999: {len(all_ids)} keywords -> {len(reps)} "
      f"representatives ({1 - len(reps) / len(all_ids):.1%} smaller index)")
sample = 4321
print(f"duplicate id {sample} maps to representative {mapping[sample]}")
