"""Command-line surface. One subcommand per pipeline stage.

Conventions shared by every command:

  * global flags ``--seed``, ``--threads`` and ``--config`` (a JSON file
    whose keys override built-in defaults; explicit flags win over both);
  * deterministic outputs under a fixed seed;
  * a metadata block (tool version, seed, effective config and its hash)
    embedded in JSON outputs and written to ``<out>.meta.json`` next to
    JSONL outputs;
  * exit codes: 0 ok, 2 validation, 3 I/O, 4 internal consistency, with a
    machine-readable error JSON on stderr.

Bundle directories use fixed file names: ``vocab.txt``, ``keywords.txt``,
``encoder.kenc``, ``trie.fwd.ktri``, ``trie.rev.ktri``,
``embeddings.kemb`` and, for graph indexes, ``graph.kgra`` (plus
``reps.tsv`` when keyword clustering was applied).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import build_vocab, load_keywords, load_pairs, load_vocab, save_vocab, tokenize
from .decoder import NEG_INF, DecodeConfig, permutation_decode
from .dense_index import (
    build_exact,
    build_graph,
    cluster_keywords,
    load_embeddings,
    load_graph,
    save_embeddings,
    save_graph,
)
from .encoder import TrainConfig, embed_batch, encode, load_params, save_params, train
from .errors import ConsistencyError, ValidationError
from .evaluation import compute_metrics, load_labels, token_overlap_scorer
from .retriever import EngineBundle, overlap_stats, results_to_jsonl_line, retrieve
from .trie import FORWARD, REVERSED, build_trie, deserialize, memory_stats, serialize

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_CONSISTENCY = 4


def _meta(args: argparse.Namespace, command: str) -> dict:
    settings = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in ("handler", "config") and not k.startswith("_")
    }
    canonical = json.dumps(settings, sort_keys=True, default=str)
    return {
        "tool": "unikw",
        "version": __version__,
        "command": command,
        "seed": getattr(args, "seed", 0),
        "threads": getattr(args, "threads", 1),
        "config": settings,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest()[:16],
    }


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, ensure_ascii=False)
        f.write("\n")


def _write_sidecar_meta(out_path, meta: dict) -> None:
    _write_json(str(out_path) + ".meta.json", meta)


def _read_queries(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def _read_results_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


# ---------------------------------------------------------------- commands


def cmd_build_vocab(args) -> int:
    vocab = build_vocab(args.keywords, args.pairs, args.min_count)
    save_vocab(vocab, args.out)
    _write_sidecar_meta(args.out, _meta(args, "build-vocab"))
    print(f"wrote {len(vocab)} token vocab (incl. 3 reserved) to {args.out}")
    return EXIT_OK


def cmd_build_trie(args) -> int:
    vocab = load_vocab(args.vocab)
    keywords = load_keywords(args.keywords)
    direction = FORWARD if args.direction == "fwd" else REVERSED
    entries = [
        (tokenize(text, vocab, "keyword", args.max_len), kid)
        for kid, text in enumerate(keywords)
    ]
    trie = build_trie(entries, direction, vocab.checksum())
    serialize(trie, args.out)
    stats = memory_stats(trie)
    _write_json(str(args.out) + ".stats.json", {"meta": _meta(args, "build-trie"), "stats": stats})
    print(f"wrote {direction} trie: {stats['nodes']} nodes, {stats['serialized_bytes']} bytes")
    return EXIT_OK


def cmd_train(args) -> int:
    vocab = load_vocab(args.vocab)
    if args.config_file:
        config = TrainConfig.from_file(args.config_file)
    else:
        config = TrainConfig(seed=args.seed)
    pairs, malformed = load_pairs(args.pairs, vocab, max_len=config.max_len)
    result = train(config, pairs, vocab)
    save_params(result.params, args.out)
    meta = _meta(args, "train")
    meta["train_config"] = json.loads(config.to_json())
    meta["epoch_losses"] = result.epoch_losses
    meta["malformed_pairs"] = malformed
    _write_sidecar_meta(args.out, meta)
    print(
        f"trained {config.epochs} epochs on {len(pairs)} pairs; "
        f"loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f}"
    )
    return EXIT_OK


def cmd_index(args) -> int:
    params = load_params(args.checkpoint)
    vocab = load_vocab(args.vocab)
    keywords = load_keywords(args.keywords)
    seqs = [tokenize(text, vocab, "keyword", params.max_len) for text in keywords]
    vectors = embed_batch(params, seqs)
    ids = np.arange(len(keywords), dtype=np.int64)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep_note = ""
    if args.cluster_threshold is not None:
        mapping = cluster_keywords(vectors, ids, args.cluster_threshold)
        with open(out_dir / "reps.tsv", "w", encoding="utf-8") as f:
            for kid in sorted(mapping):
                f.write(f"{kid}\t{mapping[kid]}\n")
        reps = np.array(sorted({r for r in mapping.values()}), dtype=np.int64)
        vectors, ids = vectors[reps], reps
        rep_note = f" ({len(reps)} representatives of {len(keywords)})"

    save_embeddings(out_dir / "embeddings.kemb", vectors, ids)
    if args.kind == "graph":
        index = build_graph(
            vectors, ids,
            max_degree=args.max_degree, build_width=args.build_width,
            prune_slack=args.prune_slack, seed=args.seed,
        )
        save_graph(out_dir / "graph.kgra", index)
    _write_json(out_dir / "index.meta.json", {"meta": _meta(args, "index"), "count": len(ids)})
    print(f"indexed {len(ids)} keywords{rep_note} ({args.kind}) into {out_dir}")
    return EXIT_OK


def load_bundle(
    bundle_dir,
    beam_size: int = 100,
    orders: tuple[str, ...] = ("l2r", "r2l"),
    prune_threshold: float = NEG_INF,
    dense_k: int = 100,
    search_width: int = 100,
) -> EngineBundle:
    """Assemble and validate an EngineBundle from a bundle directory."""
    d = Path(bundle_dir)
    vocab = load_vocab(d / "vocab.txt")
    catalog = tuple(load_keywords(d / "keywords.txt"))
    params = load_params(d / "encoder.kenc")
    fwd = deserialize(d / "trie.fwd.ktri")
    rev = deserialize(d / "trie.rev.ktri")
    vectors, ids = load_embeddings(d / "embeddings.kemb")
    graph_path = d / "graph.kgra"
    if graph_path.exists():
        index = load_graph(graph_path, vectors, ids)
    else:
        index = build_exact(vectors, ids)
    bundle = EngineBundle(
        params=params,
        vocab=vocab,
        catalog=catalog,
        forward_trie=fwd,
        reversed_trie=rev,
        index=index,
        decode=DecodeConfig(beam_size=beam_size, prune_threshold=prune_threshold, orders=orders),
        dense_k=dense_k,
        search_width=search_width,
    )
    bundle.validate()
    return bundle


def _parse_orders(text: str) -> tuple[str, ...]:
    orders = tuple(o.strip() for o in text.split(",") if o.strip())
    if not orders:
        raise ValidationError("no decoding orders given")
    return orders


def cmd_retrieve(args) -> int:
    bundle = load_bundle(
        args.bundle_dir,
        beam_size=args.beam,
        orders=_parse_orders(args.orders),
        prune_threshold=args.prune,
        dense_k=args.topk,
    )
    queries = _read_queries(args.queries)
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        all_results = list(pool.map(lambda q: retrieve(bundle, q), queries))
    with open(args.out, "w", encoding="utf-8") as f:
        for query, results in zip(queries, all_results):
            f.write(results_to_jsonl_line(query, results) + "\n")
    _write_sidecar_meta(args.out, _meta(args, "retrieve"))
    print(f"retrieved for {len(queries)} queries -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = _read_results_jsonl(args.results)
    ranked = [(row["query"], [r["id"] for r in row["results"]]) for row in rows]
    texts = [(row["query"], [r["keyword"] for r in row["results"]]) for row in rows]
    labels = load_labels(args.labels, args.propensities)
    ks = [int(x) for x in args.ks.split(",") if x]
    thresholds = [float(x) for x in args.thresholds.split(",") if x]
    scorer = token_overlap_scorer(args.scorer_match) if args.scorer == "overlap" else None
    metrics = compute_metrics(
        ranked, labels, ks, retrieved_texts=texts, scorer=scorer, thresholds=thresholds
    )
    _write_json(args.out, {"meta": _meta(args, "eval"), "metrics": metrics})
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    queries = _read_queries(args.queries)
    beams = [int(b) for b in args.beams.split(",") if b]
    orders = _parse_orders(args.orders)
    report = {"meta": _meta(args, "bench"), "queries": len(queries), "beams": []}

    base = load_bundle(args.bundle_dir)
    encoded = [
        encode(base.params, tokenize(q, base.vocab, "query", base.params.max_len))
        for q in queries
    ]
    for beam in beams:
        bundle = load_bundle(args.bundle_dir, beam_size=beam, orders=orders)
        end_to_end: list[float] = []
        decode_only: list[float] = []
        forwards_before = bundle.params.forward_counter.count
        for _ in range(args.repeat):
            for query in queries:
                t0 = time.perf_counter()
                retrieve(bundle, query)
                end_to_end.append((time.perf_counter() - t0) * 1e3)
            for out in encoded:
                t0 = time.perf_counter()
                permutation_decode(
                    out.nar_logprobs, bundle.forward_trie, bundle.reversed_trie, bundle.decode
                )
                decode_only.append((time.perf_counter() - t0) * 1e3)
        forwards = bundle.params.forward_counter.count - forwards_before
        per_query = forwards / (len(queries) * args.repeat)

        def stats(xs: list[float]) -> dict:
            arr = np.array(xs)
            return {
                "mean_ms": float(arr.mean()),
                "p50_ms": float(np.percentile(arr, 50)),
                "p90_ms": float(np.percentile(arr, 90)),
                "p99_ms": float(np.percentile(arr, 99)),
            }

        report["beams"].append(
            {
                "beam": beam,
                "forward_passes_per_query": per_query,
                "end_to_end": stats(end_to_end),
                "decode": stats(decode_only),
            }
        )
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report["beams"], indent=2))
    return EXIT_OK


def cmd_overlap(args) -> int:
    def pair_set(path):
        return {
            (row["query"], r["id"])
            for row in _read_results_jsonl(path)
            for r in row["results"]
        }

    stats = overlap_stats(pair_set(args.results_a), pair_set(args.results_b))
    payload = {"meta": _meta(args, "overlap"), "overlap": stats}
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unikw",
        description="Unified keyword retrieval: trie-decoded generative + dense channels",
    )
    parser.add_argument("--version", action="version", version=f"unikw {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--config", default=None, help="JSON file overriding flag defaults")

    p = sub.add_parser("build-vocab", help="build a vocabulary file")
    common(p)
    p.add_argument("--keywords", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_vocab)

    p = sub.add_parser("build-trie", help="build a keyword trie file")
    common(p)
    p.add_argument("--keywords", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--direction", choices=("fwd", "rev"), default="fwd")
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_trie)

    p = sub.add_parser("train", help="train the two-headed encoder")
    common(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config-file", default=None, help="TrainConfig JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("index", help="embed the catalog and build an index")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--keywords", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--kind", choices=("exact", "graph"), default="graph")
    p.add_argument("--cluster-threshold", type=float, default=None)
    p.add_argument("--max-degree", type=int, default=32)
    p.add_argument("--build-width", type=int, default=64)
    p.add_argument("--prune-slack", type=float, default=1.2)
    p.add_argument("--out", required=True, help="bundle directory")
    p.set_defaults(handler=cmd_index)

    p = sub.add_parser("retrieve", help="run unified retrieval over queries")
    common(p)
    p.add_argument("--bundle-dir", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--beam", type=int, default=100)
    p.add_argument("--orders", default="l2r,r2l")
    p.add_argument("--prune", type=float, default=NEG_INF)
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_retrieve)

    p = sub.add_parser("eval", help="score a results file against labels")
    common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--propensities", default=None)
    p.add_argument("--scorer", choices=("overlap", "none"), default="none")
    p.add_argument("--scorer-match", choices=("exact", "phrase"), default="exact")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--thresholds", default="0.5,0.7")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="latency / forward-pass report across beams")
    common(p)
    p.add_argument("--bundle-dir", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--beams", default="10,50,100")
    p.add_argument("--orders", default="l2r,r2l")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("overlap", help="overlap stats between two result files")
    common(p)
    p.add_argument("--results-a", required=True)
    p.add_argument("--results-b", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_overlap)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Let a --config JSON override subcommand defaults (flags still win)."""
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    with open(path, encoding="utf-8") as f:
        overrides = json.load(f)
    if not isinstance(overrides, dict):
        raise ValidationError("--config must contain a JSON object")
    # Defaults apply to every subparser that knows the key; unknown keys fail.
    subparsers = [
        sp
        for action in parser._subparsers._group_actions  # noqa: SLF001
        for sp in action.choices.values()
    ]
    known = {a.dest for sp in subparsers for a in sp._actions}  # noqa: SLF001
    unknown = set(overrides) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for sp in subparsers:
        dests = {a.dest for a in sp._actions}  # noqa: SLF001
        sp.set_defaults(**{k: v for k, v in overrides.items() if k in dests})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.handler(args)
    except (ValidationError, ValueError) as exc:  # malformed inputs included
        _emit_error(EXIT_VALIDATION, "validation", exc)
        return EXIT_VALIDATION
    except ConsistencyError as exc:
        _emit_error(EXIT_CONSISTENCY, "consistency", exc)
        return EXIT_CONSISTENCY
    except OSError as exc:
        _emit_error(EXIT_IO, "io", exc)
        return EXIT_IO


def _emit_error(code: int, kind: str, exc: Exception) -> None:
    print(json.dumps({"error": {"code": code, "kind": kind, "message": str(exc)}}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
