"""Corpus handling and the keyword trie.

Builds a vocabulary from a toy catalog, tokenizes queries and keywords,
constructs forward and reversed tries, and shows the compact binary
serialization round-tripping.
"""

import tempfile
from pathlib import Path

from unikw import (
    FORWARD,
    REVERSED,
    Vocab,
    build_trie,
    children,
    deserialize,
    length_partitions,
    lookup,
    memory_stats,
    serialize,
    tokenize,
)

catalog = [
    "hp ink cartridge",
    "hp ink",
    "hp printer",
    "epson ink cartridge",
    "running shoes",
    "trail running shoes",
]

tokens = sorted({t for text in catalog for t in text.split()})
vocab = Vocab.from_tokens(tokens)
print(f"vocab: {len(vocab)} ids (3 reserved + {len(tokens)} tokens)")

print("\ntokenization (note the EOW sentinel on keywords):")
print("  query  'HP Ink'      ->", tokenize("HP Ink", vocab, "query"))
print("  keyword 'HP Ink'     ->", tokenize("HP Ink", vocab, "keyword"))
print("  keyword '' (empty)   ->", tokenize("", vocab, "keyword"))

entries = [(tokenize(text, vocab, "keyword"), kid) for kid, text in enumerate(catalog)]
fwd = build_trie(entries, FORWARD, vocab.checksum())
print(f"\nforward trie: {fwd.node_count} nodes for "
      f"{sum(len(seq) for seq, _ in entries)} inserted tokens (prefixes shared)")

print("root children:", [(vocab.token_of(label), node) for label, node in children(fwd, 0)])
probe = tokenize("hp ink", vocab, "keyword")
print(f"lookup('hp ink') -> keyword id {lookup(fwd, probe)} = {catalog[lookup(fwd, probe)]!r}")
print("lookup('hp shoes') ->", lookup(fwd, tokenize("hp shoes", vocab, "keyword")))

rev = build_trie(entries, REVERSED, vocab.checksum())
print("\nreversed trie partitions keywords by length at the root:")
for length, node in length_partitions(rev):
    print(f"  length {length}: partition root node {node}")
print("same ids resolve through the reversed paths:",
      lookup(rev, probe) == lookup(fwd, probe))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "catalog.ktri"
    serialize(fwd, path)
    back = deserialize(path)
    stats = memory_stats(fwd)
    print(f"\nserialized: {stats['serialized_bytes']} bytes "
          f"({stats['bytes_per_keyword']:.1f} per keyword), "
          f"round-trip lookups intact: {all(lookup(back, seq) == kid for seq, kid in entries)}")
