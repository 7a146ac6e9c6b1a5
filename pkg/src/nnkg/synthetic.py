"""Small synthetic knowledge graphs with learnable regularities.

Entities are partitioned into equal clusters and each entity has a position
inside its cluster. A relation maps every cluster to one target cluster and
shifts positions by a relation-specific offset, so an entity links to the
members at the next few shifted positions. With probability ``noise`` a tail
is instead a random member of the target cluster. Held-out edges therefore
follow the same rules as training edges, which gives embedding models
something to generalise.

Relations may share a pattern (``n_patterns`` < ``n_relations``). Relations
with the same pattern use the same cluster map, offset and tail count, so
they agree wherever both are present, like near-duplicate relations in real
graphs.
"""

from __future__ import annotations

import os

import numpy as np

from .kg import build_splits


def make_synthetic_kg(n_entities=200, n_relations=20, n_clusters=20, edge_prob=0.5,
                      max_tails=2, noise=0.0, n_patterns=None, valid_frac=0.05,
                      test_frac=0.05, seed=0):
    """Return ``(splits, raw)`` with ``raw`` the per-split forward triples."""
    rng = np.random.default_rng(seed)
    if n_entities % n_clusters:
        raise ValueError("n_entities must be a multiple of n_clusters")
    size = n_entities // n_clusters
    cluster = rng.permutation(n_entities) % n_clusters
    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    position = np.empty(n_entities, dtype=np.int64)
    for m in members:
        position[m] = np.arange(size)
    n_patterns = n_relations if n_patterns is None else n_patterns
    if not 1 <= n_patterns <= n_relations:
        raise ValueError("n_patterns must lie in [1, n_relations]")
    target = np.stack([rng.permutation(n_clusters) for _ in range(n_patterns)])
    shift = rng.integers(size, size=n_patterns)
    tails = rng.integers(1, max_tails + 1, size=(n_entities, n_patterns))
    rows = []
    for h in range(n_entities):
        for r in range(n_relations):
            if rng.random() >= edge_prob:
                continue
            p = r % n_patterns
            pool = members[target[p, cluster[h]]]
            for j in range(min(int(tails[h, p]), size)):
                if rng.random() < noise:
                    t = pool[rng.integers(size)]
                else:
                    t = pool[(position[h] + shift[p] + j) % size]
                rows.append((h, 2 * r, int(t)))
    triples = np.array(sorted(set(rows)), dtype=np.int64)
    order = rng.permutation(len(triples))
    n_valid = int(round(valid_frac * len(triples)))
    n_test = int(round(test_frac * len(triples)))
    raw = {
        "valid": triples[np.sort(order[:n_valid])],
        "test": triples[np.sort(order[n_valid:n_valid + n_test])],
        "train": triples[np.sort(order[n_valid + n_test:])],
    }
    splits = build_splits(raw["train"], raw["valid"], raw["test"], n_entities, 2 * n_relations)
    return splits, raw


def write_triple_dir(directory, raw, entity_names=None, relation_names=None):
    """Write ``train.txt``/``valid.txt``/``test.txt`` with string tokens."""
    os.makedirs(directory, exist_ok=True)
    for split, triples in raw.items():
        with open(os.path.join(directory, f"{split}.txt"), "w", encoding="utf-8", newline="\n") as f:
            for h, r, t in triples:
                hn = entity_names[h] if entity_names else f"e{h}"
                rn = relation_names[r // 2] if relation_names else f"r{r // 2}"
                tn = entity_names[t] if entity_names else f"e{t}"
                f.write(f"{hn}\t{rn}\t{tn}\n")
