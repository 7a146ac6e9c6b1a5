"""Index-free reference evaluator used to double-check generated queries.

Answers are computed by scanning the full triple array for every projection,
so the result does not depend on the adjacency index that the sampler uses.
Slow, but simple enough to trust.
"""

from __future__ import annotations

import numpy as np

from .query import Anchor, Intersect, Negate, Project, QueryInstance


def scan_answers(triples, entity_count, query):
    """Answer set of ``query`` over an ``(n, 3)`` triple array (inverse
    edges included)."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    root = query.root if isinstance(query, QueryInstance) else query
    return frozenset(int(x) for x in _scan(triples, entity_count, root))


def _scan(triples, n, node):
    if isinstance(node, Anchor):
        return np.array([node.entity], dtype=np.int64)
    if isinstance(node, Project):
        src = _scan(triples, n, node.child)
        hit = (triples[:, 1] == node.rel) & np.isin(triples[:, 0], src)
        return np.unique(triples[hit, 2])
    if isinstance(node, Negate):
        return np.setdiff1d(np.arange(n, dtype=np.int64), _scan(triples, n, node.child))
    parts = [_scan(triples, n, c) for c in node.children]
    out = parts[0]
    for p in parts[1:]:
        out = np.intersect1d(out, p) if isinstance(node, Intersect) else np.union1d(out, p)
    return out


def verify_sample(splits, sample):
    """Names of the splits whose stored answers disagree with a fresh scan."""
    bad = []
    for split in ("train", "valid", "test"):
        graph = splits[split]
        if scan_answers(graph.triples, graph.entity_count, sample.query) != sample.answers(split):
            bad.append(split)
    return bad
