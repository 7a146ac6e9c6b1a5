"""Exact distance ranking and filtered hard-answer metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .operators import group_queries
from .query import STRUCTURES
from .sampler import hard_answers

DEFAULT_KS = (1, 3, 10)


def entity_distances(query_embs, entity_table):
    """Minimum Euclidean distance from every entity row to any conjunct."""
    table = np.asarray(entity_table, dtype=np.float64)
    q = np.atleast_2d(np.asarray(query_embs, dtype=np.float64))
    diff = table[None, :, :] - q[:, None, :]
    return np.sqrt((diff * diff).sum(axis=-1)).min(axis=0)


def rank_entities(query_embs, entity_table):
    """Entity ids sorted by ascending distance, ties broken by id."""
    return np.argsort(entity_distances(query_embs, entity_table), kind="stable")


def filtered_rank(order, target, known_answers):
    """1-based rank of ``target`` once every other known answer is removed."""
    order = np.asarray(order)
    hit = np.flatnonzero(order == target)
    if len(hit) == 0:
        raise ValueError(f"target {target} not in the ranking")
    pos = int(hit[0])
    ahead = order[:pos]
    others = np.fromiter((a for a in known_answers if a != target), dtype=np.int64)
    return pos + 1 - int(np.isin(ahead, others).sum())


def mrr(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks")
    return float(np.mean(1.0 / ranks))


def hits_at_k(ranks, k):
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks")
    return float(np.mean(ranks <= k))


def metric_names(ks=DEFAULT_KS):
    return ["MRR"] + [f"H@{k}" for k in ks]


def query_metrics(ranks, ks=DEFAULT_KS):
    """Per-query metrics, each averaged over the query's hard answers."""
    out = {"MRR": mrr(ranks)}
    for k in ks:
        out[f"H@{k}"] = hits_at_k(ranks, k)
    return out


@dataclass
class MetricsTable:
    """Per-structure metric means plus their macro average.

    ``rows[tag]`` is ``None`` for a structure with no non-trivial query.
    """

    rows: dict
    counts: dict
    metrics: list = field(default_factory=lambda: metric_names())

    @property
    def present(self):
        return [t for t in self.rows if self.rows[t] is not None]

    @property
    def average(self):
        present = self.present
        if not present:
            return {m: float("nan") for m in self.metrics}
        return {m: float(np.mean([self.rows[t][m] for t in present])) for m in self.metrics}

    def __getitem__(self, tag):
        return self.average if tag == "avg" else self.rows[tag]

    def to_csv(self):
        lines = ["structure,metric,value"]
        for tag in self.present:
            for m in self.metrics:
                lines.append(f"{tag},{m},{self.rows[tag][m]:.6f}")
        for m in self.metrics:
            lines.append(f"avg,{m},{self.average[m]:.6f}")
        return "\n".join(lines) + "\n"

    def to_text(self, title=None):
        """Aligned table: one column per structure plus avg, values in %."""
        cols = list(self.rows) + ["avg"]
        width = max(6, *(len(c) for c in cols))
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'Metric':<8}" + "".join(f"{c:>{width + 1}}" for c in cols))
        for m in self.metrics:
            cells = []
            for c in cols:
                row = self.average if c == "avg" else self.rows[c]
                cells.append(f"{'-':>{width + 1}}" if row is None else f"{100 * row[m]:>{width + 1}.1f}")
            lines.append(f"{m:<8}" + "".join(cells))
        lines.append(f"{'queries':<8}" + "".join(f"{self.counts.get(c, sum(self.counts.values())):>{width + 1}}" for c in cols))
        return "\n".join(lines) + "\n"


def _as_structure_map(samples):
    if isinstance(samples, dict):
        return samples
    out = {}
    for s in samples:
        out.setdefault(s.query.structure, []).append(s)
    return out


def _ordered(tags):
    known = [t for t in STRUCTURES if t in tags]
    return known + sorted(t for t in tags if t not in STRUCTURES)


def query_ranks(model, samples, eval_split, batch_size=256):
    """Filtered ranks of every hard answer, one array per non-trivial sample.

    Trivial samples (empty hard set) map to ``None``.
    """
    table = model.entity.value.astype(np.float64)
    sq_table = (table * table).sum(axis=1)
    ids = np.arange(model.entity_count)
    result = [None] * len(samples)
    keep = [i for i, s in enumerate(samples) if hard_answers(s, eval_split)]
    queries = [samples[i].query for i in keep]
    for template, anchors, rels, pos in group_queries(queries).values():
        for start in range(0, len(pos), batch_size):
            sl = slice(start, start + batch_size)
            qs, _ = model.embed_batch(template, anchors[sl], rels[sl])
            dist2 = None
            for q in qs:
                q = q.astype(np.float64)
                d2 = sq_table[None, :] + (q * q).sum(axis=1)[:, None] - 2.0 * q @ table.T
                dist2 = d2 if dist2 is None else np.minimum(dist2, d2)
            dist = np.sqrt(np.maximum(dist2, 0.0))
            for row, p in zip(dist, pos[sl]):
                sample = samples[keep[p]]
                hard = np.array(sorted(hard_answers(sample, eval_split)), dtype=np.int64)
                known = np.array(sorted(sample.answers(eval_split)), dtype=np.int64)
                order = np.lexsort((ids, row))
                position = np.empty_like(order)
                position[order] = np.arange(len(order))
                kp = np.sort(position[known])
                hp = position[hard]
                # known answers strictly ahead of each hard answer are filtered out
                result[keep[p]] = hp + 1 - np.searchsorted(kp, hp, side="left")
    return result


def evaluate(model, samples, eval_split="test", ks=DEFAULT_KS, batch_size=256):
    """Filtered MRR / Hits@K over hard answers, per structure and averaged."""
    by_tag = _as_structure_map(samples)
    rows, counts = {}, {}
    names = metric_names(ks)
    for tag in _ordered(by_tag):
        ranks = query_ranks(model, by_tag[tag], eval_split, batch_size)
        per_query = [query_metrics(r, ks) for r in ranks if r is not None]
        counts[tag] = len(per_query)
        rows[tag] = {m: float(np.mean([q[m] for q in per_query])) for m in names} if per_query else None
    return MetricsTable(rows, counts, names)


def random_baseline(samples, entity_count, eval_split="test", ks=DEFAULT_KS):
    """Expected metrics of a uniformly random ranking under the same filtering.

    With ``m`` candidates left after filtering, a hard answer's rank is
    uniform on ``1..m``: E[1/rank] = H_m / m and P(rank <= k) = min(k, m) / m.
    """
    by_tag = _as_structure_map(samples)
    rows, counts = {}, {}
    names = metric_names(ks)
    harmonic = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, entity_count + 1))])
    for tag in _ordered(by_tag):
        per_query = []
        for s in by_tag[tag]:
            hard = hard_answers(s, eval_split)
            if not hard:
                continue
            m = entity_count - len(s.answers(eval_split)) + 1
            q = {"MRR": harmonic[m] / m}
            for k in ks:
                q[f"H@{k}"] = min(k, m) / m
            per_query.append(q)
        counts[tag] = len(per_query)
        rows[tag] = {m_: float(np.mean([q[m_] for q in per_query])) for m_ in names} if per_query else None
    return MetricsTable(rows, counts, names)


def expected_random_mrr(n):
    """Mean reciprocal rank of one answer placed uniformly among ``n``."""
    return sum(1.0 / i for i in range(1, n + 1)) / n if n else math.nan
