"""Grounded query/answer generation over nested graph splits.

A query is grounded by picking a target entity on the target graph and
walking its structure backwards along existing edges until every anchor is
instantiated; its answers are then recomputed forwards on all three graphs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .query import (
    Anchor,
    Intersect,
    Negate,
    Project,
    QueryInstance,
    Union,
    _BUILDERS,
    arity,
    ground_truth_answers,
    parse_query,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


@dataclass
class SamplerConfig:
    structure: str
    count: int
    max_answers: int = 100
    seed: int = 0
    max_attempts: int = 0  # 0 means 100 * count + 1000
    require_hard: bool = False  # valid/test targets: keep only queries with hard answers

    def __post_init__(self):
        arity(self.structure)
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.max_answers < 1:
            raise ValueError("max_answers must be >= 1")

    @property
    def attempt_budget(self):
        return self.max_attempts or 100 * self.count + 1000


@dataclass(frozen=True)
class QuerySample:
    query: QueryInstance
    answers_train: frozenset
    answers_valid: frozenset
    answers_test: frozenset

    def answers(self, split):
        return getattr(self, f"answers_{split}")

    def to_line(self):
        cols = [self.query.sexpr()]
        for s in (self.answers_train, self.answers_valid, self.answers_test):
            cols.append(",".join(str(e) for e in sorted(s)))
        return "\t".join(cols)

    @classmethod
    def from_line(cls, line):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 4:
            raise ValueError(f"expected 4 tab-separated columns, got {len(parts)}")
        sets = [frozenset(int(x) for x in p.split(",") if x) for p in parts[1:]]
        return cls(parse_query(parts[0]), *sets)


@dataclass
class SampleResult:
    samples: list
    attempts: int = 0
    rejected: dict = field(default_factory=dict)
    shortfall: int = 0

    @property
    def complete(self):
        return self.shortfall == 0


class _Unsat(Exception):
    pass


def hard_answers(sample, eval_split):
    """Answers reachable only through edges added by ``eval_split``."""
    if eval_split == "valid":
        return sample.answers_valid - sample.answers_train
    if eval_split == "test":
        return sample.answers_test - sample.answers_valid
    raise ValueError(f"eval split must be 'valid' or 'test', got {eval_split!r}")


def _template(tag):
    n_a, n_r, build = _BUILDERS[tag]
    # slot indices stand in for ids; Intersect sorts children but slots survive
    return build(list(range(n_a)), list(range(n_r))), n_a, n_r


def _ground(graph, node, entity, anchors, relations, rng):
    """Fill ``anchors``/``relations`` slots so that ``entity`` answers ``node``."""
    if isinstance(node, Anchor):
        anchors[node.entity] = entity
        return
    if isinstance(node, Project):
        edges = graph.out_edges(entity)
        if len(edges) == 0:
            raise _Unsat
        rel, src = edges[rng.integers(len(edges))]
        relations[node.rel] = int(rel) ^ 1
        _ground(graph, node.child, int(src), anchors, relations, rng)
        return
    if isinstance(node, Union):
        for c in node.children:
            _ground(graph, c, entity, anchors, relations, rng)
        return
    if isinstance(node, Intersect):
        positive = [c for c in node.children if not isinstance(c, Negate)]
        negated = [c for c in node.children if isinstance(c, Negate)]
        for c in positive:
            _ground(graph, c, entity, anchors, relations, rng)
        if negated:
            pos_answers = None
            for c in positive:
                ans = _eval_slots(graph, c, anchors, relations)
                pos_answers = ans if pos_answers is None else pos_answers & ans
            pool = sorted(pos_answers)
            for c in negated:
                # seed from a positive answer so the negation removes something
                seed = pool[rng.integers(len(pool))]
                _ground(graph, c.child, seed, anchors, relations, rng)
        return
    raise _Unsat


def _eval_slots(graph, node, anchors, relations):
    return set(ground_truth_answers(graph, _fill(node, anchors, relations)))


def _fill(node, anchors, relations):
    if isinstance(node, Anchor):
        return Anchor(anchors[node.entity])
    if isinstance(node, Project):
        return Project(_fill(node.child, anchors, relations), relations[node.rel])
    if isinstance(node, Negate):
        return Negate(_fill(node.child, anchors, relations))
    cls = Intersect if isinstance(node, Intersect) else Union
    return cls(tuple(_fill(c, anchors, relations) for c in node.children))


def sample_queries(splits, cfg, target_graph="train"):
    """Generate up to ``cfg.count`` grounded samples; see :class:`SampleResult`.

    Deterministic for a given ``(splits, cfg, target_graph)``. Exhausting the
    attempt budget returns a partial result and logs a warning.
    """
    if target_graph not in SPLITS:
        raise ValueError(f"target graph must be one of {SPLITS}, got {target_graph!r}")
    graph = splits[target_graph]
    rng = np.random.default_rng(cfg.seed)
    template, n_a, n_r = _template(cfg.structure)
    out, seen = [], set()
    rejected = {"unsat": 0, "empty": 0, "too_many": 0, "duplicate": 0, "no_hard": 0}
    attempts = 0
    candidates = np.flatnonzero(np.diff(graph._head_ptr) > 0)
    if len(candidates) == 0 or cfg.count == 0:
        return SampleResult(out, 0, rejected, shortfall=cfg.count)
    while len(out) < cfg.count and attempts < cfg.attempt_budget:
        attempts += 1
        target = int(candidates[rng.integers(len(candidates))])
        anchors, relations = [None] * n_a, [None] * n_r
        try:
            _ground(graph, template, target, anchors, relations, rng)
        except _Unsat:
            rejected["unsat"] += 1
            continue
        query = QueryInstance(cfg.structure, _fill(template, anchors, relations))
        key = query.sexpr()
        if key in seen:
            rejected["duplicate"] += 1
            continue
        answers = {s: ground_truth_answers(splits[s], query) for s in SPLITS}
        n_target = len(answers[target_graph])
        if n_target == 0:
            rejected["empty"] += 1
            continue
        if n_target > cfg.max_answers:
            rejected["too_many"] += 1
            continue
        sample = QuerySample(query, answers["train"], answers["valid"], answers["test"])
        if cfg.require_hard and target_graph != "train" and not hard_answers(sample, target_graph):
            rejected["no_hard"] += 1
            continue
        seen.add(key)
        out.append(sample)
    shortfall = cfg.count - len(out)
    if shortfall:
        log.warning(
            "%s: produced %d of %d queries after %d attempts (rejections: %s)",
            cfg.structure, len(out), cfg.count, attempts, rejected,
        )
    return SampleResult(out, attempts, rejected, shortfall=shortfall)


def write_samples(path, samples):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(s.to_line() + "\n")


def read_samples(path):
    with open(path, encoding="utf-8") as f:
        return [QuerySample.from_line(line) for line in f if line.strip()]


def graph_hash(graph):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(graph.triples, dtype="<i8").tobytes())
    return h.hexdigest()


def write_manifest(path, entries, splits):
    manifest = {
        "graphs": {s: graph_hash(splits[s]) for s in SPLITS},
        "files": entries,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_query_dir(directory, split, structures=None):
    """Read ``<directory>/<split>/<tag>.txt`` files into ``{tag: samples}``."""
    base = os.path.join(directory, split)
    out = {}
    for name in sorted(os.listdir(base)):
        if not name.endswith(".txt"):
            continue
        tag = name[:-4]
        if structures is not None and tag not in structures:
            continue
        out[tag] = read_samples(os.path.join(base, name))
    return out
