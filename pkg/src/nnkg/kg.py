"""Triple loading, inverse augmentation and adjacency indices.

Relation ids follow a parity convention: raw relation ``i`` is stored as
``2 * i`` and its inverse as ``2 * i + 1``, so ``inverse(r) == r ^ 1``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class KGError(Exception):
    """Base class for graph loading and construction errors."""


class TripleParseError(KGError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class UnknownTokenError(KGError, KeyError):
    pass


def inverse(rel):
    return rel ^ 1


class Dictionary:
    """Dense first-seen id assignment for string tokens."""

    def __init__(self, names=None, frozen=False):
        self.names = list(names or [])
        self.index = {name: i for i, name in enumerate(self.names)}
        if len(self.index) != len(self.names):
            raise KGError("duplicate names in dictionary")
        self.frozen = frozen

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    def __eq__(self, other):
        return isinstance(other, Dictionary) and self.names == other.names

    def lookup(self, name):
        i = self.index.get(name)
        if i is None:
            if self.frozen:
                raise UnknownTokenError(name)
            i = len(self.names)
            self.names.append(name)
            self.index[name] = i
        return i

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for i, name in enumerate(self.names):
                f.write(f"{i}\t{name}\n")

    @classmethod
    def load(cls, path, frozen=True):
        names = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise TripleParseError(path, line_no, "expected 'id<TAB>name'")
                if int(parts[0]) != len(names):
                    raise TripleParseError(path, line_no, f"ids must be dense, got {parts[0]}")
                names.append(parts[1])
        return cls(names, frozen=frozen)


def load_triples(path, entities=None, relations=None):
    """Read a ``head<TAB>relation<TAB>tail`` file.

    Returns ``(triples, entities, relations)`` where ``triples`` is an
    ``(n, 3)`` int64 array with forward (even) relation ids. Passing the
    dictionaries from a previous call continues their numbering; frozen
    dictionaries raise :class:`UnknownTokenError` on unseen tokens.
    """
    entities = entities if entities is not None else Dictionary()
    relations = relations if relations is not None else Dictionary()
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleParseError(path, line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = (p.strip() for p in parts)
            try:
                rows.append((entities.lookup(h), 2 * relations.lookup(r), entities.lookup(t)))
            except UnknownTokenError as e:
                raise UnknownTokenError(f"{path}:{line_no}: unknown token {e.args[0]!r}") from None
    triples = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return triples, entities, relations


def augment_inverse(triples):
    """Append ``(t, r ^ 1, h)`` for every ``(h, r, t)``.

    Raises :class:`KGError` if any relation id is already odd.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if np.any(triples[:, 1] & 1):
        raise KGError("input already contains inverse (odd) relation ids; refusing to augment twice")
    inv = triples[:, [2, 1, 0]].copy()
    inv[:, 1] ^= 1
    return np.concatenate([triples, inv], axis=0)


def _unique_rows(triples):
    if len(triples) == 0:
        return triples.reshape(0, 3)
    return np.unique(triples, axis=0)


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Immutable inverse-closed triple set with (head, relation) adjacency.

    ``triples`` is sorted lexicographically by (head, relation, tail), with
    duplicates removed.
    """

    entity_count: int
    relation_count: int
    triples: np.ndarray
    _adj: dict = field(repr=False, default=None)
    _head_ptr: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_triples(cls, triples, entity_count, relation_count, augment=True):
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if augment:
            triples = augment_inverse(triples)
        _check_range(triples, entity_count, relation_count)
        triples = _unique_rows(triples)
        triples.setflags(write=False)
        adj = {}
        if len(triples):
            keys = triples[:, 0] * relation_count + triples[:, 1]
            starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
            ends = np.r_[starts[1:], len(triples)]
            tails = triples[:, 2]
            for s, e in zip(starts, ends):
                adj[(int(triples[s, 0]), int(triples[s, 1]))] = tails[s:e]
        head_ptr = np.searchsorted(triples[:, 0], np.arange(entity_count + 1))
        return cls(entity_count, relation_count, triples, adj, head_ptr)

    def __len__(self):
        return len(self.triples)

    @property
    def forward_count(self):
        """Number of stored triples with a forward (even) relation."""
        return int(np.count_nonzero((self.triples[:, 1] & 1) == 0))

    def neighbors(self, entity, relation):
        """Sorted array of tails ``t`` with ``(entity, relation, t)`` stored."""
        return self._adj.get((int(entity), int(relation)), _EMPTY)

    def out_edges(self, entity):
        """``(m, 2)`` array of ``(relation, tail)`` pairs leaving ``entity``."""
        s, e = self._head_ptr[entity], self._head_ptr[entity + 1]
        return self.triples[s:e, 1:]

    def contains(self, h, r, t):
        tails = self.neighbors(h, r)
        i = np.searchsorted(tails, t)
        return bool(i < len(tails) and tails[i] == t)

    def triple_set(self):
        return {tuple(map(int, row)) for row in self.triples}


_EMPTY = np.zeros(0, dtype=np.int64)
_EMPTY.setflags(write=False)


def _check_range(triples, entity_count, relation_count):
    if len(triples) == 0:
        return
    if triples.min() < 0:
        raise KGError("negative id in triples")
    if triples[:, [0, 2]].max() >= entity_count:
        raise KGError(f"entity id {int(triples[:, [0, 2]].max())} out of range (entity_count={entity_count})")
    if triples[:, 1].max() >= relation_count:
        raise KGError(f"relation id {int(triples[:, 1].max())} out of range (relation_count={relation_count})")


@dataclass(frozen=True)
class GraphSplits:
    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph

    def __getitem__(self, name):
        if name not in ("train", "valid", "test"):
            raise KeyError(name)
        return getattr(self, name)

    @property
    def entity_count(self):
        return self.test.entity_count

    @property
    def relation_count(self):
        return self.test.relation_count


def build_splits(train, valid, test, entity_count=None, relation_count=None):
    """Build the nested train ⊆ valid ⊆ test graphs from raw forward triples.

    ``relation_count`` counts augmented relations (twice the raw count). When
    omitted, both id spaces are inferred from the maximum id seen.
    """
    parts = [np.asarray(x, dtype=np.int64).reshape(-1, 3) for x in (train, valid, test)]
    everything = np.concatenate(parts, axis=0)
    if entity_count is None:
        entity_count = int(everything[:, [0, 2]].max()) + 1 if len(everything) else 0
    if relation_count is None:
        relation_count = (int(everything[:, 1].max()) // 2 + 1) * 2 if len(everything) else 0
    g_train = KnowledgeGraph.from_triples(parts[0], entity_count, relation_count)
    g_valid = KnowledgeGraph.from_triples(np.concatenate(parts[:2]), entity_count, relation_count)
    g_test = KnowledgeGraph.from_triples(everything, entity_count, relation_count)
    return GraphSplits(g_train, g_valid, g_test)


def load_dataset(directory, names=("train.txt", "valid.txt", "test.txt")):
    """Load a train/valid/test triple directory into shared id spaces.

    Returns ``(splits, raw_triples, entities, relations)`` where
    ``raw_triples`` is a dict of the per-file forward triples.
    """
    entities, relations = Dictionary(), Dictionary()
    ent_path = os.path.join(directory, "entities.dict")
    rel_path = os.path.join(directory, "relations.dict")
    if os.path.exists(ent_path) and os.path.exists(rel_path):
        entities, relations = Dictionary.load(ent_path), Dictionary.load(rel_path)
    raw = {}
    for split, name in zip(("train", "valid", "test"), names):
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        raw[split], entities, relations = load_triples(path, entities, relations)
    splits = build_splits(raw["train"], raw["valid"], raw["test"], len(entities), 2 * len(relations))
    return splits, raw, entities, relations
