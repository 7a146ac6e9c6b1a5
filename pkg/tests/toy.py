"""Shared toy benchmark: a structured 200-entity synthetic graph, fixed query
sets and cached training runs so several test modules can reuse one model."""

import functools
import time
from types import SimpleNamespace

from nnkg.evaluator import evaluate, random_baseline
from nnkg.operators import ModelConfig, QueryModel
from nnkg.query import EPFO_STRUCTURES, Negate
from nnkg.sampler import QuerySample, SamplerConfig, sample_queries
from nnkg.synthetic import make_synthetic_kg
from nnkg.trainer import TrainConfig, Trainer

EPFO_TRAIN = ("1p", "2p", "3p", "2i", "3i")
NEG_TRAIN = ("2in", "3in", "inp", "pin", "pni")
ITERATIONS = 2000


def model_config(family="mlp"):
    return ModelConfig(family=family, embed_dim=32, hidden_dim=256, init_scale=0.1)


def train_config(iterations=ITERATIONS):
    return TrainConfig(margin=2.0, negatives=32, batch_size=256, learning_rate=3e-3,
                       iterations=iterations, seed=2, structure_weights={"1p": 4.0})


@functools.lru_cache(maxsize=None)
def graph():
    return make_synthetic_kg(seed=0, n_patterns=5)


@functools.lru_cache(maxsize=None)
def train_queries(fol=False):
    splits, _ = graph()
    tags = EPFO_TRAIN + (NEG_TRAIN if fol else ())
    return {
        tag: sample_queries(splits, SamplerConfig(tag, 2000 if tag == "1p" else 1000, seed=100 + i), "train").samples
        for i, tag in enumerate(tags)
    }


@functools.lru_cache(maxsize=None)
def eval_queries(fol=False):
    splits, _ = graph()
    tags = EPFO_STRUCTURES + (NEG_TRAIN if fol else ())
    return {
        tag: sample_queries(splits, SamplerConfig(tag, 200, seed=500 + i, require_hard=True), "test").samples
        for i, tag in enumerate(tags)
    }


def new_model(family="mlp", seed=1):
    splits, _ = graph()
    return QueryModel(model_config(family), splits.entity_count, splits.relation_count, seed=seed)


@functools.lru_cache(maxsize=None)
def trained(family="mlp", fol=False):
    """Train once per (family, fol) and return ``(model, seconds)``."""
    model = new_model(family)
    trainer = Trainer(model, train_queries(fol), train_config())
    start = time.perf_counter()
    trainer.run()
    return model, time.perf_counter() - start


@functools.lru_cache(maxsize=None)
def trained_all_edges():
    """MLP trained only on 1p, with one query per (head, relation) pair of the
    training graph so that every training edge is seen directly."""
    splits, _ = graph()
    pairs = sum(1 for h in range(splits.entity_count) for r in range(splits.relation_count)
                if len(splits.train.neighbors(h, r)))
    res = sample_queries(splits, SamplerConfig("1p", pairs, seed=0, max_attempts=200 * pairs), "train")
    assert res.complete
    model = new_model("mlp")
    Trainer(model, {"1p": res.samples}, train_config()).run()
    return model


def negated_1p(sample, entity_count):
    """Training sample for the bare negation of a 1p query: its answers are
    the complement of the 1p answers. Not one of the standard structures, so
    the query is a plain record with the fields the trainer reads."""
    everything = frozenset(range(entity_count))
    q = sample.query
    query = SimpleNamespace(structure="n1p", root=Negate(q.root), anchors=q.anchors, relations=q.relations)
    return QuerySample(query, everything - sample.answers_train, everything - sample.answers_valid,
                       everything - sample.answers_test)


@functools.lru_cache(maxsize=None)
def trained_bare_negation():
    """MLP trained on 1p plus negated 1p queries for 1,000 iterations."""
    splits, _ = graph()
    ones = train_queries()["1p"]
    queries = {"1p": ones, "n1p": [negated_1p(s, splits.entity_count) for s in ones[:1000]]}
    model = new_model("mlp")
    Trainer(model, queries, train_config(1000)).run()
    return model


def train_1p_mrr(model, n=500):
    """MRR on training 1p queries, filtered by their training answers."""
    samples = [QuerySample(s.query, frozenset(), s.answers_train, s.answers_train)
               for s in train_queries()["1p"][:n]]
    return evaluate(model, {"1p": samples}, "valid")["1p"]["MRR"]


def eval_tables(model, fol=False):
    splits, _ = graph()
    queries = eval_queries(fol)
    return evaluate(model, queries, "test"), random_baseline(queries, splits.entity_count, "test")
