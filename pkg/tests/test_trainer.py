import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnkg.operators import ModelConfig, QueryModel
from nnkg.sampler import SamplerConfig, sample_queries
from nnkg.synthetic import make_synthetic_kg
from nnkg.trainer import (
    CheckpointError,
    NumericFailure,
    TrainConfig,
    Trainer,
    TrainingError,
    load_checkpoint,
    loss,
    margin_loss_backward,
    margin_loss_forward,
    sample_negatives,
    save_checkpoint,
)

from oracles import central_difference, rel_error


def point_at(distance, d=4, axis=0):
    v = np.zeros(d)
    v[axis] = distance
    return v


# -- objective ----------------------------------------------------------------

def test_loss_at_margin_is_two_ln_two():
    gamma = 3.0
    table = np.stack([point_at(gamma), point_at(gamma, axis=1), point_at(-gamma, axis=2)])
    value = loss([np.zeros(4)], 0, [1, 2, 1], table, gamma)
    assert abs(value - 2 * math.log(2)) < 1e-12


def test_loss_vanishes_for_perfect_separation():
    gamma = 24.0
    table = np.stack([np.zeros(4), point_at(2 * gamma)])
    value = loss([np.zeros(4)], 0, [1, 1], table, gamma)
    assert 0 < value < 1e-9
    assert abs(value - 2 * -math.log(1 / (1 + math.exp(-24)))) < 1e-15


def test_loss_rejects_empty_negatives():
    with pytest.raises(ValueError):
        loss([np.zeros(4)], 0, [], np.zeros((2, 4)), 1.0)


def test_union_distance_is_min_over_conjuncts():
    gamma = 2.0
    table = np.stack([point_at(5.0), point_at(-7.0)])
    value = loss([np.zeros(4), point_at(5.0)], 0, [1], table, gamma)
    # positive is at 0 from the second conjunct, the negative at 7 from the first
    def logsig(x):
        return -math.log1p(math.exp(-x))

    assert value == pytest.approx(-logsig(gamma - 0.0) - logsig(7.0 - gamma), rel=1e-12)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for trial in range(100):
        B, k, d, C = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 3)
        gamma = rng.uniform(0.5, 3)
        qs = [rng.normal(size=(B, d)) for _ in range(C)]
        pos, neg = rng.normal(size=(B, d)), rng.normal(size=(B, k, d))
        value, cache = margin_loss_forward(qs, pos, neg, gamma)
        dqs, dpos, dneg = margin_loss_backward(1.0, cache)

        def f_q(x, c):
            return margin_loss_forward([x if i == c else q for i, q in enumerate(qs)], pos, neg, gamma)[0]

        for c in range(C):
            assert rel_error(dqs[c], central_difference(lambda x: f_q(x, c), qs[c].copy())) <= 1e-3
        assert rel_error(dpos, central_difference(lambda x: margin_loss_forward(qs, x, neg, gamma)[0], pos.copy())) <= 1e-3
        assert rel_error(dneg, central_difference(lambda x: margin_loss_forward(qs, pos, x, gamma)[0], neg.copy())) <= 1e-3


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 30), st.floats(0, 60), st.floats(0, 60), st.floats(0.01, 5))
def test_margin_semantics(gamma, dp, dn, step):
    def value(dp, dn):
        return loss([np.zeros(2)], 0, [1], np.stack([point_at(dp, 2), point_at(dn, 2, axis=1)]), gamma)

    base = value(dp, dn)
    assert base > 0
    # strict monotonicity holds until σ saturates in float64
    if base > 1e-12:
        assert value(dp + step, dn) > base or value(dp + step, dn) == pytest.approx(base, rel=1e-12)
        assert value(dp, dn + step) < base or value(dp, dn + step) == pytest.approx(base, rel=1e-12)


def test_one_dimensional_sweeps():
    gamma = 4.0
    sweep = np.linspace(0, 20, 201)
    pos_curve = [loss([np.zeros(2)], 0, [1], np.stack([point_at(x, 2), point_at(8.0, 2)]), gamma) for x in sweep]
    neg_curve = [loss([np.zeros(2)], 0, [1], np.stack([point_at(1.0, 2), point_at(x, 2)]), gamma) for x in sweep]
    assert np.all(np.diff(pos_curve) > 0)
    assert np.all(np.diff(neg_curve) < 0)
    assert min(pos_curve + neg_curve) > 0


# -- negatives ----------------------------------------------------------------

def test_forced_negatives():
    out = sample_negatives(set(range(9)), 10, 3, np.random.default_rng(0))
    assert out.tolist() == [9, 9, 9]


def test_zero_negatives_rejected():
    with pytest.raises(ValueError):
        TrainConfig(negatives=0)


def test_config_invariants():
    for bad in ({"margin": 0}, {"batch_size": 0}, {"iterations": -1}, {"structure_weights": {"1p": -1}}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_all_answers_means_no_negative():
    with pytest.raises(ValueError):
        sample_negatives(set(range(5)), 5, 2, np.random.default_rng(0))


def test_negatives_uniform_over_complement():
    n, k = 20, 100_000
    answers = {0, 3, 7, 11}
    draws = sample_negatives(answers, n, k, np.random.default_rng(1))
    counts = np.bincount(draws, minlength=n)
    assert all(counts[a] == 0 for a in answers)
    m = n - len(answers)
    p = 1 / m
    expected, sigma = k * p, math.sqrt(k * p * (1 - p))
    free = [e for e in range(n) if e not in answers]
    assert np.all(np.abs(counts[free] - expected) <= 3 * sigma + 1)
    chi2 = float(((counts[free] - expected) ** 2 / expected).sum())
    # 15 degrees of freedom; the 0.999 quantile is about 37.7
    assert chi2 < 37.7


# -- training loop ------------------------------------------------------------

@pytest.fixture(scope="module")
def small_run():
    splits, _ = make_synthetic_kg(n_entities=60, n_relations=6, n_clusters=6, seed=4)
    queries = {t: sample_queries(splits, SamplerConfig(t, 40, seed=i), "train").samples
               for i, t in enumerate(("1p", "2p", "2i", "2in"))}
    return splits, queries


def make_model(splits, family="mlp", seed=1):
    cfg = ModelConfig(family=family, embed_dim=8, hidden_dim=16, init_scale=0.1)
    return QueryModel(cfg, splits.entity_count, splits.relation_count, seed=seed)


def tcfg(**kw):
    base = dict(margin=2.0, negatives=4, batch_size=16, learning_rate=1e-2, iterations=20, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(model):
    return {p.name: p.value.copy() for p in model.parameters()}


def test_zero_iterations_leave_model_unchanged(small_run):
    splits, queries = small_run
    model = make_model(splits)
    before = snapshot(model)
    trainer = Trainer(model, queries, tcfg(iterations=0))
    trainer.run()
    assert trainer.iteration == 0 and trainer.history == []
    assert all(np.array_equal(before[k], v) for k, v in snapshot(model).items())


def test_loss_trace_deterministic_and_finite(small_run):
    splits, queries = small_run
    traces = []
    for _ in range(2):
        trainer = Trainer(make_model(splits), queries, tcfg())
        trainer.run()
        traces.append([h["loss"] for h in trainer.history])
    assert traces[0] == traces[1]
    assert len(traces[0]) == 20 and all(math.isfinite(v) and v > 0 for v in traces[0])


def test_joint_training_moves_tables_and_operators(small_run):
    splits, queries = small_run
    model = make_model(splits)
    before = snapshot(model)
    Trainer(model, queries, tcfg()).run(1)
    after = snapshot(model)
    assert np.any(before["entity"] != after["entity"])
    changed_ops = [k for k in before if k.startswith("ops") and np.any(before[k] != after[k])]
    assert changed_ops


def test_mixer_refuses_negation_training(small_run):
    from nnkg.operators import UnsupportedOperatorError

    splits, queries = small_run
    cfg = ModelConfig(family="mlp-mixer", embed_dim=8, hidden_dim=16)
    model = QueryModel(cfg, splits.entity_count, splits.relation_count, seed=0)
    with pytest.raises(UnsupportedOperatorError):
        Trainer(model, queries, tcfg())


def test_no_queries_is_an_error(small_run):
    splits, _ = small_run
    with pytest.raises(TrainingError):
        Trainer(make_model(splits), {}, tcfg()).run(1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(small_run):
    splits, queries = small_run
    model = make_model(splits)
    model.entity.value[:] = np.inf
    with pytest.raises(NumericFailure):
        Trainer(model, queries, tcfg()).run(1)


def test_structure_weights_shape_the_mix(small_run):
    splits, queries = small_run
    trainer = Trainer(make_model(splits), queries, tcfg(structure_weights={"1p": 3.0, "2in": 0.0}))
    w = dict(zip(trainer.structures, trainer.weights))
    assert w["2in"] == 0.0 and w["1p"] == pytest.approx(3 / 5)


def test_nln_trains_with_regularizer(small_run):
    splits, queries = small_run
    model = make_model(splits, "nln")
    trainer = Trainer(model, queries, tcfg())
    trainer.run()
    assert all(math.isfinite(h["loss"]) for h in trainer.history)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small_run):
    splits, queries = small_run
    model = make_model(splits, "mlp-2vector")
    trainer = Trainer(model, queries, tcfg())
    trainer.run(3)
    save_checkpoint(tmp_path / "a.ckpt", model, trainer)
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.iteration == 3
    assert ck.model.cfg == model.cfg
    for a, b in zip(model.parameters(), ck.model.parameters()):
        assert a.name == b.name and np.array_equal(a.value, b.value)
    assert ck.header["rng_state"] == trainer.rng.bit_generator.state
    for (m, v), pm, pv in zip(ck.moments, trainer.optimizer.m, trainer.optimizer.v):
        assert np.array_equal(m, pm) and np.array_equal(v, pv)


def test_checkpoint_header_layout(tmp_path, small_run):
    import json
    import struct

    splits, _ = small_run
    model = make_model(splits)
    save_checkpoint(tmp_path / "m.ckpt", model)
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:4] == b"NNKG"
    version, head_len = struct.unpack_from("<II", blob, 4)
    header = json.loads(blob[12:12 + head_len])
    assert version == 1
    assert header["family"] == "mlp" and header["embed_dim"] == 8
    assert [name for name, _ in header["manifest"]] == [p.name for p in model.parameters()]


def test_truncated_checkpoint_is_refused(tmp_path, small_run):
    splits, _ = small_run
    model = make_model(splits)
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    for cut in (len(blob) - 1, len(blob) // 2, 20):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_flipped_byte_is_refused(tmp_path, small_run):
    splits, _ = small_run
    path = tmp_path / "f.ckpt"
    save_checkpoint(path, make_model(splits))
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="integrity"):
        load_checkpoint(path)


def test_config_mismatch_is_refused(tmp_path, small_run):
    splits, _ = small_run
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, make_model(splits))
    with pytest.raises(CheckpointError, match="family"):
        load_checkpoint(path, ModelConfig(family="cnn", embed_dim=16))
    with pytest.raises(CheckpointError, match="embed_dim"):
        load_checkpoint(path, ModelConfig(family="mlp", embed_dim=10))


def test_resume_is_bit_identical(tmp_path, small_run):
    splits, queries = small_run
    cfg = tcfg(iterations=15)
    straight = Trainer(make_model(splits), queries, cfg)
    straight.run()

    model = make_model(splits)
    first = Trainer(model, queries, cfg)
    first.run(5)
    save_checkpoint(tmp_path / "r.ckpt", model, first)
    resumed = load_checkpoint(tmp_path / "r.ckpt").restore_trainer(queries)
    resumed.run(10)
    assert resumed.iteration == 15
    assert [h["loss"] for h in resumed.history] == [h["loss"] for h in straight.history[5:]]
    for a, b in zip(straight.model.parameters(), resumed.model.parameters()):
        assert np.array_equal(a.value, b.value), a.name


def test_checkpoint_size_arithmetic(tmp_path):
    # entity / relation counts of the FB15k graph, d = 800, forward plus inverse relations
    n_ent, n_rel, d = 14951, 2 * 1345, 800
    cfg = ModelConfig(family="mlp", embed_dim=d)
    model = QueryModel(cfg, n_ent, n_rel, seed=0)
    path = tmp_path / "big.ckpt"
    save_checkpoint(path, model)
    tables = (n_ent + n_rel) * d * 4
    ops = sum(p.value.size for p in model.parameters()[2:]) * 4
    size = path.stat().st_size
    overhead = size - tables - ops
    assert 0 < overhead < 64 * 1024
    assert size == pytest.approx(tables + ops, rel=1e-3)


@pytest.mark.slow
def test_toy_smoke_training_split_1p():
    import toy

    model, seconds = toy.trained("mlp")
    assert toy.train_1p_mrr(model) >= 0.8
    assert seconds < 300


def test_batch_negatives_dense_and_sparse_rows():
    from nnkg.trainer import _sample_negatives_batch

    rng = np.random.default_rng(0)
    answers = [np.arange(9), np.array([2]), np.arange(1, 10)]
    out = _sample_negatives_batch(answers, 10, 50, rng)
    assert np.all(out[0] == 9) and np.all(out[2] == 0)
    assert not np.any(out[1] == 2) and len(set(out[1].tolist())) > 1
