import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnkg.kg import (
    Dictionary,
    KGError,
    KnowledgeGraph,
    TripleParseError,
    UnknownTokenError,
    augment_inverse,
    build_splits,
    inverse,
    load_dataset,
    load_triples,
)
from nnkg.synthetic import make_synthetic_kg

from oracles import augmented, scan_neighbors


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_toy_file_counts(tmp_path):
    p = write(tmp_path / "t.txt", ["a\tr\tb", "a\tr\tc", "b\ts\td"])
    triples, ents, rels = load_triples(p)
    assert triples.shape == (3, 3)
    assert len(ents) == 4 and len(rels) == 2
    # first-seen ids, forward relations on even ids
    assert ents.names == ["a", "b", "c", "d"]
    assert triples.tolist() == [[0, 0, 1], [0, 0, 2], [1, 2, 3]]


def test_empty_file(tmp_path):
    p = write(tmp_path / "e.txt", [])
    triples, ents, rels = load_triples(p)
    assert triples.shape == (0, 3)
    assert len(ents) == 0 and len(rels) == 0


def test_malformed_line_reports_line_number(tmp_path):
    p = write(tmp_path / "bad.txt", ["a\tr\tb", "a\tr"])
    with pytest.raises(TripleParseError) as info:
        load_triples(p)
    assert info.value.line_no == 2
    assert "bad.txt:2" in str(info.value)


def test_frozen_dictionary_rejects_unknown(tmp_path):
    p = write(tmp_path / "t.txt", ["a\tr\tz"])
    ents = Dictionary(["a"], frozen=True)
    rels = Dictionary(["r"], frozen=True)
    with pytest.raises(UnknownTokenError):
        load_triples(p, ents, rels)


def test_reload_is_deterministic(tmp_path):
    p = write(tmp_path / "t.txt", ["x\tr\ty", "y\ts\tz", "z\tr\tx"])
    a = load_triples(p)
    b = load_triples(p)
    assert np.array_equal(a[0], b[0])
    assert a[1] == b[1] and a[2] == b[2]


def test_dictionary_round_trip(tmp_path):
    d = Dictionary(["alpha", "beta", "gamma"])
    d.save(tmp_path / "d.dict")
    assert Dictionary.load(tmp_path / "d.dict") == d
    assert (tmp_path / "d.dict").read_text() == "0\talpha\n1\tbeta\n2\tgamma\n"


def test_augment_single_triple():
    out = augment_inverse(np.array([[0, 0, 1]]))
    assert {tuple(r) for r in out.tolist()} == {(0, 0, 1), (1, 1, 0)}


def test_augment_empty():
    assert augment_inverse(np.zeros((0, 3), dtype=np.int64)).shape == (0, 3)


def test_augment_rejects_odd_ids():
    with pytest.raises(KGError):
        augment_inverse(np.array([[0, 1, 2]]))


def test_augment_doubles_count():
    rng = np.random.default_rng(0)
    t = np.stack([rng.integers(50, size=40), 2 * rng.integers(5, size=40), rng.integers(50, size=40)], axis=1)
    assert len(augment_inverse(t)) == 2 * len(t)


def test_inverse_parity():
    assert inverse(0) == 1 and inverse(1) == 0 and inverse(6) == 7


def test_split_sizes():
    s = build_splits([[0, 0, 1]], [[1, 0, 2]], [[2, 0, 3]])
    assert [g.forward_count for g in (s.train, s.valid, s.test)] == [1, 2, 3]


def test_overlapping_valid_test_dedup():
    s = build_splits([[0, 0, 1]], [[1, 0, 2]], [[1, 0, 2], [2, 0, 0]])
    assert s.test.forward_count == 3
    assert len(s.test) == 6


def test_out_of_range_id():
    with pytest.raises(KGError):
        build_splits([[0, 0, 5]], [], [], entity_count=3, relation_count=2)


def test_neighbors_toy():
    # a=0, b=1, c=2; r0 forward id 0, inverse id 1
    g = KnowledgeGraph.from_triples([[0, 0, 1], [0, 0, 2]], 3, 2)
    assert g.neighbors(0, 0).tolist() == [1, 2]
    assert g.neighbors(1, 0).tolist() == []
    assert g.neighbors(1, 1).tolist() == [0]


def test_self_loop_kept_and_duplicates_removed():
    g = KnowledgeGraph.from_triples([[0, 0, 0], [0, 0, 1], [0, 0, 1]], 2, 2)
    assert g.neighbors(0, 0).tolist() == [0, 1]
    assert g.neighbors(0, 1).tolist() == [0]
    assert g.forward_count == 2


def test_load_dataset_shares_ids(tmp_path):
    write(tmp_path / "train.txt", ["a\tr\tb"])
    write(tmp_path / "valid.txt", ["b\ts\tc"])
    write(tmp_path / "test.txt", ["c\tr\ta"])
    splits, raw, ents, rels = load_dataset(tmp_path)
    assert ents.names == ["a", "b", "c"] and rels.names == ["r", "s"]
    assert splits.entity_count == 3 and splits.relation_count == 4
    assert raw["test"].tolist() == [[2, 0, 0]]


@st.composite
def raw_graph(draw):
    n = draw(st.integers(2, 12))
    m = draw(st.integers(1, 4))
    triple = st.tuples(st.integers(0, n - 1), st.integers(0, m - 1).map(lambda r: 2 * r), st.integers(0, n - 1))
    parts = [draw(st.lists(triple, max_size=25)) for _ in range(3)]
    return n, 2 * m, parts


@settings(max_examples=150, deadline=None)
@given(raw_graph())
def test_graph_invariants(data):
    n, m, (tr, va, te) = data
    s = build_splits(np.array(tr, dtype=np.int64), np.array(va, dtype=np.int64), np.array(te, dtype=np.int64), n, m)
    train, valid, test = (g.triple_set() for g in (s.train, s.valid, s.test))
    # nesting
    assert train <= valid <= test
    # inverse closure
    for g in (train, valid, test):
        assert all((t, r ^ 1, h) in g for h, r, t in g)
    # oracle equivalence of neighbors against a linear scan
    ref = augmented(tr) | augmented(va) | augmented(te)
    assert test == ref
    for h in range(n):
        for r in range(m):
            assert set(s.test.neighbors(h, r).tolist()) == scan_neighbors(ref, h, r)


def test_synthetic_neighbors_match_scan():
    splits, raw = make_synthetic_kg(seed=3)
    ref = augmented(np.concatenate([raw["train"], raw["valid"], raw["test"]]))
    rng = np.random.default_rng(0)
    for _ in range(300):
        h, r = int(rng.integers(splits.entity_count)), int(rng.integers(splits.relation_count))
        assert set(splits.test.neighbors(h, r).tolist()) == scan_neighbors(ref, h, r)


@pytest.mark.fullscale
def test_fb15k_statistics():
    import os

    root = os.environ.get("NNKG_DATA")
    if not root or not os.path.isdir(os.path.join(root, "FB15k")):
        pytest.skip("set NNKG_DATA to a directory holding FB15k/")
    splits, raw, ents, rels = load_dataset(os.path.join(root, "FB15k"))
    assert len(raw["train"]) == 483142
    assert len(ents) == 14951 and len(rels) == 1345
    total = sum(len(v) for v in raw.values())
    assert total == 592213
    assert 2 * total == 1184426
