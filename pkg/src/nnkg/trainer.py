"""Negative-sampling margin objective, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .numeric import Adam, NonFiniteGradientError, logsigmoid_backward, logsigmoid_forward
from .operators import ModelConfig, NLNBundle, QueryModel
from .query import slot_template

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NumericFailure(TrainingError):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    margin: float = 24.0
    negatives: int = 128
    batch_size: int = 512
    learning_rate: float = 1e-4
    iterations: int = 300_000
    eval_every: int = 10_000
    checkpoint_every: int = 0
    seed: int = 0
    structure_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if any(w < 0 for w in self.structure_weights.values()):
            raise ValueError("structure weights must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


# -- objective ------------------------------------------------------------------

def _conjunct_distances(qs, v):
    """Distances from rows ``v`` (B, ..., d) to each conjunct (B, d).

    Returns ``(dist (C, B, ...), diff (C, B, ..., d))``.
    """
    q = np.stack(qs)  # (C, B, d)
    extra = v.ndim - 2
    qb = q.reshape(q.shape[:2] + (1,) * extra + q.shape[2:])
    diff = qb - v[None]
    return np.sqrt((diff * diff).sum(axis=-1)), diff


def margin_loss_forward(qs, pos, neg, gamma):
    """Mean over the batch of
    ``-log σ(γ - D(v)) - 1/k Σ_j log σ(D(v'_j) - γ)`` with ``D`` the minimum
    Euclidean distance over the query's conjunct embeddings.

    ``qs`` is a list of ``(B, d)`` conjunct embeddings, ``pos`` is ``(B, d)``
    and ``neg`` is ``(B, k, d)``.
    """
    if neg.shape[1] == 0:
        raise ValueError("need at least one negative sample")
    dp_all, diff_p = _conjunct_distances(qs, pos)  # (C, B)
    dn_all, diff_n = _conjunct_distances(qs, neg)  # (C, B, k)
    cp = dp_all.argmin(axis=0)
    cn = dn_all.argmin(axis=0)
    dp = np.take_along_axis(dp_all, cp[None], 0)[0]
    dn = np.take_along_axis(dn_all, cn[None], 0)[0]
    lp, c_lp = logsigmoid_forward(gamma - dp)
    ln, c_ln = logsigmoid_forward(dn - gamma)
    per_query = -lp - ln.mean(axis=-1)
    loss = float(per_query.mean())
    return loss, (len(qs), cp, cn, dp, dn, diff_p, diff_n, c_lp, c_ln, per_query)


def margin_loss_backward(scale, cache):
    """Gradients of ``scale * loss`` w.r.t. ``(qs, pos, neg)``."""
    n_conj, cp, cn, dp, dn, diff_p, diff_n, c_lp, c_ln, _ = cache
    B, k = dn.shape
    g_dp = logsigmoid_backward(np.full_like(dp, scale / B), c_lp)  # d(-lp)/d dp
    g_dn = -logsigmoid_backward(np.full_like(dn, scale / (B * k)), c_ln)
    sp = np.where(dp > 0, dp, 1.0)
    sn = np.where(dn > 0, dn, 1.0)
    wp = np.where(dp > 0, g_dp / sp, 0.0).astype(diff_p.dtype, copy=False)
    wn = np.where(dn > 0, g_dn / sn, 0.0).astype(diff_n.dtype, copy=False)
    dqs = []
    bidx = np.arange(B)
    gp = wp[:, None] * diff_p[cp, bidx]  # gradient w.r.t. q from the positive term
    gn = wn[..., None] * np.take_along_axis(diff_n, cn[None, ..., None], 0)[0]
    for c in range(n_conj):
        dq = np.where((cp == c)[:, None], gp, 0) + np.where((cn == c)[..., None], gn, 0).sum(axis=1)
        dqs.append(dq.astype(gp.dtype, copy=False))
    return dqs, -gp, -gn


def loss(query_embs, positive, negatives, entity_table, gamma):
    """Objective for one query given its conjunct embeddings and entity ids."""
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.size == 0:
        raise ValueError("need at least one negative sample")
    qs = [np.asarray(q)[None] for q in query_embs]
    pos = entity_table[[positive]]
    neg = entity_table[negatives][None]
    value, _ = margin_loss_forward(qs, pos, neg, gamma)
    return value


def sample_negatives(answer_set, entity_count, k, rng):
    """``k`` ids drawn uniformly with replacement from the complement of
    ``answer_set``."""
    answers = np.fromiter(answer_set, dtype=np.int64) if not isinstance(answer_set, np.ndarray) else answer_set
    if len(np.unique(answers)) >= entity_count:
        raise ValueError("every entity is an answer; no negative can be drawn")
    if 2 * len(answers) > entity_count:
        comp = np.setdiff1d(np.arange(entity_count), answers)
        return comp[rng.integers(len(comp), size=k)]
    out = rng.integers(entity_count, size=k)
    bad = np.isin(out, answers)
    while bad.any():
        out[bad] = rng.integers(entity_count, size=int(bad.sum()))
        bad = np.isin(out, answers)
    return out


def _sample_negatives_batch(answer_lists, entity_count, k, rng):
    """Row ``i`` holds ``k`` negatives for the answer array ``answer_lists[i]``.

    Rows whose answers cover more than half of the entities (typical for
    negation queries) draw from the explicit complement instead of rejecting.
    """
    B = len(answer_lists)
    out = rng.integers(entity_count, size=(B, k))
    dense = [i for i, a in enumerate(answer_lists) if 2 * len(a) > entity_count]
    for i in dense:
        comp = np.setdiff1d(np.arange(entity_count), answer_lists[i])
        if len(comp) == 0:
            raise ValueError("every entity is an answer; no negative can be drawn")
        out[i] = comp[rng.integers(len(comp), size=k)]
    keys = np.concatenate([a + i * entity_count for i, a in enumerate(answer_lists)]) if B else np.zeros(0, np.int64)
    flat_base = (np.arange(B) * entity_count)[:, None]
    bad = np.isin(out + flat_base, keys)
    while bad.any():
        out[bad] = rng.integers(entity_count, size=int(bad.sum()))
        bad = np.isin(out + flat_base, keys)
    return out


# -- training loop ----------------------------------------------------------------

class _Pool:
    """Training queries of one structure, pre-split by slot template."""

    def __init__(self, samples):
        self.samples = samples
        self.keys = []
        self.templates = {}
        self.anchors = []
        self.relations = []
        self.answers = []
        for s in samples:
            t = slot_template(s.query.root)
            key = t.sexpr()
            self.templates.setdefault(key, t)
            self.keys.append(key)
            self.anchors.append(s.query.anchors)
            self.relations.append(s.query.relations)
            self.answers.append(np.array(sorted(s.answers_train), dtype=np.int64))

    def __len__(self):
        return len(self.samples)


class Trainer:
    """Owns a model, its optimizer, the RNG stream and the iteration count.

    ``train_queries`` maps structure tag to a list of :class:`QuerySample`.
    """

    def __init__(self, model, train_queries, cfg, optimizer=None, rng=None):
        self.model = model
        self.cfg = cfg
        self.optimizer = optimizer or Adam(model.parameters(), lr=cfg.learning_rate)
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.history = []
        self.set_queries(train_queries)

    def set_queries(self, train_queries):
        pools = {tag: _Pool(list(s)) for tag, s in sorted(train_queries.items()) if len(s)}
        self.model.check_supports(list(pools))
        self.structures = list(pools)
        self.pools = [pools[t] for t in self.structures]
        if self.structures:
            w = np.array([self.cfg.structure_weights.get(t, 1.0) for t in self.structures], dtype=np.float64)
            if w.sum() <= 0:
                raise ValueError("structure weights sum to zero")
            self.weights = w / w.sum()

    def _assemble(self):
        cfg, rng = self.cfg, self.rng
        B = cfg.batch_size
        picks = rng.choice(len(self.structures), size=B, p=self.weights)
        groups = {}
        for s_idx in range(len(self.structures)):
            n = int(np.count_nonzero(picks == s_idx))
            if n == 0:
                continue
            pool = self.pools[s_idx]
            for qi in rng.integers(len(pool), size=n):
                key = (s_idx, pool.keys[qi])
                groups.setdefault(key, []).append(int(qi))
        batch = []
        for (s_idx, key), qis in sorted(groups.items()):
            pool = self.pools[s_idx]
            answers = [pool.answers[q] for q in qis]
            pos = np.array([a[rng.integers(len(a))] for a in answers], dtype=np.int64)
            neg = _sample_negatives_batch(answers, self.model.entity_count, cfg.negatives, rng)
            batch.append((
                pool.templates[key],
                np.array([pool.anchors[q] for q in qis], dtype=np.int64),
                np.array([pool.relations[q] for q in qis], dtype=np.int64),
                pos,
                neg,
            ))
        return batch

    def step(self):
        """One optimizer step over a freshly assembled batch; returns the loss."""
        model, cfg = self.model, self.cfg
        batch = self._assemble()
        B = sum(len(b[3]) for b in batch)
        E = model.entity
        total = 0.0
        reg_total = 0.0
        nln = model.ops if isinstance(model.ops, NLNBundle) else None
        lam = model.cfg.nln_regularizer_weight
        for template, anchors, rels, pos, neg in batch:
            qs, cache = model.embed_batch(template, anchors, rels, train=True, rng=self.rng)
            value, lcache = margin_loss_forward(qs, E.value[pos], E.value[neg], cfg.margin)
            weight = len(pos) / B
            total += weight * value
            dqs, dpos, dneg = margin_loss_backward(weight, lcache)
            if nln is not None and lam > 0:
                W = np.concatenate(qs, axis=0)
                reg, rcache = nln.regularizer(W)
                reg_total += reg
                dW = nln.regularizer_backward(lam, rcache)
                n = len(pos)
                dqs = [dq + dW[i * n:(i + 1) * n] for i, dq in enumerate(dqs)]
            np.add.at(E.grad, pos, dpos)
            np.add.at(E.grad, neg.ravel(), dneg.reshape(-1, dneg.shape[-1]))
            model.embed_batch_backward(dqs, cache)
        value = total + lam * reg_total
        if not math.isfinite(value):
            raise NumericFailure(f"non-finite loss {value} at iteration {self.iteration}")
        try:
            self.optimizer.step()
        except NonFiniteGradientError as e:
            raise NumericFailure(f"iteration {self.iteration}: {e}") from e
        self.iteration += 1
        return value

    def run(self, iterations=None, on_eval=None, on_checkpoint=None):
        """Train for ``iterations`` more steps (default: to ``cfg.iterations``).

        ``on_eval(trainer)`` fires every ``eval_every`` steps and may return a
        dict of metrics for the log; ``on_checkpoint(trainer)`` fires every
        ``checkpoint_every`` steps.
        """
        if iterations is None:
            iterations = max(self.cfg.iterations - self.iteration, 0)
        if iterations and not self.structures:
            raise TrainingError("no training queries")
        for _ in range(iterations):
            value = self.step()
            entry = {"iteration": self.iteration, "loss": value}
            if on_eval is not None and self.cfg.eval_every and self.iteration % self.cfg.eval_every == 0:
                entry.update(on_eval(self) or {})
            self.history.append(entry)
            if on_checkpoint is not None and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                on_checkpoint(self)
        return self.history


def train(model, train_queries, cfg, iterations=None, on_eval=None):
    """Convenience wrapper: build a :class:`Trainer` and run it."""
    trainer = Trainer(model, train_queries, cfg)
    trainer.run(iterations, on_eval=on_eval)
    return trainer


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"NNKG"
VERSION = 1


def _write_array(buf, arr):
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf.append(struct.pack("<Q", arr.size))
    buf.append(data)


def save_checkpoint(path, model, trainer=None, train_cfg=None, include_optimizer=True):
    """Write parameters (and optimizer/RNG state when ``trainer`` is given)."""
    params = model.parameters()
    opt = trainer.optimizer if trainer is not None and include_optimizer else None
    header = {
        "family": model.cfg.family,
        "embed_dim": model.cfg.embed_dim,
        "entity_count": model.entity_count,
        "relation_count": model.relation_count,
        "model_config": model.cfg.to_dict(),
        "train_config": (train_cfg or (trainer.cfg if trainer else None)).to_dict()
        if (train_cfg or trainer) else None,
        "manifest": [[p.name, list(p.shape)] for p in params],
        "iteration": trainer.iteration if trainer else 0,
        "rng_state": trainer.rng.bit_generator.state if trainer else None,
        "optimizer": None if opt is None else {
            "t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        },
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for p in params:
        _write_array(buf, p.value)
    if opt is not None:
        for m, v in zip(opt.m, opt.v):
            _write_array(buf, m)
            _write_array(buf, v)
    body = b"".join(buf)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


@dataclass
class Checkpoint:
    header: dict
    model: QueryModel
    moments: list | None

    @property
    def iteration(self):
        return self.header["iteration"]

    def train_config(self):
        tc = self.header.get("train_config")
        return TrainConfig.from_dict(tc) if tc else None

    def restore_trainer(self, train_queries, cfg=None):
        """Rebuild a :class:`Trainer` that continues exactly where this left off."""
        cfg = cfg or self.train_config()
        if cfg is None:
            raise CheckpointError("checkpoint has no training config")
        opt_state = self.header.get("optimizer")
        opt = Adam(self.model.parameters(), lr=cfg.learning_rate)
        if opt_state is not None:
            opt.t = opt_state["t"]
            opt.beta1, opt.beta2, opt.eps = opt_state["beta1"], opt_state["beta2"], opt_state["eps"]
            opt.m = [m for m, _ in self.moments]
            opt.v = [v for _, v in self.moments]
        rng = np.random.default_rng()
        if self.header.get("rng_state") is not None:
            rng.bit_generator.state = self.header["rng_state"]
        trainer = Trainer(self.model, train_queries, cfg, optimizer=opt, rng=rng)
        trainer.iteration = self.iteration
        return trainer


def load_checkpoint(path, expect_config=None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``expect_config`` (a :class:`ModelConfig`) makes family/dimension
    mismatches an error.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an NNKG checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, head_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: integrity check failed (truncated or corrupted file)")
    off = 12
    header = json.loads(body[off:off + head_len].decode("utf-8"))
    off += head_len
    cfg = ModelConfig.from_dict(header["model_config"])
    if expect_config is not None:
        for key in ("family", "embed_dim"):
            if getattr(expect_config, key) != getattr(cfg, key):
                raise CheckpointError(
                    f"{path}: checkpoint {key}={getattr(cfg, key)!r} but config says {getattr(expect_config, key)!r}"
                )
    model = QueryModel(cfg, header["entity_count"], header["relation_count"], seed=0)
    params = model.parameters()
    manifest = header["manifest"]
    if [[p.name, list(p.shape)] for p in params] != manifest:
        raise CheckpointError(f"{path}: parameter manifest does not match the {cfg.family} architecture")

    def read(shape):
        nonlocal off
        (count,) = struct.unpack_from("<Q", body, off)
        off += 8
        if count != int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor size {count} does not match shape {shape}")
        end = off + 4 * count
        if end > len(body):
            raise CheckpointError(f"{path}: truncated tensor data")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off = end
        return arr

    for p in params:
        p.value[...] = read(p.shape)
    moments = None
    if header.get("optimizer") is not None:
        moments = [(read(p.shape), read(p.shape)) for p in params]
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} unexpected trailing bytes")
    return Checkpoint(header, model, moments)
