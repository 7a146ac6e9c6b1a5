"""Neural logical operators and the query-embedding fold.

Each family provides a bundle with ``project``, ``intersect`` and ``negate``
working on batches of ``(B, d)`` vectors, each returning ``(out, cache)``
with a matching ``*_backward``. :class:`QueryModel` owns the entity and
relation tables plus one bundle (two for ``mlp-2vector``) and folds query
templates bottom-up through them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .numeric import (
    DTYPE,
    MLP,
    Conv1d,
    DimensionError,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    dropout_backward,
    dropout_forward,
    glorot,
    maxpool1d_backward,
    maxpool1d_forward,
    relu_backward,
    relu_forward,
    softmax_backward,
    softmax_forward,
)
from .query import (
    NEGATION_STRUCTURES,
    Anchor,
    Intersect,
    Negate,
    Project,
    QueryInstance,
    anchors_of,
    relations_of,
    slot_template,
    to_dnf,
)

FAMILIES = ("mlp", "mlp-mixer", "mlp-attention", "mlp-2vector", "cnn", "nln")

CNN_CHANNELS = 10
CNN_KERNEL = 6
CNN_POOL = 6


class UnsupportedOperatorError(NotImplementedError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    family: str = "mlp"
    embed_dim: int = 800
    mlp_layers: int = 2
    hidden_dim: int = 0  # 0: same as embed_dim
    mixer_blocks: int = 2
    mixer_dropout: float = 0.1
    nln_regularizer_weight: float = 0.1
    entity_init: str = "uniform"
    init_scale: float = 0.01

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError("embed_dim must be even and >= 2")
        if self.mlp_layers < 1:
            raise ConfigError("mlp_layers must be >= 1")
        if self.mixer_blocks < 1:
            raise ConfigError("mixer_blocks must be >= 1")
        if not 0.0 <= self.mixer_dropout < 1.0:
            raise ConfigError("mixer_dropout must be in [0, 1)")
        if self.nln_regularizer_weight < 0:
            raise ConfigError("nln_regularizer_weight must be >= 0")
        if self.entity_init not in ("uniform", "zero"):
            raise ConfigError("entity_init must be 'uniform' or 'zero'")
        if self.family == "cnn" and self.embed_dim < 2 * (CNN_KERNEL - 1) + CNN_POOL:
            raise ConfigError(f"cnn family needs embed_dim >= {2 * (CNN_KERNEL - 1) + CNN_POOL}")

    @property
    def hidden(self):
        return self.hidden_dim or self.embed_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def _split(dx, d):
    return dx[..., :d], dx[..., d:]


class Bundle(Module):
    """Common plumbing: ``trace`` records operator calls when set to a list."""

    supports_negation = True
    trace = None

    def _log(self, name):
        if self.trace is not None:
            self.trace.append(name)

    def intersect(self, inputs, train=False, rng=None):
        if len(inputs) < 2:
            raise DimensionError("intersection needs at least 2 inputs")
        acc = inputs[0]
        caches = []
        for x in inputs[1:]:
            acc, c = self.intersect_pair(acc, x, train, rng)
            caches.append(c)
        return acc, caches

    def intersect_backward(self, dout, caches):
        grads = []
        for c in reversed(caches):
            dout, dx = self.intersect_pair_backward(dout, c)
            grads.append(dx)
        grads.append(dout)
        return grads[::-1]

    def negate(self, s, train=False, rng=None):
        raise UnsupportedOperatorError(f"{type(self).__name__} has no negation operator")


class MLPBundle(Bundle):
    """k (affine + ReLU) blocks then a final affine, one network per operator."""

    def __init__(self, prefix, cfg, rng, relation_count=None, dtype=DTYPE):
        d, h, k = cfg.embed_dim, cfg.hidden, cfg.mlp_layers
        self.d = d
        self.proj = MLP(f"{prefix}.project", [2 * d] + [h] * k + [d], rng, dtype)
        self.inter = MLP(f"{prefix}.intersect", [2 * d] + [h] * k + [d], rng, dtype)
        self.neg = MLP(f"{prefix}.negate", [d] + [h] * k + [d], rng, dtype)

    def parameters(self):
        return self.proj.parameters() + self.inter.parameters() + self.neg.parameters()

    def project(self, s, r, rel_ids=None, train=False, rng=None):
        self._log("project")
        return self.proj.forward(np.concatenate([s, r], axis=-1))

    def project_backward(self, dout, cache):
        return _split(self.proj.backward(dout, cache), self.d)

    def intersect_pair(self, u, v, train=False, rng=None):
        self._log("intersect")
        return self.inter.forward(np.concatenate([u, v], axis=-1))

    def intersect_pair_backward(self, dout, cache):
        return _split(self.inter.backward(dout, cache), self.d)

    def negate(self, s, train=False, rng=None):
        self._log("negate")
        return self.neg.forward(s)

    def negate_backward(self, dout, cache):
        return self.neg.backward(dout, cache)


class AttentionBundle(MLPBundle):
    """MLP operators with a permutation-invariant attentive intersection.

    Each input is scored by a shared two-layer perceptron, the scores are
    softmaxed across inputs, and the output is the weighted sum of a shared
    linear map of the inputs.
    """

    def __init__(self, prefix, cfg, rng, relation_count=None, dtype=DTYPE):
        super().__init__(prefix, cfg, rng, relation_count, dtype)
        self.inter = None
        self.score = MLP(f"{prefix}.attention.score", [cfg.embed_dim, cfg.hidden, 1], rng, dtype)
        self.value = Linear(f"{prefix}.attention.value", cfg.embed_dim, cfg.embed_dim, rng, dtype)

    def parameters(self):
        return self.proj.parameters() + self.score.parameters() + self.value.parameters() + self.neg.parameters()

    def intersect(self, inputs, train=False, rng=None):
        if len(inputs) < 2:
            raise DimensionError("intersection needs at least 2 inputs")
        self._log("intersect")
        x = np.stack(inputs, axis=-2)  # (B, n, d)
        s, c_score = self.score.forward(x)  # (B, n, 1)
        a, c_soft = softmax_forward(s, axis=-2)
        vals, c_val = self.value.forward(x)
        return (a * vals).sum(axis=-2), (a, vals, c_score, c_soft, c_val)

    def intersect_backward(self, dout, cache):
        a, vals, c_score, c_soft, c_val = cache
        d_vals = a * dout[..., None, :]
        da = (vals * dout[..., None, :]).sum(axis=-1, keepdims=True)
        dx = self.value.backward(d_vals, c_val)
        dx = dx + self.score.backward(softmax_backward(da, c_soft), c_score)
        return [dx[..., i, :] for i in range(dx.shape[-2])]


class MixerBlock(Module):
    """Two d-vectors as two patches: per-patch affine, N mixer modules
    (layer norm, channel MLP, dropout, skip), mean over patches, affine."""

    def __init__(self, prefix, cfg, rng, dtype=DTYPE):
        d, h = cfg.embed_dim, cfg.hidden
        self.keep = 1.0 - cfg.mixer_dropout
        self.patch = Linear(f"{prefix}.patch", d, d, rng, dtype)
        self.norms = [LayerNorm(f"{prefix}.mixer{i}.norm", d, dtype) for i in range(cfg.mixer_blocks)]
        self.mlps = [MLP(f"{prefix}.mixer{i}.channel", [d, h, d], rng, dtype) for i in range(cfg.mixer_blocks)]
        self.head = Linear(f"{prefix}.head", d, d, rng, dtype)

    def parameters(self):
        ps = self.patch.parameters()
        for norm, mlp in zip(self.norms, self.mlps):
            ps += norm.parameters() + mlp.parameters()
        return ps + self.head.parameters()

    def forward(self, u, v, train=False, rng=None):
        x, c_patch = self.patch.forward(np.stack([u, v], axis=-2))  # (B, 2, d)
        c_mix = []
        for norm, mlp in zip(self.norms, self.mlps):
            y, c_norm = norm.forward(x)
            y, c_mlp = mlp.forward(y)
            y, mask = dropout_forward(y, self.keep, rng, train)
            x = x + y
            c_mix.append((c_norm, c_mlp, mask))
        out, c_head = self.head.forward(x.mean(axis=-2))
        return out, (c_patch, c_mix, c_head)

    def backward(self, dout, cache):
        c_patch, c_mix, c_head = cache
        dpool = self.head.backward(dout, c_head)
        dx = np.repeat(dpool[..., None, :] / 2, 2, axis=-2)
        for norm, mlp, (c_norm, c_mlp, mask) in zip(reversed(self.norms), reversed(self.mlps), reversed(c_mix)):
            dy = dropout_backward(dx, mask)
            dy = mlp.backward(dy, c_mlp)
            dx = dx + norm.backward(dy, c_norm)
        dx = self.patch.backward(dx, c_patch)
        return dx[..., 0, :], dx[..., 1, :]


class MixerBundle(Bundle):
    supports_negation = False

    def __init__(self, prefix, cfg, rng, relation_count=None, dtype=DTYPE):
        self.proj = MixerBlock(f"{prefix}.project", cfg, rng, dtype)
        self.inter = MixerBlock(f"{prefix}.intersect", cfg, rng, dtype)

    def parameters(self):
        return self.proj.parameters() + self.inter.parameters()

    def project(self, s, r, rel_ids=None, train=False, rng=None):
        self._log("project")
        return self.proj.forward(s, r, train, rng)

    def project_backward(self, dout, cache):
        return self.proj.backward(dout, cache)

    def intersect_pair(self, u, v, train=False, rng=None):
        self._log("intersect")
        return self.inter.forward(u, v, train, rng)

    def intersect_pair_backward(self, dout, cache):
        return self.inter.backward(dout, cache)

    def negate(self, s, train=False, rng=None):
        raise UnsupportedOperatorError("the mlp-mixer family has no negation operator: a mixer block needs two inputs")


class ConvEncoder(Module):
    """conv(1->10, 6) + ReLU, conv(10->10, 6) + ReLU, max-pool 6, flatten."""

    def __init__(self, prefix, d, rng, dtype=DTYPE):
        self.c1 = Conv1d(f"{prefix}.conv1", 1, CNN_CHANNELS, CNN_KERNEL, rng, dtype)
        self.c2 = Conv1d(f"{prefix}.conv2", CNN_CHANNELS, CNN_CHANNELS, CNN_KERNEL, rng, dtype)
        self.d = d
        self.out_dim = CNN_CHANNELS * ((d - 2 * (CNN_KERNEL - 1)) // CNN_POOL)

    def parameters(self):
        return self.c1.parameters() + self.c2.parameters()

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise DimensionError(f"cnn operator expects width {self.d}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        h, c1 = self.c1.forward(x.reshape(-1, 1, x.shape[-1]))
        h, m1 = relu_forward(h)
        h, c2 = self.c2.forward(h)
        h, m2 = relu_forward(h)
        h, cp = maxpool1d_forward(h, CNN_POOL)
        return h.reshape(*lead, -1), (x.shape, c1, m1, c2, m2, cp, h.shape)

    def backward(self, dout, cache):
        shape, c1, m1, c2, m2, cp, pooled = cache
        dh = maxpool1d_backward(dout.reshape(pooled), cp)
        dh = self.c2.backward(relu_backward(dh, m2), c2)
        dh = self.c1.backward(relu_backward(dh, m1), c1)
        return dh.reshape(shape)


class CNNBundle(Bundle):
    def __init__(self, prefix, cfg, rng, relation_count=None, dtype=DTYPE):
        d, h = cfg.embed_dim, cfg.hidden
        self.nets = {}
        for name, n_inputs in (("project", 2), ("intersect", 2), ("negate", 1)):
            enc = ConvEncoder(f"{prefix}.{name}", d, rng, dtype)
            head = MLP(f"{prefix}.{name}.fc", [n_inputs * enc.out_dim, h, h, d], rng, dtype)
            self.nets[name] = (enc, head)

    def parameters(self):
        return [p for enc, head in self.nets.values() for p in enc.parameters() + head.parameters()]

    def _two(self, name, u, v):
        self._log(name)
        enc, head = self.nets[name]
        fu, cu = enc.forward(u)
        fv, cv = enc.forward(v)
        out, ch = head.forward(np.concatenate([fu, fv], axis=-1))
        return out, (cu, cv, ch, fu.shape[-1])

    def _two_backward(self, name, dout, cache):
        enc, head = self.nets[name]
        cu, cv, ch, n = cache
        df = head.backward(dout, ch)
        return enc.backward(df[..., :n], cu), enc.backward(df[..., n:], cv)

    def project(self, s, r, rel_ids=None, train=False, rng=None):
        return self._two("project", s, r)

    def project_backward(self, dout, cache):
        return self._two_backward("project", dout, cache)

    def intersect_pair(self, u, v, train=False, rng=None):
        return self._two("intersect", u, v)

    def intersect_pair_backward(self, dout, cache):
        return self._two_backward("intersect", dout, cache)

    def negate(self, s, train=False, rng=None):
        self._log("negate")
        enc, head = self.nets["negate"]
        f, ce = enc.forward(s)
        out, ch = head.forward(f)
        return out, (ce, ch)

    def negate_backward(self, dout, cache):
        enc, head = self.nets["negate"]
        ce, ch = cache
        return enc.backward(head.backward(dout, ch), ce)


class NLNBundle(Bundle):
    """Per-relation matrix projection, AND-network intersection, MLP negation,
    and learnable logical-true/false anchors for the regularizer."""

    def __init__(self, prefix, cfg, rng, relation_count=None, dtype=DTYPE):
        if relation_count is None:
            raise ConfigError("nln family needs the relation count")
        d, h, k = cfg.embed_dim, cfg.hidden, cfg.mlp_layers
        self.d = d
        self.R = Parameter(f"{prefix}.project.R", glorot(rng, d, d, (relation_count, d, d), dtype))
        self.and1 = Linear(f"{prefix}.and.H1", 2 * d, d, rng, dtype)
        self.and2 = Parameter(f"{prefix}.and.H2", glorot(rng, d, d, dtype=dtype))
        self.neg = MLP(f"{prefix}.negate", [d] + [h] * k + [d], rng, dtype)
        self.T = Parameter(f"{prefix}.true", np.ones(d, dtype=dtype))
        self.F = Parameter(f"{prefix}.false", -np.ones(d, dtype=dtype))

    def parameters(self):
        return [self.R] + self.and1.parameters() + [self.and2] + self.neg.parameters() + [self.T, self.F]

    def project(self, s, r, rel_ids=None, train=False, rng=None):
        self._log("project")
        M = self.R.value[rel_ids]
        return np.einsum("bij,bj->bi", M, s), (s, rel_ids)

    def project_backward(self, dout, cache):
        s, rel_ids = cache
        M = self.R.value[rel_ids]
        np.add.at(self.R.grad, rel_ids, np.einsum("bi,bj->bij", dout, s))
        return np.einsum("bij,bi->bj", M, dout), np.zeros_like(dout)

    def and_forward(self, u, v):
        h, c1 = self.and1.forward(np.concatenate([u, v], axis=-1))
        h, m = relu_forward(h)
        return h @ self.and2.value, (c1, m, h)

    def and_backward(self, dout, cache):
        c1, m, h = cache
        self.and2.grad += h.reshape(-1, h.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
        dh = relu_backward(dout @ self.and2.value.T, m)
        return _split(self.and1.backward(dh, c1), self.d)

    def intersect_pair(self, u, v, train=False, rng=None):
        self._log("intersect")
        return self.and_forward(u, v)

    def intersect_pair_backward(self, dout, cache):
        return self.and_backward(dout, cache)

    def negate(self, s, train=False, rng=None):
        self._log("negate")
        return self.neg.forward(s)

    def negate_backward(self, dout, cache):
        return self.neg.backward(dout, cache)

    def regularizer(self, W):
        """Identity, annihilator, idempotence and complementation penalties
        summed over the rows of ``W``; returns ``(value, cache)``."""
        n = W.shape[0]
        T = np.broadcast_to(self.T.value, W.shape)
        F = np.broadcast_to(self.F.value, W.shape)
        not_w, c_not = self.neg.forward(W)
        terms = []
        total = 0.0
        for left, right, target in ((W, T, W), (W, F, F), (W, W, W), (W, not_w, F)):
            out, c_and = self.and_forward(left, right)
            val, c_sim = dissim_forward(out, target)
            total += float(val.sum())
            terms.append((c_and, c_sim))
        return total, (n, c_not, terms)

    def regularizer_backward(self, scale, cache):
        """Accumulate ``scale * d(reg)`` into operator params; return dW."""
        n, c_not, terms = cache
        dW = None
        dF = 0
        dT = 0
        d_not = None
        for i, (c_and, c_sim) in enumerate(terms):
            d_out, d_target = dissim_backward(scale, c_sim)
            d_left, d_right = self.and_backward(d_out, c_and)
            contrib = d_left.copy()
            if i == 0:
                dT = d_right.sum(axis=0)
                contrib += d_target
            elif i == 1:
                dF = d_right.sum(axis=0) + d_target.sum(axis=0)
            elif i == 2:
                contrib += d_right + d_target
            else:
                d_not = d_right
                dF = dF + d_target.sum(axis=0)
            dW = contrib if dW is None else dW + contrib
        dW = dW + self.neg.backward(d_not, c_not)
        self.T.grad += dT
        self.F.grad += dF
        return dW


def dissim_forward(x, y):
    """Row-wise ``1 - Sim(x, y)`` with ``Sim = 1 / (1 + ||x - y||)``."""
    diff = x - y
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return dist / (1.0 + dist), (diff, dist)


def dissim_backward(scale, cache):
    diff, dist = cache
    # d/d dist of dist/(1+dist) = 1/(1+dist)^2; d dist/dx = diff/dist
    safe = np.where(dist > 0, dist, 1.0)
    g = (scale / (1.0 + dist) ** 2 / safe)[..., None] * diff
    g = np.where((dist > 0)[..., None], g, 0.0).astype(diff.dtype, copy=False)
    return g, -g


BUNDLES = {
    "mlp": MLPBundle,
    "mlp-2vector": MLPBundle,
    "mlp-attention": AttentionBundle,
    "mlp-mixer": MixerBundle,
    "cnn": CNNBundle,
    "nln": NLNBundle,
}


class QueryModel(Module):
    """Embedding tables plus the operator bundle(s) of one family."""

    def __init__(self, cfg, entity_count, relation_count, rng=None, seed=0, dtype=DTYPE):
        self.cfg = cfg
        self.entity_count = entity_count
        self.relation_count = relation_count
        rng = rng if rng is not None else np.random.default_rng(seed)
        d = cfg.embed_dim
        if cfg.entity_init == "zero":
            ent = np.zeros((entity_count, d), dtype=dtype)
        else:
            ent = rng.uniform(-cfg.init_scale, cfg.init_scale, (entity_count, d)).astype(dtype)
        rel = rng.uniform(-cfg.init_scale, cfg.init_scale, (relation_count, d)).astype(dtype)
        self.entity = Parameter("entity", ent)
        self.relation = Parameter("relation", rel)
        n_bundles = 2 if cfg.family == "mlp-2vector" else 1
        names = ["ops"] if n_bundles == 1 else ["opsA", "opsB"]
        self.bundles = [BUNDLES[cfg.family](name, cfg, rng, relation_count, dtype) for name in names]

    @property
    def ops(self):
        return self.bundles[0]

    def parameters(self):
        return [self.entity, self.relation] + [p for b in self.bundles for p in b.parameters()]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- folding -------------------------------------------------------------

    def _fold(self, ops, node, anchors, rels, train, rng):
        if isinstance(node, Anchor):
            idx = anchors[:, node.entity]
            return self.entity.value[idx], ("e", idx)
        if isinstance(node, Project):
            s, c_child = self._fold(ops, node.child, anchors, rels, train, rng)
            ridx = rels[:, node.rel]
            out, c = ops.project(s, self.relation.value[ridx], ridx, train, rng)
            return out, ("p", c_child, ridx, c)
        if isinstance(node, Intersect):
            outs, c_children = zip(*(self._fold(ops, ch, anchors, rels, train, rng) for ch in node.children))
            out, c = ops.intersect(list(outs), train, rng)
            return out, ("i", c_children, c)
        if isinstance(node, Negate):
            s, c_child = self._fold(ops, node.child, anchors, rels, train, rng)
            out, c = ops.negate(s, train, rng)
            return out, ("n", c_child, c)
        raise TypeError(f"cannot fold {type(node).__name__} inside a conjunct")

    def _unfold(self, ops, node, dout, cache):
        kind = cache[0]
        if kind == "e":
            np.add.at(self.entity.grad, cache[1], dout)
        elif kind == "p":
            _, c_child, ridx, c = cache
            ds, dr = ops.project_backward(dout, c)
            np.add.at(self.relation.grad, ridx, dr)
            self._unfold(ops, node.child, ds, c_child)
        elif kind == "i":
            _, c_children, c = cache
            for child, dx, cc in zip(node.children, ops.intersect_backward(dout, c), c_children):
                self._unfold(ops, child, dx, cc)
        else:
            _, c_child, c = cache
            self._unfold(ops, node.child, ops.negate_backward(dout, c), c_child)

    def embed_batch(self, template, anchors, rels, train=False, rng=None, bundles=None):
        """Embed a batch of queries sharing one slot template.

        ``anchors`` is ``(B, n_anchors)`` and ``rels`` is ``(B, n_relations)``
        in post-order slot order. Returns one ``(B, d)`` array per DNF
        conjunct and a cache for :meth:`embed_batch_backward`. With several
        bundles the result is their element-wise mean; ``bundles`` restricts
        the fold to the given bundle indices.
        """
        anchors = np.asarray(anchors, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        conjuncts = to_dnf(template).conjuncts
        used = [self.bundles[i] for i in (bundles if bundles is not None else range(len(self.bundles)))]
        per_bundle = [[self._fold(ops, c, anchors, rels, train, rng) for c in conjuncts] for ops in used]
        if len(used) == 1:
            outs = [o for o, _ in per_bundle[0]]
        else:
            outs = [sum(per[i][0] for per in per_bundle) / len(used) for i in range(len(conjuncts))]
        return outs, (conjuncts, used, per_bundle)

    def embed_batch_backward(self, d_outs, cache):
        conjuncts, used, per_bundle = cache
        scale = 1.0 / len(used)
        for ops, per in zip(used, per_bundle):
            for node, (_, c), d in zip(conjuncts, per, d_outs):
                if d is None:
                    continue
                self._unfold(ops, node, d * scale if scale != 1.0 else d, c)

    def embed_query(self, query, train=False, rng=None, bundles=None):
        """Embed one query; returns a list of ``d``-vectors, one per conjunct."""
        root = query.root if isinstance(query, QueryInstance) else query
        outs, _ = self.embed_batch(
            slot_template(root), [anchors_of(root)], [relations_of(root)], train, rng, bundles
        )
        return [o[0] for o in outs]

    def check_supports(self, structures):
        if not all(b.supports_negation for b in self.bundles):
            bad = [s for s in structures if s in NEGATION_STRUCTURES]
            if bad:
                raise UnsupportedOperatorError(
                    f"{self.cfg.family} family cannot answer negation structures {bad}"
                )


def two_vector_embed(model, query):
    """Embed with each bundle of a two-bundle model separately and average
    the results conjunct by conjunct."""
    if len(model.bundles) != 2:
        raise ConfigError("two_vector_embed needs a model with two operator bundles")
    qa = model.embed_query(query, bundles=[0])
    qb = model.embed_query(query, bundles=[1])
    return [(a + b) / 2 for a, b in zip(qa, qb)]


def group_queries(queries):
    """Group query instances by slot template.

    Returns ``{key: (template, anchors (B, na), relations (B, nr), positions)}``
    where ``positions`` indexes back into ``queries``.
    """
    groups = {}
    for i, q in enumerate(queries):
        template = slot_template(q.root)
        key = template.sexpr()
        entry = groups.get(key)
        if entry is None:
            entry = groups[key] = (template, [], [], [])
        entry[1].append(q.anchors)
        entry[2].append(q.relations)
        entry[3].append(i)
    return {
        k: (t, np.array(a, dtype=np.int64), np.array(r, dtype=np.int64).reshape(len(a), -1), np.array(pos))
        for k, (t, a, r, pos) in groups.items()
    }
