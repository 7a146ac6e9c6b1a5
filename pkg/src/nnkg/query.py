"""First-order query computation graphs.

A query is a tree of :class:`Anchor`, :class:`Project`, :class:`Intersect`,
:class:`Negate` and :class:`Union` nodes rooted at the target variable. The
fourteen supported shapes are named by their usual tags (``1p`` ... ``pni``).

Intersection and union children are kept in canonical order (sorted by their
serialized text) so that one logical query has exactly one representation.
Anchor and relation lists are read off the canonical tree in post-order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property


class QueryError(Exception):
    pass


class QueryParseError(QueryError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class StructureError(QueryError):
    pass


@dataclass(frozen=True)
class Anchor:
    entity: int

    def sexpr(self):
        return f"(e {self.entity})"


@dataclass(frozen=True)
class Project:
    child: "Node"
    rel: int

    def sexpr(self):
        return f"(p {self.rel} {self.child.sexpr()})"


@dataclass(frozen=True)
class Intersect:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise StructureError("intersection needs at least 2 inputs")
        object.__setattr__(self, "children", _canonical(self.children))

    def sexpr(self):
        return "(i " + " ".join(c.sexpr() for c in self.children) + ")"


@dataclass(frozen=True)
class Negate:
    child: "Node"

    def sexpr(self):
        return f"(n {self.child.sexpr()})"


@dataclass(frozen=True)
class Union:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise StructureError("union needs at least 2 inputs")
        object.__setattr__(self, "children", _canonical(self.children))

    def sexpr(self):
        return "(u " + " ".join(c.sexpr() for c in self.children) + ")"


Node = Anchor | Project | Intersect | Negate | Union


def _canonical(children):
    return tuple(sorted(children, key=lambda c: c.sexpr()))


def _unsorted(cls, children):
    """Build an Intersect/Union keeping ``children`` in the given order."""
    node = object.__new__(cls)
    object.__setattr__(node, "children", tuple(children))
    return node


def slot_template(node):
    """Copy of ``node`` with ids replaced by their post-order slot numbers.

    Child order is preserved, so queries whose templates serialize equally
    fold through the operators in exactly the same order.
    """
    counters = [0, 0]

    def walk(n):
        if isinstance(n, Anchor):
            counters[0] += 1
            return Anchor(counters[0] - 1)
        if isinstance(n, Project):
            child = walk(n.child)
            counters[1] += 1
            return Project(child, counters[1] - 1)
        if isinstance(n, Negate):
            return Negate(walk(n.child))
        return _unsorted(type(n), [walk(c) for c in n.children])

    return walk(node)


def shape(node):
    """Order-insensitive shape string, ignoring ids."""
    if isinstance(node, Anchor):
        return "e"
    if isinstance(node, Project):
        return f"p({shape(node.child)})"
    if isinstance(node, Negate):
        return f"n({shape(node.child)})"
    tag = "i" if isinstance(node, Intersect) else "u"
    return f"{tag}(" + ",".join(sorted(shape(c) for c in node.children)) + ")"


def ordered_shape(node):
    """Shape string in stored child order; equal strings fold identically."""
    if isinstance(node, Anchor):
        return "e"
    if isinstance(node, Project):
        return f"p({ordered_shape(node.child)})"
    if isinstance(node, Negate):
        return f"n({ordered_shape(node.child)})"
    tag = "i" if isinstance(node, Intersect) else "u"
    return f"{tag}(" + ",".join(ordered_shape(c) for c in node.children) + ")"


def postorder(node):
    if isinstance(node, (Project, Negate)):
        yield from postorder(node.child)
    elif isinstance(node, (Intersect, Union)):
        for c in node.children:
            yield from postorder(c)
    yield node


def anchors_of(node):
    return [n.entity for n in postorder(node) if isinstance(n, Anchor)]


def relations_of(node):
    return [n.rel for n in postorder(node) if isinstance(n, Project)]


# Builders take anchors/relations in figure order: branch by branch, each
# branch's relations in the order they are applied.
def _p(a, *rels):
    node = Anchor(a)
    for r in rels:
        node = Project(node, r)
    return node


_BUILDERS = {
    "1p": (1, 1, lambda a, r: _p(a[0], r[0])),
    "2p": (1, 2, lambda a, r: _p(a[0], r[0], r[1])),
    "3p": (1, 3, lambda a, r: _p(a[0], r[0], r[1], r[2])),
    "2i": (2, 2, lambda a, r: Intersect((_p(a[0], r[0]), _p(a[1], r[1])))),
    "3i": (3, 3, lambda a, r: Intersect((_p(a[0], r[0]), _p(a[1], r[1]), _p(a[2], r[2])))),
    "ip": (2, 3, lambda a, r: Project(Intersect((_p(a[0], r[0]), _p(a[1], r[1]))), r[2])),
    "pi": (2, 3, lambda a, r: Intersect((_p(a[0], r[0], r[1]), _p(a[1], r[2])))),
    "2u": (2, 2, lambda a, r: Union((_p(a[0], r[0]), _p(a[1], r[1])))),
    "up": (2, 3, lambda a, r: Project(Union((_p(a[0], r[0]), _p(a[1], r[1]))), r[2])),
    "2in": (2, 2, lambda a, r: Intersect((_p(a[0], r[0]), Negate(_p(a[1], r[1]))))),
    "3in": (3, 3, lambda a, r: Intersect((_p(a[0], r[0]), _p(a[1], r[1]), Negate(_p(a[2], r[2]))))),
    "inp": (2, 3, lambda a, r: Project(Intersect((_p(a[0], r[0]), Negate(_p(a[1], r[1])))), r[2])),
    "pin": (2, 3, lambda a, r: Intersect((_p(a[0], r[0], r[1]), Negate(_p(a[1], r[2]))))),
    "pni": (2, 3, lambda a, r: Intersect((Negate(_p(a[0], r[0], r[1])), _p(a[1], r[2])))),
}

STRUCTURES = tuple(_BUILDERS)
EPFO_STRUCTURES = ("1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up")
NEGATION_STRUCTURES = ("2in", "3in", "inp", "pin", "pni")
TRAIN_STRUCTURES = ("1p", "2p", "3p", "2i", "3i")
UNION_STRUCTURES = ("2u", "up")


def arity(tag):
    """``(n_anchors, n_relations)`` for a structure tag."""
    try:
        n_a, n_r, _ = _BUILDERS[tag]
    except KeyError:
        raise StructureError(f"unknown query structure {tag!r}") from None
    return n_a, n_r


_SHAPE_TO_TAG = {shape(b(list(range(na)), list(range(nr)))): tag for tag, (na, nr, b) in _BUILDERS.items()}


def structure_of(node):
    """Recover the structure tag of a tree, or raise :class:`StructureError`."""
    try:
        return _SHAPE_TO_TAG[shape(node)]
    except KeyError:
        raise StructureError(f"query shape {shape(node)} is not one of the supported structures") from None


@dataclass(frozen=True)
class QueryInstance:
    structure: str
    root: Node

    def __post_init__(self):
        found = structure_of(self.root)
        if found != self.structure:
            raise StructureError(f"tree has shape {found}, not {self.structure}")

    @classmethod
    def from_root(cls, root):
        return cls(structure_of(root), root)

    @cached_property
    def anchors(self):
        return anchors_of(self.root)

    @cached_property
    def relations(self):
        return relations_of(self.root)

    def sexpr(self):
        return self.root.sexpr()

    def __str__(self):
        return self.sexpr()


def build_structure(tag, anchors, relations):
    """Ground structure ``tag`` with anchors/relations given in figure order.

    >>> build_structure("2p", [17], [2, 4]).sexpr()
    '(p 4 (p 2 (e 17)))'
    """
    n_a, n_r = arity(tag)
    anchors, relations = list(anchors), list(relations)
    if len(anchors) != n_a or len(relations) != n_r:
        raise StructureError(
            f"{tag} needs {n_a} anchors and {n_r} relations, got {len(anchors)} and {len(relations)}"
        )
    return QueryInstance(tag, _BUILDERS[tag][2]([int(a) for a in anchors], [int(r) for r in relations]))


@dataclass(frozen=True)
class DnfQuery:
    conjuncts: tuple

    def __len__(self):
        return len(self.conjuncts)

    def __iter__(self):
        return iter(self.conjuncts)


def _dnf(node):
    if isinstance(node, Anchor):
        return [node]
    if isinstance(node, Project):
        inner = _dnf(node.child)
        if len(inner) == 1 and inner[0] is node.child:
            return [node]
        return [Project(c, node.rel) for c in inner]
    if isinstance(node, Negate):
        inner = _dnf(node.child)
        if len(inner) > 1:
            raise StructureError("union under negation is not supported")
        return [node if inner[0] is node.child else Negate(inner[0])]
    if isinstance(node, Union):
        return [c for child in node.children for c in _dnf(child)]
    # intersection distributes over the unions in its children
    combos = [[]]
    for child in node.children:
        combos = [prev + [c] for prev in combos for c in _dnf(child)]
    if len(combos) == 1 and all(a is b for a, b in zip(combos[0], node.children)):
        return [node]
    return [Intersect(tuple(c)) for c in combos]


def to_dnf(query):
    """Lift every union to the root; returns the union-free conjuncts."""
    root = query.root if isinstance(query, QueryInstance) else query
    return DnfQuery(tuple(_dnf(root)))


def has_union(node):
    return any(isinstance(n, Union) for n in postorder(node))


def ground_truth_answers(graph, query):
    """Exact answer set of ``query`` on ``graph`` by post-order traversal."""
    root = query.root if isinstance(query, QueryInstance) else query
    return frozenset(_answers(graph, root))


def _answers(graph, node):
    if isinstance(node, Anchor):
        return {node.entity}
    if isinstance(node, Project):
        out = set()
        for e in _answers(graph, node.child):
            out.update(graph.neighbors(e, node.rel).tolist())
        return out
    if isinstance(node, Intersect):
        sets = [_answers(graph, c) for c in node.children]
        sets.sort(key=len)
        return set.intersection(*sets)
    if isinstance(node, Negate):
        return set(range(graph.entity_count)) - _answers(graph, node.child)
    return set().union(*(_answers(graph, c) for c in node.children))


# -- text form ---------------------------------------------------------------

_ARITY = {"e": (1, 1), "p": (2, 2), "i": (2, 3), "u": (2, 2), "n": (1, 1)}


def _tokenize(text):
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()":
            yield c, i
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            yield text[i:j], i
            i = j


def parse_node(text):
    """Parse the s-expression grammar into a tree (no structure check)."""
    data = text.encode("utf-8")
    toks = [(t, len(text[:off].encode("utf-8"))) for t, off in _tokenize(text)]
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, len(data))

    def take(expected=None):
        nonlocal pos
        tok, off = peek()
        if tok is None:
            raise QueryParseError("unexpected end of input", off)
        if expected is not None and tok != expected:
            raise QueryParseError(f"expected {expected!r}, got {tok!r}", off)
        pos += 1
        return tok, off

    def integer():
        tok, off = take()
        if tok in ("(", ")") or not tok.lstrip("+").isdigit():
            raise QueryParseError(f"expected a non-negative integer, got {tok!r}", off)
        return int(tok)

    def expr():
        take("(")
        op, off = take()
        if op == "e":
            node = Anchor(integer())
        elif op == "p":
            rel = integer()
            node = Project(expr(), rel)
        elif op == "n":
            node = Negate(expr())
        elif op in ("i", "u"):
            children = [expr(), expr()]
            while peek()[0] == "(":
                children.append(expr())
            if op == "u" and len(children) > 2 or op == "i" and len(children) > 3:
                raise QueryParseError(f"too many operands for {op!r}", off)
            node = Intersect(tuple(children)) if op == "i" else Union(tuple(children))
        elif op in ("a", "forall", "A"):
            raise QueryParseError("universal quantification is not supported", off)
        else:
            raise QueryParseError(f"unknown operator {op!r}", off)
        take(")")
        return node

    node = expr()
    tok, off = peek()
    if tok is not None:
        raise QueryParseError(f"trailing input {tok!r}", off)
    return node


def parse_query(text):
    """Parse one query line and identify its structure."""
    return QueryInstance.from_root(parse_node(text))


def serialize_query(query):
    return query.sexpr()
