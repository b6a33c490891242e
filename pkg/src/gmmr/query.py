"""Query computation DAGs, the s-expression grammar, structure templates and DNF rewriting.

Grammar::

    term := entity | "(p" rel term ")" | "(i" term term+ ")" | "(u" term term+ ")" | "(n" term ")"
    entity := "e" digits ;  rel := "r" digits
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Union as _U


class QueryError(ValueError):
    pass


class ParseError(QueryError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Anchor:
    entity: int

    def __str__(self):
        return f"e{self.entity}"


@dataclass(frozen=True)
class Projection:
    relation: int
    child: "QueryNode"

    def __str__(self):
        return f"(p r{self.relation} {self.child})"


@dataclass(frozen=True)
class Negation:
    child: "QueryNode"

    def __str__(self):
        return f"(n {self.child})"


@dataclass(frozen=True)
class _Nary:
    children: tuple

    tag = "?"

    def __post_init__(self):
        children = tuple(self.children)
        if len(children) < 2:
            raise QueryError(f"'{self.tag}' needs at least 2 children, got {len(children)}")
        # canonical child order -> deterministic hashing and serialization
        object.__setattr__(self, "children", tuple(sorted(children, key=str)))

    def __str__(self):
        return f"({self.tag} " + " ".join(str(c) for c in self.children) + ")"


@dataclass(frozen=True, eq=True)
class Intersection(_Nary):
    tag = "i"


@dataclass(frozen=True, eq=True)
class Union(_Nary):
    tag = "u"


QueryNode = _U[Anchor, Projection, Intersection, Union, Negation]


def serialize(q: QueryNode) -> str:
    return str(q)


def skeleton(q: QueryNode) -> str:
    """Serialized form with ids erased; equal skeletons mean identical computation shapes."""
    if isinstance(q, Anchor):
        return "e"
    if isinstance(q, Projection):
        return f"(p {skeleton(q.child)})"
    if isinstance(q, Negation):
        return f"(n {skeleton(q.child)})"
    return f"({q.tag} " + " ".join(skeleton(c) for c in q.children) + ")"


def children(q: QueryNode) -> tuple:
    if isinstance(q, Anchor):
        return ()
    if isinstance(q, (Projection, Negation)):
        return (q.child,)
    return q.children


def walk(q: QueryNode):
    """Post-order traversal."""
    for c in children(q):
        yield from walk(c)
    yield q


def anchors(q: QueryNode) -> list[int]:
    return [n.entity for n in walk(q) if isinstance(n, Anchor)]


def relations(q: QueryNode) -> list[int]:
    return [n.relation for n in walk(q) if isinstance(n, Projection)]


def has_union(q: QueryNode) -> bool:
    return any(isinstance(n, Union) for n in walk(q))


def has_negation(q: QueryNode) -> bool:
    return any(isinstance(n, Negation) for n in walk(q))


# ---------------------------------------------------------------- parser

_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def _tokenize(text: str):
    pos = 0
    for m in _TOKEN.finditer(text):
        gap = text[pos:m.start()]
        if gap.strip():
            raise ParseError(f"unexpected {gap.strip()!r}", _byte_offset(text, pos))
        yield m.group(), _byte_offset(text, m.start())
        pos = m.end()
    if text[pos:].strip():
        raise ParseError("trailing garbage", _byte_offset(text, pos))


def _byte_offset(text: str, char_index: int) -> int:
    return len(text[:char_index].encode("utf-8"))


def parse(text: str, num_entities: int | None = None, num_relations: int | None = None) -> QueryNode:
    """Parse an s-expression query. Optional vocabulary sizes turn unknown ids into errors."""
    tokens = list(_tokenize(text))
    end_offset = len(text.encode("utf-8"))
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else (None, end_offset)

    def take():
        nonlocal pos
        tok = peek()
        if tok[0] is None:
            raise ParseError("unexpected end of input", end_offset)
        pos += 1
        return tok

    def ident(prefix, limit, kind):
        tok, off = take()
        if not re.fullmatch(prefix + r"\d+", tok or ""):
            raise ParseError(f"expected {kind} token, got {tok!r}", off)
        idx = int(tok[1:])
        if limit is not None and idx >= limit:
            raise QueryError(f"unknown {kind} {tok!r} at byte {off}")
        return idx

    def term():
        tok, off = peek()
        if tok != "(":
            return Anchor(ident("e", num_entities, "entity"))
        take()
        op, op_off = take()
        if op == "p":
            rel = ident("r", num_relations, "relation")
            node = Projection(rel, term())
        elif op == "n":
            node = Negation(term())
        elif op in ("i", "u"):
            kids = []
            while peek()[0] not in (")", None):
                kids.append(term())
            if len(kids) < 2:
                raise ParseError(f"arity error: '{op}' needs at least 2 children, got {len(kids)}", op_off)
            node = Intersection(kids) if op == "i" else Union(kids)
        else:
            raise ParseError(f"unknown operator {op!r}", op_off)
        tok, off = take()
        if tok != ")":
            raise ParseError(f"expected ')', got {tok!r}", off)
        return node

    node = term()
    if pos != len(tokens):
        raise ParseError("trailing tokens", tokens[pos][1])
    return node


# ---------------------------------------------------------------- templates

# Skeletons: "a" = anchor slot, relations are numbered in post-order
TEMPLATE_SHAPES = {
    "1p": "(p a)",
    "2p": "(p (p a))",
    "3p": "(p (p (p a)))",
    "2i": "(i (p a) (p a))",
    "3i": "(i (p a) (p a) (p a))",
    "ip": "(p (i (p a) (p a)))",
    "pi": "(i (p (p a)) (p a))",
    "2u": "(u (p a) (p a))",
    "up": "(p (u (p a) (p a)))",
    "2in": "(i (p a) (n (p a)))",
    "3in": "(i (p a) (p a) (n (p a)))",
    "inp": "(p (i (p a) (n (p a))))",
    "pin": "(i (p (p a)) (n (p a)))",
    "pni": "(i (n (p (p a))) (p a))",
}
TEMPLATES = tuple(TEMPLATE_SHAPES)
EPFO_TEMPLATES = ("1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up")
NEGATION_TEMPLATES = ("2in", "3in", "inp", "pin", "pni")
# structures used only for validation/testing
EVAL_ONLY_TEMPLATES = ("ip", "pi", "2u", "up")


@dataclass(frozen=True)
class StructureTemplate:
    """Query skeleton; ``shape`` is a nested tuple tree of ("a",) / ("p", c) / ("i"|"u", *cs) / ("n", c)."""

    name: str
    shape: tuple

    @property
    def num_anchors(self) -> int:
        return _count(self.shape, "a")

    @property
    def num_relations(self) -> int:
        return _count(self.shape, "p")


def _count(shape, tag):
    return (shape[0] == tag) + sum(_count(c, tag) for c in shape[1:])


def _shape_tree(text: str) -> tuple:
    tokens = _TOKEN.findall(text)
    pos = 0

    def node():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok == "a":
            return ("a",)
        op = tokens[pos]
        pos += 1
        kids = []
        while tokens[pos] != ")":
            kids.append(node())
        pos += 1
        return (op, *kids)

    return node()


def get_template(name: str) -> StructureTemplate:
    if name not in TEMPLATE_SHAPES:
        raise QueryError(f"unknown template {name!r}")
    return StructureTemplate(name, _shape_tree(TEMPLATE_SHAPES[name]))


def instantiate_template(t: StructureTemplate | str, anchors: list[int], relations: list[int]) -> QueryNode:
    """Ground a template. Anchors fill leaves left to right; relations fill projections in post-order."""
    if isinstance(t, str):
        t = get_template(t)
    if len(anchors) != t.num_anchors or len(relations) != t.num_relations:
        raise QueryError(f"template {t.name} takes {t.num_anchors} anchors and {t.num_relations} "
                         f"relations, got {len(anchors)} and {len(relations)}")
    anchor_it, rel_it = iter(anchors), iter(relations)

    def build(shape):
        tag = shape[0]
        if tag == "a":
            return Anchor(next(anchor_it))
        kids = [build(c) for c in shape[1:]]
        if tag == "p":
            return Projection(next(rel_it), kids[0])
        if tag == "n":
            return Negation(kids[0])
        return Intersection(kids) if tag == "i" else Union(kids)

    return build(t.shape)


# ---------------------------------------------------------------- DNF

def to_dnf(q: QueryNode) -> list[QueryNode]:
    """Rewrite into a list of union-free branches whose answer sets union to q's."""
    branches = _dnf(q)
    seen, out = set(), []
    for b in branches:
        if b not in seen:
            seen.add(b)
            out.append(b)
    return out


def _dnf(q: QueryNode) -> list[QueryNode]:
    if isinstance(q, Anchor):
        return [q]
    if isinstance(q, Projection):
        return [Projection(q.relation, b) for b in _dnf(q.child)]
    if isinstance(q, Union):
        return [b for c in q.children for b in _dnf(c)]
    if isinstance(q, Intersection):
        options = [_dnf(c) for c in q.children]
        return [Intersection(combo) for combo in itertools.product(*options)]
    if isinstance(q, Negation):
        inner = _dnf(q.child)
        if len(inner) == 1:
            return [Negation(inner[0])]
        # De Morgan: not (b1 or b2 ...) == (not b1) and (not b2) ...
        return [Intersection([Negation(b) for b in inner])]
    raise TypeError(f"not a query node: {q!r}")
