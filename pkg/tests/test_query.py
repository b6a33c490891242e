import random

import pytest
from hypothesis import given, strategies as st

from gmmr import query as Q
from gmmr.oracle import answer, random_graph
from gmmr.query import (Anchor, Intersection, Negation, ParseError, Projection, QueryError, Union,
                        instantiate_template, parse, serialize, to_dnf)


def test_parse_1p():
    assert parse("(p r1 e5)") == Projection(1, Anchor(5))


def test_parse_2u():
    q = parse("(u (p r1 e1) (p r2 e2))")
    assert q == Union([Projection(1, Anchor(1)), Projection(2, Anchor(2))])


def test_parse_arity_error():
    with pytest.raises(ParseError, match="arity"):
        parse("(i (p r1 e1))")


@pytest.mark.parametrize("text,offset", [
    ("(p r1 e5", 8),
    ("(x r1 e5)", 1),
    ("(p e1 e5)", 3),
    ("(p r1 e5) e2", 10),
    ("(p r1 e5))", 9),
])
def test_parse_errors_carry_byte_offset(text, offset):
    with pytest.raises(ParseError) as info:
        parse(text)
    assert info.value.offset == offset


def test_parse_vocabulary_bounds():
    with pytest.raises(QueryError, match="unknown entity"):
        parse("(p r0 e9)", num_entities=5)
    with pytest.raises(QueryError, match="unknown relation"):
        parse("(p r3 e1)", num_entities=5, num_relations=2)


def test_children_are_order_normalized():
    a = parse("(i (p r2 e1) (p r0 e3))")
    b = parse("(i (p r0 e3) (p r2 e1))")
    assert a == b and serialize(a) == serialize(b) and hash(a) == hash(b)


def test_instantiate_examples():
    assert serialize(instantiate_template("1p", [0], [0])) == "(p r0 e0)"
    # child order is canonical, so compare as parsed nodes
    assert instantiate_template("2in", [0, 1], [0, 1]) == parse("(i (p r0 e0) (n (p r1 e1)))")
    assert serialize(instantiate_template("pni", [0, 1], [0, 1, 2])) == "(i (n (p r1 (p r0 e0))) (p r2 e1))"


def test_instantiate_wrong_counts():
    with pytest.raises(QueryError):
        instantiate_template("2p", [0, 1], [0, 1])


def test_unknown_template():
    with pytest.raises(QueryError, match="'9z'"):
        Q.get_template("9z")


def ground(name, rng, ne=20, nr=4):
    t = Q.get_template(name)
    return instantiate_template(t, [rng.randrange(ne) for _ in range(t.num_anchors)],
                                [rng.randrange(nr) for _ in range(t.num_relations)])


@pytest.mark.parametrize("name", Q.TEMPLATES)
def test_parse_serialize_roundtrip(name):
    rng = random.Random(name)
    for _ in range(20):
        try:
            q = ground(name, rng)
        except QueryError:
            continue   # duplicate children collapse below arity 2
        assert parse(serialize(q)) == q


def test_template_counts():
    assert len(Q.TEMPLATES) == 14
    assert set(Q.EPFO_TEMPLATES) | set(Q.NEGATION_TEMPLATES) == set(Q.TEMPLATES)
    assert Q.get_template("3in").num_anchors == 3 and Q.get_template("pin").num_relations == 3


def test_dnf_union_free_is_identity():
    q = parse("(p r0 e1)")
    assert to_dnf(q) == [q]


def test_dnf_up():
    q = parse("(p r3 (u (p r1 e1) (p r2 e2)))")
    assert set(to_dnf(q)) == {parse("(p r3 (p r1 e1))"), parse("(p r3 (p r2 e2))")}


def test_dnf_nested_intersection_of_unions():
    a, b, c, d = (parse(f"(p r{i} e{i})") for i in range(4))
    q = Intersection([Union([a, b]), Union([c, d])])
    branches = to_dnf(q)
    assert set(branches) == {Intersection([x, y]) for x in (a, b) for y in (c, d)}
    g = random_graph(30, 4, 120, seed=5)
    assert answer(q, g) == frozenset().union(*(answer(br, g) for br in branches))


def test_dnf_de_morgan():
    a, b = parse("(p r0 e0)"), parse("(p r1 e1)")
    q = Negation(Union([a, b]))
    assert to_dnf(q) == [Intersection([Negation(a), Negation(b)])]


# random query trees over the full grammar
def trees(depth=3):
    leaf = st.integers(0, 9).map(Anchor)
    return st.recursive(
        leaf,
        lambda kids: st.one_of(
            st.tuples(st.integers(0, 2), kids).map(lambda t: Projection(*t)),
            kids.map(Negation),
            st.lists(kids, min_size=2, max_size=3, unique_by=str).map(Intersection),
            st.lists(kids, min_size=2, max_size=3, unique_by=str).map(Union),
        ),
        max_leaves=6,
    )


@given(trees())
def test_dnf_has_no_union_and_preserves_answers(q):
    g = random_graph(10, 3, 30, seed=11)
    branches = to_dnf(q)
    assert branches and not any(Q.has_union(b) for b in branches)
    assert answer(q, g) == frozenset().union(*(answer(b, g) for b in branches))


@given(trees())
def test_serialize_roundtrip_property(q):
    assert parse(serialize(q)) == q
