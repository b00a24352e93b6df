"""First-order queries over a relational schema, with active-domain semantics.

Quantifiers range over the active domain of the instance under evaluation,
never over the whole data domain.  Evaluation is total: a substitution may
map a free variable to a value outside the active domain, in which case
relational atoms over it are simply false and equalities compare by value.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Union

from .core import Instance, Schema, SchemaError, Substitution, UnboundVariableError, adom


class Query:
    """Base class for query AST nodes."""

    __slots__ = ()

    def __and__(self, other: "Query") -> "Query":
        return And(self, other)

    def __or__(self, other: "Query") -> "Query":
        return Or(self, other)

    def __invert__(self) -> "Query":
        return Not(self)


@dataclass(frozen=True)
class TrueQ(Query):
    __slots__ = ()


@dataclass(frozen=True)
class Rel(Query):
    relation: str
    args: tuple
    __slots__ = ("relation", "args")


@dataclass(frozen=True)
class Not(Query):
    body: Query
    __slots__ = ("body",)


@dataclass(frozen=True)
class And(Query):
    left: Query
    right: Query
    __slots__ = ("left", "right")


@dataclass(frozen=True)
class Exists(Query):
    var: str
    body: Query
    __slots__ = ("var", "body")


@dataclass(frozen=True)
class Eq(Query):
    left: Union[int, str]
    right: Union[int, str]
    __slots__ = ("left", "right")


TRUE = TrueQ()
FALSE = Not(TRUE)


def rel(relation: str, *args) -> Rel:
    return Rel(relation, tuple(args))


def Or(left: Query, right: Query) -> Query:
    return Not(And(Not(left), Not(right)))


def Implies(left: Query, right: Query) -> Query:
    return Not(And(left, Not(right)))


def Forall(var: str, body: Query) -> Query:
    return Not(Exists(var, Not(body)))


def or_all(qs: list[Query]) -> Query:
    """Disjunction of a list; the empty disjunction has no models."""
    if not qs:
        return FALSE
    out = qs[0]
    for q in qs[1:]:
        out = Or(out, q)
    return out


def and_all(qs: list[Query]) -> Query:
    if not qs:
        return TRUE
    out = qs[0]
    for q in qs[1:]:
        out = And(out, q)
    return out


def free_vars(q: Query) -> set[str]:
    if isinstance(q, TrueQ):
        return set()
    if isinstance(q, Rel):
        return {a for a in q.args if isinstance(a, str)}
    if isinstance(q, Eq):
        return {a for a in (q.left, q.right) if isinstance(a, str)}
    if isinstance(q, Not):
        return free_vars(q.body)
    if isinstance(q, And):
        return free_vars(q.left) | free_vars(q.right)
    if isinstance(q, Exists):
        return free_vars(q.body) - {q.var}
    raise TypeError(f"not a query node: {q!r}")


def all_vars(q: Query) -> set[str]:
    if isinstance(q, (TrueQ,)):
        return set()
    if isinstance(q, Rel):
        return {a for a in q.args if isinstance(a, str)}
    if isinstance(q, Eq):
        return {a for a in (q.left, q.right) if isinstance(a, str)}
    if isinstance(q, Not):
        return all_vars(q.body)
    if isinstance(q, And):
        return all_vars(q.left) | all_vars(q.right)
    if isinstance(q, Exists):
        return all_vars(q.body) | {q.var}
    raise TypeError(f"not a query node: {q!r}")


def constants(q: Query) -> set[int]:
    """Constant values mentioned in atoms (extended-syntax queries only)."""
    if isinstance(q, TrueQ):
        return set()
    if isinstance(q, Rel):
        return {a for a in q.args if isinstance(a, int)}
    if isinstance(q, Eq):
        return {a for a in (q.left, q.right) if isinstance(a, int)}
    if isinstance(q, Not):
        return constants(q.body)
    if isinstance(q, And):
        return constants(q.left) | constants(q.right)
    if isinstance(q, Exists):
        return constants(q.body)
    raise TypeError(f"not a query node: {q!r}")


def substitute_query(q: Query, mapping: dict) -> Query:
    """Replace variables by terms (variables or values), capture-naively.

    Callers must ensure replaced variables are not rebound below, which holds
    for alpha-normalized queries.
    """
    if isinstance(q, TrueQ):
        return q
    if isinstance(q, Rel):
        return Rel(q.relation, tuple(mapping.get(a, a) if isinstance(a, str) else a for a in q.args))
    if isinstance(q, Eq):
        sub = lambda a: mapping.get(a, a) if isinstance(a, str) else a
        return Eq(sub(q.left), sub(q.right))
    if isinstance(q, Not):
        return Not(substitute_query(q.body, mapping))
    if isinstance(q, And):
        return And(substitute_query(q.left, mapping), substitute_query(q.right, mapping))
    if isinstance(q, Exists):
        inner = {k: v for k, v in mapping.items() if k != q.var}
        return Exists(q.var, substitute_query(q.body, inner))
    raise TypeError(f"not a query node: {q!r}")


def normalize(q: Query) -> Query:
    """Alpha-rename bound variables apart from free ones and each other."""
    taken = set(free_vars(q))
    counter = itertools.count(1)

    def fresh(base: str) -> str:
        name = base
        while name in taken:
            name = f"{base}_{next(counter)}"
        taken.add(name)
        return name

    def walk(node: Query, ren: dict) -> Query:
        if isinstance(node, TrueQ):
            return node
        if isinstance(node, Rel):
            return Rel(node.relation, tuple(ren.get(a, a) if isinstance(a, str) else a for a in node.args))
        if isinstance(node, Eq):
            sub = lambda a: ren.get(a, a) if isinstance(a, str) else a
            return Eq(sub(node.left), sub(node.right))
        if isinstance(node, Not):
            return Not(walk(node.body, ren))
        if isinstance(node, And):
            return And(walk(node.left, ren), walk(node.right, ren))
        if isinstance(node, Exists):
            name = fresh(node.var)
            return Exists(name, walk(node.body, {**ren, node.var: name}))
        raise TypeError(f"not a query node: {node!r}")

    return walk(q, {})


def check_query_schema(q: Query, schema: Schema) -> None:
    if isinstance(q, Rel):
        if schema.arity(q.relation) != len(q.args):
            raise SchemaError(
                f"{q.relation} used with {len(q.args)} arguments, declared "
                f"arity is {schema.arity(q.relation)}"
            )
    elif isinstance(q, Not):
        check_query_schema(q.body, schema)
    elif isinstance(q, And):
        check_query_schema(q.left, schema)
        check_query_schema(q.right, schema)
    elif isinstance(q, Exists):
        check_query_schema(q.body, schema)


def eval_query(inst: Instance, sigma: Substitution, q: Query) -> bool:
    """The satisfaction relation I, sigma |= Q with active-domain quantifiers."""
    return _eval(inst, dict(sigma), q, None)


def _eval(inst: Instance, env: dict, q: Query, active) -> bool:
    if isinstance(q, TrueQ):
        return True
    if isinstance(q, Rel):
        try:
            args = tuple(env[a] if isinstance(a, str) else a for a in q.args)
        except KeyError as e:
            raise UnboundVariableError(e.args[0]) from None
        return (q.relation, args) in inst.facts
    if isinstance(q, Eq):
        def term(a):
            if isinstance(a, str):
                if a not in env:
                    raise UnboundVariableError(a)
                return env[a]
            return a
        return term(q.left) == term(q.right)
    if isinstance(q, Not):
        return not _eval(inst, env, q.body, active)
    if isinstance(q, And):
        return _eval(inst, env, q.left, active) and _eval(inst, env, q.right, active)
    if isinstance(q, Exists):
        if active is None:
            active = sorted(adom(inst))
        saved = env.get(q.var, _MISSING)
        for e in active:
            env[q.var] = e
            if _eval(inst, env, q.body, active):
                if saved is _MISSING:
                    del env[q.var]
                else:
                    env[q.var] = saved
                return True
        if saved is _MISSING:
            env.pop(q.var, None)
        else:
            env[q.var] = saved
        return False
    raise TypeError(f"not a query node: {q!r}")


_MISSING = object()


def answers(q: Query, inst: Instance) -> set:
    """All substitutions free_vars(q) -> adom(I) satisfying the query.

    A boolean query answers with the singleton {empty substitution} when it
    holds and with the empty set otherwise.
    """
    fv = sorted(free_vars(q))
    active = sorted(adom(inst))
    out = set()
    for combo in itertools.product(active, repeat=len(fv)):
        sigma = dict(zip(fv, combo))
        if eval_query(inst, sigma, q):
            out.add(frozenset(sigma.items()))
    return out


def answer_dicts(q: Query, inst: Instance) -> Iterator[dict]:
    for frozen in sorted(answers(q, inst), key=sorted):
        yield dict(frozen)


def active_query(schema: Schema, var: str = "u") -> Query:
    """A query with one free variable characterising the active domain."""
    disjuncts = []
    for name in schema.names():
        arity = schema.arity(name)
        if arity == 0:
            continue
        others = [f"{var}_{i}" for i in range(1, arity)]
        atoms = []
        for pos in range(arity):
            args = others[:pos] + [var] + others[pos:]
            atoms.append(Rel(name, tuple(args)))
        body = or_all(atoms)
        for other in reversed(others):
            body = Exists(other, body)
        disjuncts.append(body)
    return or_all(disjuncts)
