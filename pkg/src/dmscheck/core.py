"""Data domain, schemas, database instances and substitution plumbing.

Domain elements are the canonically ordered values e_1, e_2, ..., represented
as bare positive integers.  A fact is a ``(relation, args)`` pair whose
arguments are either values (ints) or data-variable names (strs); a database
instance is a frozen set of facts together with its schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Union

Value = int
Term = Union[int, str]  # value or data-variable name
Fact = tuple[str, tuple]  # (relation name, argument tuple)


class SchemaError(ValueError):
    """A fact or query does not match the declared schema."""


class UnboundVariableError(KeyError):
    """A substitution is missing a required variable."""


@dataclass(frozen=True)
class Schema:
    """Relation names with arities; arity 0 relations are propositions."""

    relations: Mapping[str, int]

    def __post_init__(self):
        for name, arity in self.relations.items():
            if arity < 0:
                raise SchemaError(f"negative arity for {name}")

    def arity(self, name: str) -> int:
        try:
            return self.relations[name]
        except KeyError:
            raise SchemaError(f"unknown relation {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.relations

    def names(self) -> list[str]:
        return sorted(self.relations)


def fact(relation: str, *args: "int | str") -> Fact:
    return (relation, tuple(args))


def fact_values(f: Fact) -> Iterator[Value]:
    for a in f[1]:
        if isinstance(a, int):
            yield a


def fact_vars(f: Fact) -> Iterator[str]:
    for a in f[1]:
        if isinstance(a, str):
            yield a


def sort_key(f: Fact):
    # Deterministic canonical order: relation name, then argument tuple with
    # values before variables.
    return (f[0], tuple((0, a) if isinstance(a, int) else (1, a) for a in f[1]))


@dataclass(frozen=True)
class Instance:
    """A finite set of facts over a schema (set semantics, immutable)."""

    schema: Schema
    facts: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        for rel, args in self.facts:
            if self.schema.arity(rel) != len(args):
                raise SchemaError(
                    f"fact {rel}/{len(args)} does not match declared arity "
                    f"{self.schema.arity(rel)}"
                )

    def __contains__(self, f: Fact) -> bool:
        return f in self.facts

    def __len__(self) -> int:
        return len(self.facts)

    def __iter__(self) -> Iterator[Fact]:
        return iter(sorted(self.facts, key=sort_key))

    def with_facts(self, facts: Iterable[Fact]) -> "Instance":
        return Instance(self.schema, frozenset(facts))

    def tuples(self, relation: str) -> set[tuple]:
        self.schema.arity(relation)
        return {args for rel, args in self.facts if rel == relation}

    def __str__(self) -> str:
        return "{" + ", ".join(format_fact(f) for f in self) + "}"


def format_fact(f: Fact) -> str:
    rel, args = f
    if not args:
        return rel
    return f"{rel}({', '.join(format_term(a) for a in args)})"


def format_term(a) -> str:
    return f"e{a}" if isinstance(a, int) else str(a)


def adom(inst: Instance) -> set[Value]:
    """Values occurring in some fact of the instance."""
    out: set[Value] = set()
    for f in inst.facts:
        out.update(fact_values(f))
    return out


def inst_vars(inst: Instance) -> set[str]:
    """Variables occurring in some fact of a variable-instance."""
    out: set[str] = set()
    for f in inst.facts:
        out.update(fact_vars(f))
    return out


def db_union(i1: Instance, i2: Instance) -> Instance:
    if i1.schema != i2.schema:
        raise SchemaError("union of instances over different schemas")
    return Instance(i1.schema, i1.facts | i2.facts)


def db_diff(i1: Instance, i2: Instance) -> Instance:
    if i1.schema != i2.schema:
        raise SchemaError("difference of instances over different schemas")
    return Instance(i1.schema, i1.facts - i2.facts)


Substitution = Mapping[str, Value]


def substitute_fact(sigma: Substitution, f: Fact) -> Fact:
    rel, args = f
    out = []
    for a in args:
        if isinstance(a, str):
            if a not in sigma:
                raise UnboundVariableError(a)
            out.append(sigma[a])
        else:
            out.append(a)
    return (rel, tuple(out))


def substitute_db(sigma: Substitution, inst: Instance) -> Instance:
    """Replace every variable occurrence by its image; result is ground."""
    return inst.with_facts(substitute_fact(sigma, f) for f in inst.facts)
