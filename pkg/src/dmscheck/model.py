"""Guarded-action models over a relational schema.

An action deletes and adds variable-facts under a first-order guard whose
free variables are exactly the action parameters; fresh-input variables are
ordered, because the position of a fresh variable determines its sequence
number under the recency-bounded semantics (and its negative index in the
symbolic abstraction).

The core model is constant-free.  Models may carry declared constants (an
extended model); those must be compiled away with the transforms module
before the core semantics, abstraction or encoding layers are used.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .core import Instance, Schema, SchemaError, adom, inst_vars
from .query import Query, check_query_schema, constants as query_constants, free_vars


@dataclass(frozen=True)
class Action:
    name: str
    params: tuple  # ordered action parameters u
    fresh: tuple  # ordered fresh-input variables v
    guard: Query
    delete: Instance  # variable-instance over params
    add: Instance  # variable-instance over params + fresh
    bulk: bool = False  # retrieve-all-answers action (extension)

    def rename(self, name: str) -> "Action":
        return replace(self, name=name)


@dataclass(frozen=True)
class DMS:
    schema: Schema
    init: Instance
    acts: tuple
    constants: tuple = ()  # declared constant names, interned to values 1..k

    def action(self, name: str) -> Action:
        for a in self.acts:
            if a.name == name:
                return a
        raise KeyError(name)

    def constant_values(self) -> dict:
        """Declared constant name -> interned domain value (1-based)."""
        return {name: i + 1 for i, name in enumerate(self.constants)}

    @property
    def max_fresh(self) -> int:
        return max((len(a.fresh) for a in self.acts), default=0)


def validate(dms: DMS) -> list[str]:
    """Well-formedness diagnostics; an empty list means the model is valid."""
    out: list[str] = []
    const_values = set(dms.constant_values().values())

    try:
        dms.init.__post_init__()
    except SchemaError as e:
        out.append(f"init: {e}")
    stray = adom(dms.init) - const_values
    if stray:
        out.append(f"init: adom(I0) must be empty, found values {sorted(stray)}")
    if inst_vars(dms.init):
        out.append("init: variables are not allowed in the initial instance")

    seen = set()
    for act in dms.acts:
        where = f"action {act.name}"
        if act.name in seen:
            out.append(f"{where}: duplicate action name")
        seen.add(act.name)

        params, fresh = act.params, act.fresh
        if len(set(params)) != len(params):
            out.append(f"{where}: repeated parameter variable")
        if len(set(fresh)) != len(fresh):
            out.append(f"{where}: repeated fresh variable")
        if set(params) & set(fresh):
            out.append(f"{where}: u ∩ v ≠ ∅")

        try:
            check_query_schema(act.guard, dms.schema)
        except SchemaError as e:
            out.append(f"{where}: guard: {e}")
        if free_vars(act.guard) != set(params):
            out.append(f"{where}: free_vars(Q) ≠ u")

        for label, inst in (("Del", act.delete), ("Add", act.add)):
            try:
                inst.__post_init__()
            except SchemaError as e:
                out.append(f"{where}: {label}: {e}")
            bad_values = adom(inst) - const_values
            if bad_values:
                out.append(f"{where}: {label}: undeclared constant values {sorted(bad_values)}")
        bad_consts = query_constants(act.guard) - const_values
        if bad_consts:
            out.append(f"{where}: guard: undeclared constant values {sorted(bad_consts)}")

        if not inst_vars(act.delete) <= set(params):
            out.append(f"{where}: vars(Del) ⊄ u")
        if not inst_vars(act.add) <= set(params) | set(fresh):
            out.append(f"{where}: vars(Add) ⊄ u ⊎ v")
        if not set(fresh) <= inst_vars(act.add):
            out.append(f"{where}: v ⊄ adom(Add)")
    return out


def check_valid(dms: DMS) -> DMS:
    problems = validate(dms)
    if problems:
        raise SchemaError("invalid model: " + "; ".join(problems))
    return dms


def has_bulk(dms: DMS) -> bool:
    return any(a.bulk for a in dms.acts)


def example_31() -> DMS:
    """The four-action running example over schema {p/0, R/1, Q/1}."""
    from .query import And, Exists, Not, Or, Rel, TRUE

    schema = Schema({"p": 0, "R": 1, "Q": 1})
    empty = Instance(schema)
    p = Rel("p", ())

    alpha = Action(
        "alpha", (), ("v1", "v2", "v3"), TRUE, empty,
        empty.with_facts({("R", ("v1",)), ("R", ("v2",)), ("Q", ("v3",)), ("p", ())}),
    )
    beta = Action(
        "beta", ("u",), ("v1", "v2"),
        And(p, Rel("R", ("u",))),
        empty.with_facts({("p", ()), ("R", ("u",))}),
        empty.with_facts({("Q", ("v1",)), ("Q", ("v2",))}),
    )
    gamma = Action(
        "gamma", ("u",), (),
        And(p, Not(Rel("Q", ("u",)))),
        empty.with_facts({("p", ()), ("R", ("u",))}),
        empty,
    )
    delta = Action(
        "delta", ("u1", "u2"), (),
        And(And(Not(p), Rel("Q", ("u1",))), Or(Rel("R", ("u2",)), Rel("Q", ("u2",)))),
        empty.with_facts({("Q", ("u1",)), ("R", ("u2",))}),
        empty,
    )
    return DMS(schema, empty.with_facts({("p", ())}), (alpha, beta, gamma, delta))
