"""Behavior-preserving model compilations.

Four source-level conveniences reduce to the core model: declared constants
(compiled into relation names), non-injective fresh inputs (one action per
partition of the fresh variables), arbitrary inputs that may collide with
history (a unary history relation plus one action per fresh/history split
of the inputs), and bulk actions applied to all guard answers at once (a
locked multi-phase protocol with accessory relations).
"""

from __future__ import annotations

import itertools
from dataclasses import replace

from .core import Instance, Schema, adom
from .model import DMS, Action, check_valid
from .query import (
    And,
    Eq,
    Exists,
    Not,
    Or,
    Query,
    Rel,
    TRUE,
    TrueQ,
    and_all,
    free_vars,
    normalize,
    or_all,
    substitute_query,
)


# Constant removal


def _compact_key(args, const_values: frozenset) -> tuple:
    return tuple(a if isinstance(a, int) and a in const_values else None for a in args)


class _Compactor:
    """Names and arities for the compacted relation family."""

    def __init__(self, schema: Schema, const_names: dict):
        self.const_names = const_names  # value -> name
        self.const_values = frozenset(const_names)
        self.names: dict = {}
        taken = set()
        relations: dict = {}
        for rel in schema.names():
            arity = schema.arity(rel)
            if arity == 0:
                self.names[(rel, ())] = rel
                relations[rel] = 0
                taken.add(rel)
                continue
            for key in itertools.product([None] + sorted(self.const_values), repeat=arity):
                if all(k is None for k in key):
                    name = rel
                else:
                    parts = [self.const_names[k] if k is not None else "x" for k in key]
                    name = rel + "_" + "_".join(parts)
                while name in taken:
                    name += "_"
                taken.add(name)
                self.names[(rel, key)] = name
                relations[name] = sum(1 for k in key if k is None)
        self.schema = Schema(relations)

    def fact(self, f) -> tuple:
        rel, args = f
        key = _compact_key(args, self.const_values)
        kept = tuple(a for a, k in zip(args, key) if k is None)
        return (self.names[(rel, key)], kept)

    def atom(self, q: Rel) -> Query:
        key = _compact_key(q.args, self.const_values)
        kept = tuple(a for a, k in zip(q.args, key) if k is None)
        return Rel(self.names[(q.relation, key)], kept)


def compact_fact(f, const_values, names: dict) -> tuple:
    """Fold constant arguments of one fact into the relation name."""
    key = _compact_key(f[1], frozenset(const_values))
    kept = tuple(a for a, k in zip(f[1], key) if k is None)
    return (names[(f[0], key)], kept)


def _relativize_bound(q: Query, const_values: list) -> Query:
    """Case-split every bound variable: either a non-constant witness or one
    of the constants, substituted in place.  After compaction the
    non-constant branch needs no explicit disequality: quantifiers of the
    target model range over the constant-free domain."""
    if isinstance(q, (TrueQ, Rel, Eq)):
        return q
    if isinstance(q, Not):
        return Not(_relativize_bound(q.body, const_values))
    if isinstance(q, And):
        return And(_relativize_bound(q.left, const_values),
                   _relativize_bound(q.right, const_values))
    if isinstance(q, Exists):
        body = _relativize_bound(q.body, const_values)
        branches = [Exists(q.var, body)]
        for c in const_values:
            branches.append(substitute_query(body, {q.var: c}))
        return or_all(branches)
    raise TypeError(f"not a query node: {q!r}")


def _compact_query(q: Query, comp: _Compactor) -> Query:
    """Fold constants out of atoms; equalities with a constant are decided
    (variables range over the constant-free domain)."""
    if isinstance(q, TrueQ):
        return q
    if isinstance(q, Rel):
        return comp.atom(q)
    if isinstance(q, Eq):
        lc = isinstance(q.left, int)
        rc = isinstance(q.right, int)
        if lc and rc:
            return TRUE if q.left == q.right else Not(TRUE)
        if lc or rc:
            return Not(TRUE)
        return q
    if isinstance(q, Not):
        return Not(_compact_query(q.body, comp))
    if isinstance(q, And):
        return And(_compact_query(q.left, comp), _compact_query(q.right, comp))
    if isinstance(q, Exists):
        return Exists(q.var, _compact_query(q.body, comp))
    raise TypeError(f"not a query node: {q!r}")


def _simplify(q: Query) -> Query:
    if isinstance(q, Not):
        body = _simplify(q.body)
        if isinstance(body, Not):
            return body.body
        return Not(body)
    if isinstance(q, And):
        left, right = _simplify(q.left), _simplify(q.right)
        for side, other in ((left, right), (right, left)):
            if isinstance(side, TrueQ):
                return other
            if isinstance(side, Not) and isinstance(side.body, TrueQ):
                return side
        return And(left, right)
    if isinstance(q, Exists):
        body = _simplify(q.body)
        if isinstance(body, Not) and isinstance(body.body, TrueQ):
            return body
        return Exists(q.var, body)
    return q


def remove_constants(dms: DMS, names=None) -> DMS:
    """Compile a constant-bearing model into a constant-free one whose
    configuration graph is isomorphic (instances compacted, constants
    dropped from histories)."""
    if names is not None and tuple(names) != dms.constants:
        raise ValueError("constant removal always eliminates all declared constants")
    if not dms.constants:
        return dms
    value_names = {v: k for k, v in dms.constant_values().items()}
    comp = _Compactor(dms.schema, value_names)
    const_values = sorted(value_names)

    init = Instance(comp.schema, frozenset(comp.fact(f) for f in dms.init.facts))
    acts = []
    for act in dms.acts:
        rel_guard = _relativize_bound(act.guard, const_values)
        if act.params:
            for fixing in itertools.product([None] + const_values, repeat=len(act.params)):
                sub = {u: c for u, c in zip(act.params, fixing) if c is not None}
                remaining = tuple(u for u, c in zip(act.params, fixing) if c is None)
                guard = _simplify(_compact_query(substitute_query(rel_guard, sub), comp))
                delete = Instance(comp.schema, frozenset(
                    comp.fact(_subst_fact(f, sub)) for f in act.delete.facts))
                add = Instance(comp.schema, frozenset(
                    comp.fact(_subst_fact(f, sub)) for f in act.add.facts))
                if all(c is None for c in fixing):
                    name = act.name
                else:
                    name = act.name + "__" + "_".join(
                        value_names[c] if c is not None else "x" for c in fixing)
                acts.append(Action(name, remaining, act.fresh, normalize(guard),
                                   delete, add, bulk=act.bulk))
        else:
            guard = _simplify(_compact_query(rel_guard, comp))
            delete = Instance(comp.schema, frozenset(comp.fact(f) for f in act.delete.facts))
            add = Instance(comp.schema, frozenset(comp.fact(f) for f in act.add.facts))
            acts.append(Action(act.name, (), act.fresh, normalize(guard),
                               delete, add, bulk=act.bulk))
    return DMS(comp.schema, init, tuple(acts), constants=())


def _subst_fact(f, sub: dict):
    rel, args = f
    return (rel, tuple(sub.get(a, a) if isinstance(a, str) else a for a in args))


# Standard (non-injective) substitution


def _set_partitions(items: list):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def standard_substitution(acts) -> tuple:
    """One action per set-partition of the fresh variables, each class
    merged onto a single fresh variable (named after its first member); the
    number of outputs per action is the Bell number of |fresh|."""
    out = []
    for act in acts:
        parts = list(_set_partitions(list(act.fresh)))
        for idx, part in enumerate(parts):
            rename = {}
            merged = []
            for cls in part:
                rep = cls[0]
                merged.append(rep)
                for v in cls:
                    rename[v] = rep
            add = Instance(act.add.schema, frozenset(
                _subst_fact(f, rename) for f in act.add.facts))
            name = act.name if len(parts) == 1 else (
                act.name if _is_discrete(part) else f"{act.name}__p{idx}")
            out.append(Action(name, act.params, tuple(merged), act.guard,
                              act.delete, add, bulk=act.bulk))
    return tuple(out)


def _is_discrete(part) -> bool:
    return all(len(cls) == 1 for cls in part)


def apply_standard_substitution(dms: DMS) -> DMS:
    return replace(dms, acts=standard_substitution(dms.acts))


# Weakening freshness


HIST = "Hist"


def weaken_freshness(dms: DMS) -> DMS:
    """Compile arbitrary-input actions to fresh-input ones: a unary history
    relation records every value ever input, and each action splits into
    one variant per subset of inputs drawn from that history."""
    hist = HIST
    while hist in dms.schema:
        hist += "_"
    schema = Schema({**dict(dms.schema.relations), hist: 1})
    init = Instance(schema, dms.init.facts)
    acts = []
    for act in dms.acts:
        inputs = list(act.fresh)
        for mask in itertools.product([False, True], repeat=len(inputs)):
            h = [v for v, old in zip(inputs, mask) if old]
            f = [v for v, old in zip(inputs, mask) if not old]
            guard = and_all([act.guard] + [Rel(hist, (v,)) for v in h])
            add = Instance(schema, act.add.facts | frozenset((hist, (v,)) for v in f))
            delete = Instance(schema, act.delete.facts)
            name = act.name if not any(mask) else f"{act.name}__h_" + "_".join(h)
            acts.append(Action(name, act.params + tuple(h), tuple(f), guard,
                               delete, add, bulk=act.bulk))
    return DMS(schema, init, tuple(acts), constants=dms.constants)


# Bulk compilation


def _exists_close(q: Query, over) -> Query:
    out = q
    for v in reversed(list(over)):
        out = Exists(v, out)
    return out


def compile_bulk(dms: DMS) -> DMS:
    """Replace every bulk action by the seven-action locked protocol.

    Accessory relations per bulk action b: a lock proposition, an input
    relation holding the chosen fresh tuple, an answer relation with one
    trailing phase flag, and two phase propositions.  The flag values are
    two reserved constants; chain remove_constants to reach the core model.
    All other guards are conjoined with the negation of every lock.
    """
    bulk_acts = [a for a in dms.acts if a.bulk]
    if not bulk_acts:
        return dms

    constants = tuple(dms.constants) + ("flag0", "flag1")
    values = {name: i + 1 for i, name in enumerate(constants)}
    flag0, flag1 = values["flag0"], values["flag1"]

    relations = dict(dms.schema.relations)

    def reserve(name: str, arity: int) -> str:
        while name in relations:
            name += "_"
        relations[name] = arity
        return name

    names = {}
    for act in bulk_acts:
        names[act.name] = {
            "lock": reserve(f"Lock_{act.name}", 0),
            "input": reserve(f"FreshInput_{act.name}", len(act.fresh)),
            "par": reserve(f"ParMatch_{act.name}", len(act.params) + 1),
            "delphase": reserve(f"DelPhase_{act.name}", 0),
            "addphase": reserve(f"AddPhase_{act.name}", 0),
        }
    schema = Schema(relations)
    no_lock = and_all([Not(Rel(names[a.name]["lock"], ())) for a in bulk_acts])

    def inst(facts) -> Instance:
        return Instance(schema, frozenset(facts))

    acts = []
    for act in dms.acts:
        if not act.bulk:
            acts.append(replace(
                act,
                guard=normalize(And(act.guard, no_lock)),
                delete=Instance(schema, act.delete.facts),
                add=Instance(schema, act.add.facts),
            ))
            continue
        n = names[act.name]
        lock, inp, par = n["lock"], n["input"], n["par"]
        delphase, addphase = n["delphase"], n["addphase"]
        u = list(act.params)
        v = list(act.fresh)
        m = "m_flag"
        while m in u or m in v:
            m += "_"
        lock_a = Rel(lock, ())
        delphase_a = Rel(delphase, ())
        addphase_a = Rel(addphase, ())
        in_second_phase = and_all([lock_a, Not(delphase_a), Not(addphase_a)])

        acts.append(Action(
            f"Init_{act.name}", (), tuple(v),
            normalize(And(_exists_close(act.guard, u), no_lock)),
            inst([]),
            inst([(lock, ()), (inp, tuple(v))]),
        ))
        acts.append(Action(
            f"CompAns_{act.name}", tuple(u), (),
            normalize(and_all([in_second_phase, act.guard,
                               Not(Exists(m, Rel(par, tuple(u) + (m,))))])),
            inst([]),
            inst([(par, tuple(u) + (flag0,))]),
        ))
        all_transferred = Not(_exists_close(
            And(act.guard, Not(Exists(m, Rel(par, tuple(u) + (m,))))), u))
        acts.append(Action(
            f"EnableU_{act.name}", (), (),
            normalize(And(in_second_phase, all_transferred)),
            inst([]),
            inst([(delphase, ())]),
        ))
        acts.append(Action(
            f"ApplyDel_{act.name}", tuple(u), (),
            normalize(And(delphase_a, Rel(par, tuple(u) + (flag0,)))),
            inst(set(act.delete.facts) | {(par, tuple(u) + (flag0,))}),
            inst([(par, tuple(u) + (flag1,))]),
        ))
        undone = _exists_close(And(Exists(m, And(Rel(par, tuple(u) + (m,)), Not(Eq(m, flag1)))), TRUE), u)
        acts.append(Action(
            f"DelToAdd_{act.name}", (), (),
            normalize(And(delphase_a, Not(undone))),
            inst([(delphase, ())]),
            inst([(addphase, ())]),
        ))
        acts.append(Action(
            f"ApplyAdd_{act.name}", tuple(u) + tuple(v), (),
            normalize(and_all([addphase_a, Rel(par, tuple(u) + (flag1,)), Rel(inp, tuple(v))])),
            inst([(par, tuple(u) + (flag1,))]),
            inst(act.add.facts),
        ))
        any_pending = _exists_close(Exists(m, Rel(par, tuple(u) + (m,))), u)
        acts.append(Action(
            f"Finalize_{act.name}", tuple(v), (),
            normalize(And(Rel(inp, tuple(v)), Not(any_pending))),
            inst([(inp, tuple(v)), (lock, ())]),
            inst([]),
        ))
    init = Instance(schema, dms.init.facts)
    return DMS(schema, init, tuple(acts), constants=constants)


# Pass pipeline


PASSES = {
    "constants": lambda d: remove_constants(d),
    "injectivity": apply_standard_substitution,
    "freshness": weaken_freshness,
    "bulk": lambda d: remove_constants(compile_bulk(d)),
}


def apply_passes(dms: DMS, passes) -> DMS:
    for name in passes:
        if name not in PASSES:
            raise ValueError(f"unknown pass {name!r}; choose from {sorted(PASSES)}")
        dms = PASSES[name](dms)
    return check_valid(dms)
