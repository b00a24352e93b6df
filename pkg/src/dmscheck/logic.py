"""Monadic second-order logic over run prefixes and over nested words.

Two languages share this module: formulas over runs (position and set
variables over time points, data variables over the run's global active
domain, embedded first-order queries evaluated at a position) and formulas
over nested words (letter tests, position order and the matching relation).
Both are evaluated over finite prefixes by exhaustive quantifier
enumeration; position quantifiers range over the prefix, set quantifiers
over its subsets, data quantifiers over the values seen so far.

The translation of a run formula onto the word encoding represents run
position i by the i-th internal letter (the initial-instance letter is
position 0) and evaluates an embedded query at position i against the
instance reached after block i.  A data variable is represented by a pair
of a position and a recency index denoting the value at that position's
block.  Three places deliberately sharpen the source construction, which is
stated for infinite words and glosses boundary cases; each is flagged in
the tests:

* initial nullary facts count as additions of the initial letter, so
  queries can see them before any action re-asserts them;
* equality of represented values is symmetrized (the raw tracing predicate
  is directional) and guarded by definedness of both representations;
* quantifiers inside embedded queries are restricted to values active in
  the instance under evaluation, matching the active-domain semantics
  (the unguarded clause would let dead values witness negated atoms), and
  tuple presence is replayed with additions winning over deletions inside
  a step, matching the update order of the execution semantics.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Union

from .core import Instance, adom
from .model import DMS, Action
from .query import (
    And,
    Exists,
    Not,
    Query,
    Rel,
    TrueQ,
    active_query,
    and_all,
    eval_query,
    free_vars as query_free_vars,
)
from .semantics import RunPrefix
from .nested import (
    HEAD,
    INIT,
    POP,
    PUSH,
    NestedWord,
    compute_matching,
    init_letter,
    is_internal,
    visible_alphabet,
)


# MSO-FO over runs


class Formula:
    __slots__ = ()


@dataclass(frozen=True)
class QueryAt(Formula):
    query: Query
    pos: str
    __slots__ = ("query", "pos")


@dataclass(frozen=True)
class Less(Formula):
    left: str
    right: str
    __slots__ = ("left", "right")


@dataclass(frozen=True)
class SuccF(Formula):
    left: str
    right: str
    __slots__ = ("left", "right")


@dataclass(frozen=True)
class InSet(Formula):
    pos: str
    sv: str
    __slots__ = ("pos", "sv")


@dataclass(frozen=True)
class NotF(Formula):
    body: Formula
    __slots__ = ("body",)


@dataclass(frozen=True)
class AndF(Formula):
    left: Formula
    right: Formula
    __slots__ = ("left", "right")


@dataclass(frozen=True)
class ExistsPos(Formula):
    var: str
    body: Formula
    __slots__ = ("var", "body")


@dataclass(frozen=True)
class ExistsSet(Formula):
    var: str
    body: Formula
    __slots__ = ("var", "body")


@dataclass(frozen=True)
class ExistsData(Formula):
    var: str
    body: Formula
    __slots__ = ("var", "body")


def OrF(left: Formula, right: Formula) -> Formula:
    return NotF(AndF(NotF(left), NotF(right)))


def ImpliesF(left: Formula, right: Formula) -> Formula:
    return NotF(AndF(left, NotF(right)))


def ForallPos(var: str, body: Formula) -> Formula:
    return NotF(ExistsPos(var, NotF(body)))


def ForallSet(var: str, body: Formula) -> Formula:
    return NotF(ExistsSet(var, NotF(body)))


def ForallData(var: str, body: Formula) -> Formula:
    return NotF(ExistsData(var, NotF(body)))


def and_formulas(fs: list) -> Formula:
    if not fs:
        return NotF(ExistsPos("_x", AndF(Less("_x", "_x"), Less("_x", "_x"))))
    out = fs[0]
    for f in fs[1:]:
        out = AndF(out, f)
    return out


def or_formulas(fs: list) -> Formula:
    if not fs:
        return ExistsPos("_x", Less("_x", "_x"))
    out = fs[0]
    for f in fs[1:]:
        out = OrF(out, f)
    return out


def formula_free_vars(phi: Formula) -> set:
    if isinstance(phi, QueryAt):
        return query_free_vars(phi.query) | {phi.pos}
    if isinstance(phi, (Less, SuccF)):
        return {phi.left, phi.right}
    if isinstance(phi, InSet):
        return {phi.pos, phi.sv}
    if isinstance(phi, NotF):
        return formula_free_vars(phi.body)
    if isinstance(phi, AndF):
        return formula_free_vars(phi.left) | formula_free_vars(phi.right)
    if isinstance(phi, (ExistsPos, ExistsSet, ExistsData)):
        return formula_free_vars(phi.body) - {phi.var}
    raise TypeError(f"not a formula node: {phi!r}")


def _subsets(universe: range):
    for r in range(len(universe) + 1):
        yield from itertools.combinations(universe, r)


def eval_msofo(run: Union[RunPrefix, list], sigma: dict, phi: Formula) -> bool:
    """Bounded satisfaction over a finite prefix.

    Position quantifiers range over the prefix positions, set quantifiers
    over their subsets, data quantifiers over the prefix's global active
    domain.  An embedded query atom is false whenever one of its free data
    variables is bound to a value not active at that position.
    """
    if isinstance(run, RunPrefix):
        instances = run.instances
        gdom = sorted(run.gadom())
    else:
        instances = list(run)
        gdom = sorted(set().union(*[adom(i) for i in instances])) if instances else []
    env = dict(sigma)
    return _ev_fo(instances, gdom, env, phi)


def _ev_fo(instances, gdom, env, phi) -> bool:
    if isinstance(phi, QueryAt):
        i = env[phi.pos]
        if not 0 <= i < len(instances):
            raise IndexError(f"position {i} outside the prefix")
        inst = instances[i]
        active = adom(inst)
        sub = {}
        for u in query_free_vars(phi.query):
            val = env[u]
            if val not in active:
                return False
            sub[u] = val
        return eval_query(inst, sub, phi.query)
    if isinstance(phi, Less):
        return env[phi.left] < env[phi.right]
    if isinstance(phi, SuccF):
        return env[phi.right] == env[phi.left] + 1
    if isinstance(phi, InSet):
        return env[phi.pos] in env[phi.sv]
    if isinstance(phi, NotF):
        return not _ev_fo(instances, gdom, env, phi.body)
    if isinstance(phi, AndF):
        return _ev_fo(instances, gdom, env, phi.left) and _ev_fo(instances, gdom, env, phi.right)
    if isinstance(phi, ExistsPos):
        return any(_ev_fo(instances, gdom, {**env, phi.var: i}, phi.body)
                   for i in range(len(instances)))
    if isinstance(phi, ExistsSet):
        return any(_ev_fo(instances, gdom, {**env, phi.var: frozenset(c)}, phi.body)
                   for c in _subsets(range(len(instances))))
    if isinstance(phi, ExistsData):
        return any(_ev_fo(instances, gdom, {**env, phi.var: e}, phi.body)
                   for e in gdom)
    raise TypeError(f"not a formula node: {phi!r}")


def build_runs_formula(dms: DMS) -> Formula:
    """A closed sentence satisfied exactly by instance sequences that are
    locally consistent with some action labelling.

    Set variables hold the positions at which each action fires; every
    position with a successor carries exactly one action, and firing an
    action requires active parameters, never-active-before fresh values,
    the guard, and the declared additions present (deletions absent) at the
    next position.
    """
    acts = sorted(dms.acts, key=lambda a: a.name)
    setvars = {a.name: f"X_{a.name}" for a in acts}

    has_succ = ExistsPos("y0", SuccF("x", "y0"))
    one_of = []
    for a in acts:
        others = [NotF(InSet("x", setvars[b.name])) for b in acts if b.name != a.name]
        one_of.append(and_formulas([InSet("x", setvars[a.name])] + others))
    partition = ForallPos("x", ImpliesF(has_succ, or_formulas(one_of)))

    local = []
    for a in acts:
        local.append(ForallPos("x", ImpliesF(InSet("x", setvars[a.name]), _local_consistency(dms, a))))
    body = and_formulas([partition] + local)
    for a in reversed(acts):
        body = ExistsSet(setvars[a.name], body)
    return body


def _local_consistency(dms: DMS, action: Action) -> Formula:
    conjuncts: list = []
    for u in action.params:
        conjuncts.append(QueryAt(active_query(dms.schema, u), "x"))
    for v in action.fresh:
        never_active = ForallPos(
            "y", ImpliesF(NotF(Less("x", "y")), NotF(QueryAt(active_query(dms.schema, v), "y"))))
        conjuncts.append(never_active)
    conjuncts.append(QueryAt(action.guard, "x"))
    effects: list = []
    add_facts = set(action.add.facts)
    for f in sorted(add_facts):
        effects.append(QueryAt(Rel(f[0], f[1]), "y"))
    for f in sorted(set(action.delete.facts) - add_facts):
        effects.append(NotF(QueryAt(Rel(f[0], f[1]), "y")))
    conjuncts.append(ExistsPos("y", and_formulas([SuccF("x", "y")] + effects)))
    body = and_formulas(conjuncts)
    for var in reversed(list(action.params) + list(action.fresh)):
        body = ExistsData(var, body)
    return body


# MSO over nested words


class NwFormula:
    __slots__ = ()


@dataclass(frozen=True)
class LetterAt(NwFormula):
    letter: tuple
    pos: str
    __slots__ = ("letter", "pos")


@dataclass(frozen=True)
class LessNW(NwFormula):
    left: str
    right: str
    __slots__ = ("left", "right")


@dataclass(frozen=True)
class MatchNW(NwFormula):
    left: str
    right: str
    __slots__ = ("left", "right")


@dataclass(frozen=True)
class InSetNW(NwFormula):
    pos: str
    sv: str
    __slots__ = ("pos", "sv")


@dataclass(frozen=True)
class NotNW(NwFormula):
    body: NwFormula
    __slots__ = ("body",)


@dataclass(frozen=True)
class OrNW(NwFormula):
    left: NwFormula
    right: NwFormula
    __slots__ = ("left", "right")


@dataclass(frozen=True)
class ExistsPosNW(NwFormula):
    var: str
    body: NwFormula
    __slots__ = ("var", "body")


@dataclass(frozen=True)
class ExistsSetNW(NwFormula):
    var: str
    body: NwFormula
    __slots__ = ("var", "body")


def AndNW(left: NwFormula, right: NwFormula) -> NwFormula:
    return NotNW(OrNW(NotNW(left), NotNW(right)))


def ImpliesNW(left: NwFormula, right: NwFormula) -> NwFormula:
    return OrNW(NotNW(left), right)


def ForallPosNW(var: str, body: NwFormula) -> NwFormula:
    return NotNW(ExistsPosNW(var, NotNW(body)))


def ForallSetNW(var: str, body: NwFormula) -> NwFormula:
    return NotNW(ExistsSetNW(var, NotNW(body)))


def or_nw(fs: list) -> NwFormula:
    if not fs:
        return ExistsPosNW("_z", LessNW("_z", "_z"))
    out = fs[0]
    for f in fs[1:]:
        out = OrNW(out, f)
    return out


def and_nw(fs: list) -> NwFormula:
    if not fs:
        return NotNW(ExistsPosNW("_z", LessNW("_z", "_z")))
    out = fs[0]
    for f in fs[1:]:
        out = AndNW(out, f)
    return out


class AlphabetError(ValueError):
    pass


def nw_set_quantifiers(psi: NwFormula) -> int:
    if isinstance(psi, (LetterAt, LessNW, MatchNW, InSetNW)):
        return 0
    if isinstance(psi, NotNW):
        return nw_set_quantifiers(psi.body)
    if isinstance(psi, OrNW):
        return nw_set_quantifiers(psi.left) + nw_set_quantifiers(psi.right)
    if isinstance(psi, ExistsPosNW):
        return nw_set_quantifiers(psi.body)
    if isinstance(psi, ExistsSetNW):
        return 1 + nw_set_quantifiers(psi.body)
    raise TypeError(f"not a nested-word formula node: {psi!r}")


SET_QUANTIFIER_WARN = 3


def eval_msonw(word, sigma: dict, psi: NwFormula, alphabet=None) -> bool:
    """Exhaustive evaluation over a finite visible word.

    ``word`` is a NestedWord or a raw letter sequence; letters are tuples
    whose first component is "push", "pop" or an internal marker.  The cost
    is exponential in the number of set quantifiers (a warning is emitted
    past a threshold).
    """
    if isinstance(word, NestedWord):
        letters = word.letters
        if alphabet is None:
            alphabet = word.alphabet
    else:
        letters = tuple(word)
    if alphabet is not None:
        _check_alphabet(psi, alphabet)
    matching, _ = compute_matching(letters)
    n = nw_set_quantifiers(psi)
    if n >= SET_QUANTIFIER_WARN:
        warnings.warn(
            f"evaluating a nested-word formula with {n} set quantifiers: "
            f"cost grows as 2^({n}*|word|)", RuntimeWarning, stacklevel=2)
    return _ev_nw(letters, matching, dict(sigma), psi)


def _check_alphabet(psi: NwFormula, alphabet) -> None:
    if isinstance(psi, LetterAt):
        if psi.letter not in alphabet:
            raise AlphabetError(f"letter {psi.letter!r} is not in the word's alphabet")
    elif isinstance(psi, NotNW):
        _check_alphabet(psi.body, alphabet)
    elif isinstance(psi, OrNW):
        _check_alphabet(psi.left, alphabet)
        _check_alphabet(psi.right, alphabet)
    elif isinstance(psi, (ExistsPosNW, ExistsSetNW)):
        _check_alphabet(psi.body, alphabet)


def _ev_nw(letters, matching, env, psi) -> bool:
    if isinstance(psi, LetterAt):
        return letters[env[psi.pos]] == psi.letter
    if isinstance(psi, LessNW):
        return env[psi.left] < env[psi.right]
    if isinstance(psi, MatchNW):
        return (env[psi.left], env[psi.right]) in matching
    if isinstance(psi, InSetNW):
        return env[psi.pos] in env[psi.sv]
    if isinstance(psi, NotNW):
        return not _ev_nw(letters, matching, env, psi.body)
    if isinstance(psi, OrNW):
        return _ev_nw(letters, matching, env, psi.left) or _ev_nw(letters, matching, env, psi.right)
    if isinstance(psi, ExistsPosNW):
        return any(_ev_nw(letters, matching, {**env, psi.var: i}, psi.body)
                   for i in range(len(letters)))
    if isinstance(psi, ExistsSetNW):
        return any(_ev_nw(letters, matching, {**env, psi.var: frozenset(c)}, psi.body)
                   for c in _subsets(range(len(letters))))
    raise TypeError(f"not a nested-word formula node: {psi!r}")


# Emission of the tracing predicates as nested-word formulas


class _Names:
    def __init__(self):
        self.counter = itertools.count(1)

    def fresh(self, base: str) -> str:
        return f"{base}{next(self.counter)}"


@dataclass
class EmitContext:
    dms: DMS
    b: int
    names: _Names

    @property
    def eta(self) -> int:
        return self.dms.max_fresh

    def internal_letters(self) -> list:
        return sorted(visible_alphabet(self.dms, self.b).internal)

    def head_letters(self) -> list:
        return [l for l in self.internal_letters() if l[0] == HEAD]

    def indices(self) -> range:
        return range(-self.eta, self.b)


def emit_context(dms: DMS, b: int) -> EmitContext:
    return EmitContext(dms, b, _Names())


def nw_true() -> NwFormula:
    return NotNW(ExistsPosNW("_z", LessNW("_z", "_z")))


def nw_false() -> NwFormula:
    return ExistsPosNW("_z", LessNW("_z", "_z"))


def emit_internal(ctx: EmitContext, x: str) -> NwFormula:
    return or_nw([LetterAt(l, x) for l in ctx.internal_letters()])


def emit_leq(x: str, y: str) -> NwFormula:
    return NotNW(LessNW(y, x))


def emit_block_eq(ctx: EmitContext, x: str, y: str) -> NwFormula:
    z = ctx.names.fresh("z")
    same_side = OrNW(AndNW(emit_leq(z, x), emit_leq(z, y)),
                     AndNW(LessNW(x, z), LessNW(y, z)))
    return ForallPosNW(z, OrNW(NotNW(emit_internal(ctx, z)), same_side))


def emit_step(ctx: EmitContext, i: int, j: int, x: str, y: str) -> NwFormula:
    z1 = ctx.names.fresh("z")
    z2 = ctx.names.fresh("z")
    body = and_nw([
        emit_block_eq(ctx, z1, x),
        emit_block_eq(ctx, z2, y),
        MatchNW(z1, z2),
        LetterAt((PUSH, i), z1),
        LetterAt((POP, j), z2),
    ])
    return ExistsPosNW(z1, ExistsPosNW(z2, body))


def emit_mentions(ctx: EmitContext, i: int, x: str) -> NwFormula:
    z = ctx.names.fresh("z")
    letter = (POP, i) if i >= 0 else (PUSH, i)
    return ExistsPosNW(z, AndNW(emit_block_eq(ctx, z, x), LetterAt(letter, z)))


def emit_eq(ctx: EmitContext, i: int, j: int, x: str, y: str) -> NwFormula:
    """Same-element tracing: seed index i at x, close under matched
    push/pop edges and same-block identity, require index j at y.

    Guarded by definedness of both index references, which the raw
    closure formula leaves implicit.
    """
    sets = {k: ctx.names.fresh(f"E{k}_") for k in ctx.indices()}
    x1 = ctx.names.fresh("x")
    x2 = ctx.names.fresh("x")
    rules: list = []
    for l in ctx.indices():
        for m in range(ctx.b):
            rules.append(ImpliesNW(AndNW(emit_step(ctx, l, m, x1, x2), InSetNW(x1, sets[l])),
                                   InSetNW(x2, sets[m])))
        rules.append(ImpliesNW(AndNW(emit_block_eq(ctx, x1, x2), InSetNW(x1, sets[l])),
                               InSetNW(x2, sets[l])))
    closed = ForallPosNW(x1, ForallPosNW(x2, and_nw(rules)))
    core = ImpliesNW(AndNW(InSetNW(x, sets[i]), closed), InSetNW(y, sets[j]))
    for k in sorted(sets, reverse=True):
        core = ForallSetNW(sets[k], core)
    return and_nw([emit_mentions(ctx, i, x), emit_mentions(ctx, j, y), core])


def emit_eq_sym(ctx: EmitContext, i: int, x: str, j: int, y: str) -> NwFormula:
    return OrNW(emit_eq(ctx, i, j, x, y), emit_eq(ctx, j, i, y, x))


def _add_letters(ctx: EmitContext, relation: str, idxs: tuple) -> list:
    """Head letters whose action adds the relation tuple at these indices,
    plus the initial letter for initially true propositions."""
    out = []
    for letter in ctx.head_letters():
        action = ctx.dms.action(letter[1])
        s = dict(letter[2])
        for f in action.add.facts:
            if f[0] == relation and tuple(s[a] for a in f[1]) == idxs:
                out.append(letter)
                break
    if not idxs and (relation, ()) in ctx.dms.init.facts:
        out.append(init_letter(ctx.dms))
    return out


def _del_letters(ctx: EmitContext, relation: str, idxs: tuple) -> list:
    out = []
    for letter in ctx.head_letters():
        action = ctx.dms.action(letter[1])
        s = dict(letter[2])
        for f in action.delete.facts:
            if f[0] == relation and tuple(s[a] for a in f[1]) == idxs:
                out.append(letter)
                break
    return out


def emit_add_at(ctx: EmitContext, relation: str, idxs: tuple, x: str) -> NwFormula:
    return or_nw([LetterAt(l, x) for l in _add_letters(ctx, relation, idxs)])


def emit_del_at(ctx: EmitContext, relation: str, idxs: tuple, x: str) -> NwFormula:
    return or_nw([LetterAt(l, x) for l in _del_letters(ctx, relation, idxs)])


def _emit_traced_event(ctx: EmitContext, emit_event, relation: str, lidx: tuple,
                       x: str, z: str) -> NwFormula:
    """Event letter at z tracing the same tuple as indices lidx at x."""
    arity = len(lidx)
    disjuncts = []
    for midx in itertools.product(range(ctx.b), repeat=arity):
        eqs = [emit_eq(ctx, lidx[k], midx[k], x, z) for k in range(arity)]
        disjuncts.append(and_nw([emit_event(ctx, relation, midx, z)] + eqs))
    return or_nw(disjuncts)


def _emit_traced_add(ctx: EmitContext, relation: str, lidx: tuple, x: str, z: str) -> NwFormula:
    arity = len(lidx)
    disjuncts = []
    for aidx in itertools.product(ctx.indices(), repeat=arity):
        eqs = [emit_eq(ctx, lidx[k], aidx[k], x, z) for k in range(arity)]
        disjuncts.append(and_nw([emit_add_at(ctx, relation, aidx, z)] + eqs))
    return or_nw(disjuncts)


def emit_rel(ctx: EmitContext, relation: str, pairs: list, y: str, after: bool) -> NwFormula:
    """The traced tuple is present before (after=False) or after (after=True)
    the block of y.

    A block that both deletes and adds the tuple leaves it present, so the
    killing event is a deletion not accompanied by an addition of the same
    traced tuple in the same block.
    """
    arity = len(pairs)
    x = ctx.names.fresh("x")
    z = ctx.names.fresh("z")
    witness_order = (
        OrNW(LessNW(x, y), emit_block_eq(ctx, x, y)) if after
        else AndNW(LessNW(x, y), NotNW(emit_block_eq(ctx, x, y)))
    )
    z_upper = (
        OrNW(LessNW(z, y), emit_block_eq(ctx, z, y)) if after
        else AndNW(LessNW(z, y), NotNW(emit_block_eq(ctx, z, y)))
    )
    disjuncts = []
    for lidx in itertools.product(ctx.indices(), repeat=arity):
        adds = emit_add_at(ctx, relation, lidx, x)
        eqs = [emit_eq_sym(ctx, lidx[k], pairs[k][1], x, pairs[k][0]) for k in range(arity)]
        eff_del = and_nw([
            _emit_traced_event(ctx, emit_del_at, relation, lidx, x, z),
            NotNW(_emit_traced_add(ctx, relation, lidx, x, z)),
        ])
        no_kill = ForallPosNW(z, NotNW(and_nw([
            LessNW(x, z), NotNW(emit_block_eq(ctx, x, z)), z_upper, eff_del])))
        disjuncts.append(and_nw([adds] + eqs + [no_kill]))
    return ExistsPosNW(x, and_nw([witness_order, or_nw(disjuncts)]))


def emit_succ(ctx: EmitContext, x: str, y: str) -> NwFormula:
    z = ctx.names.fresh("z")
    between = ForallPosNW(z, NotNW(and_nw([LessNW(x, z), LessNW(z, y), emit_internal(ctx, z)])))
    return and_nw([emit_internal(ctx, x), emit_internal(ctx, y), LessNW(x, y), between])


# Translation of run formulas onto encodings


@dataclass
class Translation:
    ast: NwFormula
    evaluate: Callable  # (NestedWord, env?) -> bool


def translate_msofo(phi: Formula, dms: DMS, b: int) -> Translation:
    """Both the nested-word formula and a direct evaluator over encodings.

    Position i of the run is the i-th internal letter; embedded queries at i
    read the instance after block i.  The evaluator consumes the word's
    tracing tables and is exact on valid encodings; the formula is its
    letter-level counterpart for the generic evaluator.
    """
    ctx = emit_context(dms, b)
    ast = _emit_formula(ctx, phi, {}, {})

    def evaluate(nw: NestedWord, env: Optional[dict] = None) -> bool:
        return _direct_eval(nw, phi, dict(env or {}))

    return Translation(ast, evaluate)


def _emit_formula(ctx: EmitContext, phi: Formula, posmap: dict, pairs: dict) -> NwFormula:
    if isinstance(phi, QueryAt):
        x = posmap[phi.pos]
        parts = [emit_internal(ctx, x)]
        for u in sorted(query_free_vars(phi.query)):
            parts.append(_emit_query(ctx, active_query(ctx.dms.schema, u), x, pairs, False))
        parts.append(_emit_query(ctx, phi.query, x, pairs, True))
        return and_nw(parts)
    if isinstance(phi, Less):
        return LessNW(posmap[phi.left], posmap[phi.right])
    if isinstance(phi, SuccF):
        return emit_succ(ctx, posmap[phi.left], posmap[phi.right])
    if isinstance(phi, InSet):
        return InSetNW(posmap[phi.pos], phi.sv)
    if isinstance(phi, NotF):
        return NotNW(_emit_formula(ctx, phi.body, posmap, pairs))
    if isinstance(phi, AndF):
        return AndNW(_emit_formula(ctx, phi.left, posmap, pairs),
                     _emit_formula(ctx, phi.right, posmap, pairs))
    if isinstance(phi, ExistsPos):
        x = ctx.names.fresh("p")
        body = _emit_formula(ctx, phi.body, {**posmap, phi.var: x}, pairs)
        return ExistsPosNW(x, AndNW(emit_internal(ctx, x), body))
    if isinstance(phi, ExistsSet):
        x = ctx.names.fresh("q")
        relativized = ForallPosNW(x, ImpliesNW(InSetNW(x, phi.var), emit_internal(ctx, x)))
        return ExistsSetNW(phi.var, AndNW(relativized, _emit_formula(ctx, phi.body, posmap, pairs)))
    if isinstance(phi, ExistsData):
        x = ctx.names.fresh("d")
        options = []
        for i in ctx.indices():
            body = _emit_formula(ctx, phi.body, posmap, {**pairs, phi.var: (x, i)})
            options.append(AndNW(emit_mentions(ctx, i, x), body))
        return ExistsPosNW(x, AndNW(emit_internal(ctx, x), or_nw(options)))
    raise TypeError(f"not a formula node: {phi!r}")


def _emit_query(ctx: EmitContext, q: Query, x: str, pairs: dict, guard_actives: bool) -> NwFormula:
    """Embedded query at the after-instance of the block of x.

    guard_actives controls whether quantifiers conjoin an activity guard;
    the inserted activity queries are negation-free, so their own
    quantifiers are emitted plain, which keeps the emission finite and is
    sound for positive occurrences.
    """
    if isinstance(q, TrueQ):
        return nw_true()
    if isinstance(q, Rel):
        refs = [pairs[a] for a in q.args]
        return emit_rel(ctx, q.relation, refs, x, after=True)
    if isinstance(q, Not):
        return NotNW(_emit_query(ctx, q.body, x, pairs, guard_actives))
    if isinstance(q, And):
        return AndNW(_emit_query(ctx, q.left, x, pairs, guard_actives),
                     _emit_query(ctx, q.right, x, pairs, guard_actives))
    if isinstance(q, Exists):
        xu = ctx.names.fresh("d")
        options = []
        for i in ctx.indices():
            new_pairs = {**pairs, q.var: (xu, i)}
            parts = [emit_mentions(ctx, i, xu)]
            if guard_actives:
                parts.append(_emit_query(ctx, active_query(ctx.dms.schema, q.var),
                                         x, new_pairs, False))
            parts.append(_emit_query(ctx, q.body, x, new_pairs, guard_actives))
            options.append(and_nw(parts))
        return ExistsPosNW(xu, AndNW(emit_leq(xu, x), AndNW(emit_internal(ctx, xu), or_nw(options))))
    from .query import Eq as QueryEq

    if isinstance(q, QueryEq):
        (x1, i1) = pairs[q.left]
        (x2, i2) = pairs[q.right]
        return emit_eq_sym(ctx, i1, x1, i2, x2)
    raise TypeError(f"not a query node: {q!r}")


def _direct_eval(nw: NestedWord, phi: Formula, env: dict) -> bool:
    blocks = len(nw.blocks)
    ids = nw.element_ids()

    def ev(node: Formula, env: dict) -> bool:
        if isinstance(node, QueryAt):
            bx = env[node.pos]
            inst = nw.instance_after(bx)
            active = adom(inst)
            sub = {}
            for u in query_free_vars(node.query):
                val = env[u]
                if val not in active:
                    return False
                sub[u] = val
            return eval_query(inst, sub, node.query)
        if isinstance(node, Less):
            return env[node.left] < env[node.right]
        if isinstance(node, SuccF):
            return env[node.right] == env[node.left] + 1
        if isinstance(node, InSet):
            return env[node.pos] in env[node.sv]
        if isinstance(node, NotF):
            return not ev(node.body, env)
        if isinstance(node, AndF):
            return ev(node.left, env) and ev(node.right, env)
        if isinstance(node, ExistsPos):
            return any(ev(node.body, {**env, node.var: i}) for i in range(blocks))
        if isinstance(node, ExistsSet):
            return any(ev(node.body, {**env, node.var: frozenset(c)})
                       for c in _subsets(range(blocks)))
        if isinstance(node, ExistsData):
            return any(ev(node.body, {**env, node.var: e}) for e in ids)
        raise TypeError(f"not a formula node: {node!r}")

    return ev(phi, env)


# Bounded model checking


HOLDS = "HoldsUpTo"
COUNTEREXAMPLE = "CounterexamplePrefix"
INCONCLUSIVE = "Inconclusive"

STABLE = "stable"
TRUE_STICKY = "true-sticky"
FALSE_STICKY = "false-sticky"


def stickiness(phi: Formula) -> Optional[str]:
    """How truth on a prefix persists under extension.

    Atoms over fixed positions never change; existential quantifiers only
    gain witnesses, so truth persists; their negations dually preserve
    falsity.  None means neither direction is guaranteed.
    """
    if isinstance(phi, (QueryAt, Less, SuccF, InSet)):
        return STABLE
    if isinstance(phi, NotF):
        inner = stickiness(phi.body)
        if inner == STABLE:
            return STABLE
        if inner == TRUE_STICKY:
            return FALSE_STICKY
        if inner == FALSE_STICKY:
            return TRUE_STICKY
        return None
    if isinstance(phi, AndF):
        left, right = stickiness(phi.left), stickiness(phi.right)
        if left == STABLE:
            return right
        if right == STABLE:
            return left
        return left if left == right else None
    if isinstance(phi, (ExistsPos, ExistsSet, ExistsData)):
        inner = stickiness(phi.body)
        if inner in (STABLE, TRUE_STICKY):
            return TRUE_STICKY
        return None
    raise TypeError(f"not a formula node: {phi!r}")


@dataclass
class CheckResult:
    verdict: str
    depth: int
    prefix: Optional[RunPrefix] = None
    reason: Optional[str] = None

    def to_json(self) -> dict:
        from .semantics import trace_to_json

        out = {"verdict": self.verdict, "depth": self.depth}
        if self.reason:
            out["reason"] = self.reason
        if self.prefix is not None:
            out["counterexample"] = trace_to_json(self.prefix)
        return out

    def dump(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def check(dms: DMS, b: int, phi: Formula, depth: int,
          cap: Optional[int] = None, jobs: int = 1) -> CheckResult:
    """Bounded model check: does every b-bounded run satisfy the sentence?

    Explores the canonical graph to the given depth and evaluates the
    sentence on each explored prefix.  For a falsity-preserving sentence a
    violating prefix is a genuine counterexample (every extension still
    violates); for a truth-preserving sentence, satisfaction on all maximal
    explored prefixes carries over to their extensions.  Canonical
    deduplicated exploration loses nothing here: violations of such shapes
    transfer along state merges up to isomorphism.  Anything else is
    reported Inconclusive with the bounded evaluation summary.
    """
    from .semantics import explore

    if formula_free_vars(phi):
        raise ValueError("check requires a closed formula")
    sticky = stickiness(phi)
    found: dict = {"cex": None}

    def visit(node, result):
        prefix = result.prefix(node, b)
        value = eval_msofo(prefix, {}, phi)
        node.value = value
        if not value and sticky == FALSE_STICKY:
            found["cex"] = prefix
            return True
        return False

    result = explore(dms, b, depth, cap=cap, jobs=jobs, visit=visit)
    if found["cex"] is not None:
        return CheckResult(COUNTEREXAMPLE, depth, prefix=found["cex"])
    if result.truncated:
        return CheckResult(INCONCLUSIVE, depth, reason="state cap exceeded")
    if sticky == FALSE_STICKY:
        return CheckResult(HOLDS, depth)
    parents = {n.parent for n in result.nodes if n.parent is not None}
    maximal = [n for n in result.nodes if n.depth == depth or n.index not in parents]
    if sticky in (TRUE_STICKY, STABLE):
        if all(getattr(n, "value", False) for n in maximal):
            return CheckResult(HOLDS, depth)
        bad = sum(1 for n in maximal if not getattr(n, "value", False))
        return CheckResult(INCONCLUSIVE, depth,
                           reason=f"{bad} of {len(maximal)} maximal prefixes do not satisfy the "
                                  f"formula yet; truth may still arrive on extensions")
    holds = sum(1 for n in result.nodes if getattr(n, "value", False))
    return CheckResult(INCONCLUSIVE, depth,
                       reason=f"formula is not prefix-monotone; it holds on {holds} of "
                              f"{len(result.nodes)} explored prefixes")


# Text syntax for run formulas


def parse_formula(text: str, schema) -> Formula:
    """Parse the textual formula language.

    ``forall x. exists y. y > x & Graduated(u)@y`` style; ``existsg u.`` /
    ``forallg u.`` quantify data, uppercase identifiers are set variables,
    ``[ ... ]@x`` embeds a compound query, ``succ(x, y)`` and ``x in X``
    are primitive.
    """
    from .specparse import ParseError, TokenStream, _GuardParser, tokenize

    ts = TokenStream(tokenize(text))

    def formula() -> Formula:
        tok = ts.peek()
        if tok.kind == "name" and tok.text in ("exists", "forall", "existsg", "forallg"):
            ts.next()
            var = ts.expect_name("variable").text
            ts.expect(".")
            body = formula()
            if tok.text == "existsg":
                return ExistsData(var, body)
            if tok.text == "forallg":
                return ForallData(var, body)
            if var[0].isupper():
                return ExistsSet(var, body) if tok.text == "exists" else ForallSet(var, body)
            return ExistsPos(var, body) if tok.text == "exists" else ForallPos(var, body)
        return implication()

    def implication() -> Formula:
        left = disjunction()
        if ts.accept("->"):
            return ImpliesF(left, formula())
        return left

    def disjunction() -> Formula:
        out = conjunction()
        while ts.accept("|"):
            out = OrF(out, conjunction())
        return out

    def conjunction() -> Formula:
        out = negation()
        while ts.accept("&"):
            out = AndF(out, negation())
        return out

    def negation() -> Formula:
        if ts.accept("!"):
            return NotF(negation())
        return atom()

    def atom() -> Formula:
        if ts.accept("("):
            inner = formula()
            ts.expect(")")
            return inner
        if ts.accept("["):
            q = _GuardParser(ts, schema, {}).parse()
            ts.expect("]")
            ts.expect("@")
            pos = ts.expect_name("position variable").text
            return QueryAt(q, pos)
        tok = ts.expect_name("atom")
        name = tok.text
        if name == "succ" and ts.accept("("):
            x = ts.expect_name("position variable").text
            ts.expect(",")
            y = ts.expect_name("position variable").text
            ts.expect(")")
            return SuccF(x, y)
        if ts.accept("("):
            args = []
            if not ts.at(")"):
                while True:
                    args.append(ts.expect_name("variable").text)
                    if not ts.accept(","):
                        break
            ts.expect(")")
            ts.expect("@")
            pos = ts.expect_name("position variable").text
            if schema is not None and name not in schema:
                raise ParseError(f"unknown relation {name!r}", tok.line, tok.col)
            return QueryAt(Rel(name, tuple(args)), pos)
        if ts.accept("@"):
            pos = ts.expect_name("position variable").text
            return QueryAt(Rel(name, ()), pos)
        if ts.accept("<"):
            other = ts.expect_name("position variable").text
            return Less(name, other)
        if ts.accept(">"):
            other = ts.expect_name("position variable").text
            return Less(other, name)
        if ts.at("in"):
            ts.next()
            sv = ts.expect_name("set variable").text
            return InSet(name, sv)
        ts.error(f"cannot parse atom starting at {name!r}")

    out = formula()
    tok = ts.peek()
    if tok.kind != "eof":
        from .specparse import ParseError

        raise ParseError(f"unexpected trailing input {tok.text!r}", tok.line, tok.col)
    return out
