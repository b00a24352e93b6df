"""Nested-word encoding of bounded runs and its predicate family.

Each execution step becomes a block: the head letter carries the action and
its recency-indexed substitution, followed by one pop per currently recent
element (most recent first), one push per surviving recent element (least
recent first) and one push per fresh value.  The induced matching relation
lets the word itself trace value identity: the pending pushes at any point
are exactly the active domain, innermost = most recent.

All predicates below are direct semantic algorithms over the word: a single
scan resolves every (block, recency index) mention to the identity of the
value it denotes and replays the instance timeline the word claims.  For
words that encode actual runs this timeline coincides with the concrete
instances; validity checking confirms exactly that, block by block, and
reports the first block violating well-formedness, the pop-count guess, the
survivor guess or the guard.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

from .core import Instance, adom
from .model import DMS, Action
from .query import Exists, Rel, eval_query, free_vars
from .semantics import RunPrefix, b_recent
from .abstraction import abstr, make_letter

# Letters

INIT = "init"
HEAD = "head"
PUSH = "push"
POP = "pop"


def init_letter(dms: DMS):
    return (INIT, dms.init.facts)


def head_letter(action: str, s: dict):
    return (HEAD, action, tuple(sorted(s.items())))


def push(i: int):
    return (PUSH, i)


def pop(i: int):
    return (POP, i)


def is_internal(letter) -> bool:
    return letter[0] in (INIT, HEAD)


def format_letter(letter) -> str:
    kind = letter[0]
    if kind == INIT:
        return "<I0>"
    if kind == HEAD:
        binds = ", ".join(f"{v}->{i}" for v, i in letter[2])
        return f"<{letter[1]}:{{{binds}}}>"
    return f"{kind}_{letter[1]}"


@dataclass(frozen=True)
class VisibleAlphabet:
    """Internal, push and pop letters of the encoding for a model and bound."""

    internal: frozenset
    pushes: frozenset
    pops: frozenset

    def __contains__(self, letter) -> bool:
        return letter in self.internal or letter in self.pushes or letter in self.pops

    @property
    def eta(self) -> int:
        return -min((i for _, i in self.pushes), default=0)


def visible_alphabet(dms: DMS, b: int) -> VisibleAlphabet:
    from .abstraction import sym_alphabet

    internal = {init_letter(dms)}
    for letter in sym_alphabet(dms, b):
        internal.add((HEAD, letter.action, letter.s))
    eta = dms.max_fresh
    return VisibleAlphabet(
        frozenset(internal),
        frozenset(push(i) for i in range(-eta, b)),
        frozenset(pop(i) for i in range(b)),
    )


class UnmatchedPop(ValueError):
    def __init__(self, position: int):
        super().__init__(f"pop with empty stack at position {position}")
        self.position = position


def compute_matching(letters) -> tuple:
    """Stack-discipline matching; returns (set of (push, pop) position pairs,
    tuple of pending push positions)."""
    stack: list = []
    matching = set()
    for pos, letter in enumerate(letters):
        kind = letter[0]
        if kind == PUSH:
            stack.append(pos)
        elif kind == POP:
            if not stack:
                raise UnmatchedPop(pos)
            matching.add((stack.pop(), pos))
    return matching, tuple(stack)


# Blocks


@dataclass(frozen=True)
class Block:
    index: int  # 0 = the initial-instance pseudo block
    head: int  # position of the internal letter
    start: int
    end: int  # exclusive
    action: Optional[str]
    s: tuple
    m: int
    J: tuple  # descending surviving indices
    fresh_count: int

    @property
    def mapping(self) -> dict:
        return dict(self.s)


class EncodingShapeError(ValueError):
    def __init__(self, block: int, message: str):
        super().__init__(f"block {block}: {message}")
        self.block = block


class IndexOutOfRange(ValueError):
    pass


def encode_block(action: Action, s: dict, m: int, J) -> list:
    """Letters of block(action, s, m, J); J is emitted in descending order."""
    J = sorted(J, reverse=True)
    if any(not 0 <= j < m for j in J):
        raise IndexOutOfRange(f"J must lie within 0..{m - 1}")
    for u in action.params:
        if not 0 <= s[u] < m:
            raise IndexOutOfRange(f"s({u}) = {s[u]} outside 0..{m - 1}")
    letters = [head_letter(action.name, s)]
    letters.extend(pop(i) for i in range(m))
    letters.extend(push(i) for i in J)
    letters.extend(push(-(k + 1)) for k in range(len(action.fresh)))
    return letters


def _parse_block(letters, pos: int, index: int):
    """Parse one block starting at pos; returns (Block, next position)."""
    head = letters[pos]
    if head[0] != HEAD:
        raise EncodingShapeError(index, f"expected a block head at position {pos}")
    i = pos + 1
    m = 0
    while i < len(letters) and letters[i][0] == POP:
        if letters[i][1] != m:
            raise EncodingShapeError(index, f"pops must be pop_0..pop_m-1 in order, got pop_{letters[i][1]}")
        m += 1
        i += 1
    J = []
    while i < len(letters) and letters[i][0] == PUSH and letters[i][1] >= 0:
        J.append(letters[i][1])
        i += 1
    if any(a <= b_ for a, b_ in zip(J, J[1:])):
        raise EncodingShapeError(index, "surviving pushes must have strictly descending indices")
    if any(j >= m for j in J):
        raise EncodingShapeError(index, "surviving push index outside the popped window")
    n = 0
    while i < len(letters) and letters[i][0] == PUSH:
        if letters[i][1] != -(n + 1):
            raise EncodingShapeError(index, f"fresh pushes must be push_-1..push_-n, got push_{letters[i][1]}")
        n += 1
        i += 1
    return Block(index, pos, pos, i, head[1], head[2], m, tuple(J), n), i


def parse_blocks(letters) -> list:
    """Initial letter plus a sequence of blocks; raises EncodingShapeError."""
    if not letters or letters[0][0] != INIT:
        raise EncodingShapeError(0, "the word must start with the initial-instance letter")
    blocks = [Block(0, 0, 0, 1, None, (), 0, (), 0)]
    pos = 1
    while pos < len(letters):
        block, pos = _parse_block(letters, pos, len(blocks))
        blocks.append(block)
    return blocks


# Word analysis: element identity and the claimed instance timeline


@dataclass
class Analysis:
    blocks: list
    block_of: list  # position -> block index
    elem: dict  # (block index, recency/fresh index) -> element id
    intro: dict  # element id -> (block index, negative index)
    instances: list  # Instance per block (claimed timeline)
    pending_before: list  # pending push count before each block
    matching: frozenset
    pending: tuple


def _scan(letters, dms: DMS) -> Analysis:
    blocks = parse_blocks(letters)
    if blocks[0].index == 0 and letters[0][1] != dms.init.facts:
        raise EncodingShapeError(0, "initial letter does not carry the model's initial instance")
    block_of = []
    for blk in blocks:
        block_of.extend([blk.index] * (blk.end - blk.start))
    elem: dict = {}
    intro: dict = {}
    instances = [dms.init]
    pending_before = [0]
    stack: list = []
    next_id = 1
    for blk in blocks[1:]:
        pending_before.append(len(stack))
        action = dms.action(blk.action)
        s = blk.mapping
        if blk.m > len(stack):
            raise UnmatchedPop(blk.head + 1 + len(stack))
        popped = [stack[-(j + 1)] for j in range(blk.m)]
        for j, e in enumerate(popped):
            elem[(blk.index, j)] = e
        fresh_ids = []
        for k in range(blk.fresh_count):
            eid = next_id
            next_id += 1
            elem[(blk.index, -(k + 1))] = eid
            intro[eid] = (blk.index, -(k + 1))
            fresh_ids.append(eid)
        prev = instances[-1]
        dels = {_resolve_fact(f, s, elem, blk.index) for f in action.delete.facts}
        adds = {_resolve_fact(f, s, elem, blk.index) for f in action.add.facts}
        instances.append(prev.with_facts((prev.facts - dels) | adds))
        del stack[len(stack) - blk.m:]
        stack.extend(elem[(blk.index, j)] for j in blk.J)
        stack.extend(fresh_ids)
    matching, pending = compute_matching(letters)
    return Analysis(blocks, block_of, elem, intro, instances, pending_before, frozenset(matching), pending)


def _resolve_fact(f, s: dict, elem: dict, block_index: int):
    rel, args = f
    out = []
    for a in args:
        idx = s[a]
        out.append(elem[(block_index, idx)])
    return (rel, tuple(out))


class NestedWord:
    """A visible word over a model's encoding alphabet, with derived tables.

    The tables are built once on first use and read-only afterwards, so they
    may be shared across threads.
    """

    def __init__(self, letters, dms: DMS, b: int):
        if dms.constants:
            raise ValueError("encodings are defined for constant-free models")
        self.letters = tuple(letters)
        self.dms = dms
        self.b = b

    def __len__(self) -> int:
        return len(self.letters)

    def __eq__(self, other) -> bool:
        return isinstance(other, NestedWord) and self.letters == other.letters

    def __hash__(self):
        return hash(self.letters)

    @cached_property
    def analysis(self) -> Analysis:
        return _scan(self.letters, self.dms)

    @cached_property
    def alphabet(self) -> VisibleAlphabet:
        return visible_alphabet(self.dms, self.b)

    @property
    def blocks(self) -> list:
        return self.analysis.blocks

    @property
    def matching(self) -> frozenset:
        return self.analysis.matching

    @property
    def pending(self) -> tuple:
        return self.analysis.pending

    def block_of(self, pos: int) -> int:
        return self.analysis.block_of[pos]

    def head_of_block(self, k: int) -> int:
        return self.blocks[k].head

    def internal_positions(self) -> list:
        return [blk.head for blk in self.blocks]

    def denote(self, block_index: int, index: int):
        return self.analysis.elem.get((block_index, index))

    def instance_before(self, block_index: int) -> Instance:
        if block_index == 0:
            return self.dms.init.with_facts(frozenset())
        return self.analysis.instances[block_index - 1]

    def instance_after(self, block_index: int) -> Instance:
        return self.analysis.instances[block_index]

    def element_ids(self) -> list:
        return sorted(self.analysis.intro)


# The predicate family


def block_eq(nw: NestedWord, x: int, y: int) -> bool:
    """No internal letter strictly separates x and y."""
    return nw.block_of(x) == nw.block_of(y)


def eq_index(nw: NestedWord, i: int, x: int, j: int, y: int) -> bool:
    """Index i in the block of x and index j in the block of y denote the
    same value.

    Equivalent to the forward zig-zag closure of matched push/pop edges and
    same-block index identity: an element's mentions form a chain through
    the blocks that pop it, so the closure reaches exactly the later
    mentions of the same element.  Directional: blocks out of order never
    compare equal.
    """
    bx, by = nw.block_of(x), nw.block_of(y)
    if bx > by:
        return False
    e1 = nw.denote(bx, i)
    e2 = nw.denote(by, j)
    return e1 is not None and e1 == e2


def rel_before(nw: NestedWord, relation: str, pairs, y: int) -> bool:
    """The traced tuple is in the instance before the block of y executes."""
    ids = _trace(nw, pairs)
    if ids is None:
        return False
    by = nw.block_of(y)
    return (relation, ids) in nw.instance_before(by).facts


def rel_after(nw: NestedWord, relation: str, pairs, y: int) -> bool:
    """The traced tuple is in the instance after the block of y executes."""
    ids = _trace(nw, pairs)
    if ids is None:
        return False
    by = nw.block_of(y)
    return (relation, ids) in nw.instance_after(by).facts


def _trace(nw: NestedWord, pairs) -> Optional[tuple]:
    ids = []
    for pos, idx in pairs:
        e = nw.denote(nw.block_of(pos), idx)
        if e is None:
            return None
        ids.append(e)
    return tuple(ids)


def live(nw: NestedWord, x: int, i: int) -> bool:
    """The index-i element of the block of x is active after that block."""
    bx = nw.block_of(x)
    e = nw.denote(bx, i)
    return e is not None and e in adom(nw.instance_after(bx))


def pending_count(nw: NestedWord, x: int) -> int:
    """Pushes before the block of x that are unmatched up to that block."""
    return nw.analysis.pending_before[nw.block_of(x)]


def recent_at_least(nw: NestedWord, x: int, m: int) -> bool:
    return pending_count(nw, x) >= m


# Guard translation, evaluated directly over the word's tables


def translate_guard(q, action: Action, s: dict, x: int):
    """Predicate over (word, pair assignment) realizing the guard of the
    block of x symbolically.

    Action parameters resolve via the block's own substitution; other free
    variables come from the assignment, given either as (position, index)
    pairs or as element ids.  Quantifiers range over values active in the
    instance the guard is evaluated on (the one before the block of x), per
    the active-domain semantics; values merely mentioned earlier but no
    longer active are not guard witnesses.
    """

    def evaluate(nw: NestedWord, pairs=None) -> bool:
        bx = nw.block_of(x)
        env = {}
        for u in action.params:
            env[u] = nw.denote(bx, s[u])
        for var, ref in (pairs or {}).items():
            env[var] = _ref_to_id(nw, ref)
        return eval_guard_env(nw, q, bx, env)

    return evaluate


def _ref_to_id(nw: NestedWord, ref):
    if isinstance(ref, tuple):
        pos, idx = ref
        return nw.denote(nw.block_of(pos), idx)
    return ref


def eval_guard_env(nw: NestedWord, q, block_index: int, env: dict) -> bool:
    """Evaluate a query against the claimed instance before a block, with
    data variables bound to element ids (None = no denoted element)."""
    inst = nw.instance_before(block_index)
    return _eval_ids(inst, q, env)


def _eval_ids(inst: Instance, q, env: dict) -> bool:
    from .query import And, Eq, Not, TrueQ

    if isinstance(q, TrueQ):
        return True
    if isinstance(q, Rel):
        args = []
        for a in q.args:
            v = env[a] if isinstance(a, str) else a
            if v is None:
                return False
            args.append(v)
        return (q.relation, tuple(args)) in inst.facts
    if isinstance(q, Eq):
        def val(a):
            return env[a] if isinstance(a, str) else a
        l, r = val(q.left), val(q.right)
        return l is not None and l == r
    if isinstance(q, Not):
        return not _eval_ids(inst, q.body, env)
    if isinstance(q, And):
        return _eval_ids(inst, q.left, env) and _eval_ids(inst, q.right, env)
    if isinstance(q, Exists):
        for e in sorted(adom(inst)):
            env2 = {**env, q.var: e}
            if _eval_ids(inst, q.body, env2):
                return True
        return False
    raise TypeError(f"not a query node: {q!r}")


# Encoding and validity


def encode_run(prefix: RunPrefix, dms: DMS) -> NestedWord:
    """Encode a canonical b-bounded prefix as its nested word."""
    from .abstraction import is_canonical

    if prefix.bound is None:
        raise ValueError("encoding requires a recency-bounded prefix")
    if not is_canonical(prefix):
        raise ValueError("encoding requires a canonical prefix")
    b = prefix.bound
    letters = [init_letter(dms)]
    word = abstr(prefix)
    for cfg, nxt, letter in zip(prefix.configs, prefix.configs[1:], word):
        action = dms.action(letter.action)
        recent = b_recent(cfg.inst, cfg.seq_no, b)
        m = len(recent)
        after = adom(nxt.inst)
        J = [j for j in range(m) if recent[j] in after]
        letters.extend(encode_block(action, letter.mapping, m, J))
    return NestedWord(letters, dms, b)


WELLFORMED = "wellformed"
M_CONSISTENCY = "m-consistency"
J_CONSISTENCY = "J-consistency"
GUARD = "guard"


@dataclass
class Verdict:
    valid: bool
    bad_block: Optional[int] = None
    condition: Optional[str] = None
    message: Optional[str] = None

    def __bool__(self) -> bool:
        return self.valid


def validate_encoding(nw_or_letters, dms: DMS, b: int) -> Verdict:
    """Check a word block by block against the model and bound.

    Reports the first bad block and which condition it violates; within a
    block the conditions are checked in the order well-formedness, pop-count
    consistency, guard, survivor consistency, so a block whose head cannot
    fire reports the guard before its survivor guesses are judged.
    """
    letters = nw_or_letters.letters if isinstance(nw_or_letters, NestedWord) else tuple(nw_or_letters)
    if not letters or letters[0][0] != INIT or letters[0][1] != dms.init.facts:
        return Verdict(False, 0, WELLFORMED, "missing or wrong initial-instance letter")
    try:
        blocks = parse_blocks(letters)
    except EncodingShapeError as e:
        return Verdict(False, e.block, WELLFORMED, str(e))

    stack: list = []
    inst = dms.init
    next_id = 1
    for blk in blocks[1:]:
        try:
            action = dms.action(blk.action)
        except KeyError:
            return Verdict(False, blk.index, WELLFORMED, f"unknown action {blk.action!r}")
        s = blk.mapping
        problem = _wellformed_block(action, s, blk, b)
        if problem:
            return Verdict(False, blk.index, WELLFORMED, problem)
        if blk.m != min(b, len(stack)):
            return Verdict(False, blk.index, M_CONSISTENCY,
                           f"block pops {blk.m}, recent window has {min(b, len(stack))}")
        popped = {j: stack[-(j + 1)] for j in range(blk.m)}
        sigma = {u: popped[s[u]] for u in action.params}
        if not eval_query(inst, sigma, action.guard):
            return Verdict(False, blk.index, GUARD, "guard fails under the decoded binding")
        fresh_ids = list(range(next_id, next_id + blk.fresh_count))
        next_id += blk.fresh_count
        elem = dict(popped)
        for k, eid in enumerate(fresh_ids):
            elem[-(k + 1)] = eid
        dels = {_resolve_simple(f, s, elem) for f in action.delete.facts}
        adds = {_resolve_simple(f, s, elem) for f in action.add.facts}
        new_inst = inst.with_facts((inst.facts - dels) | adds)
        active_after = adom(new_inst)
        expected_J = {j for j in range(blk.m) if popped[j] in active_after}
        if set(blk.J) != expected_J:
            return Verdict(False, blk.index, J_CONSISTENCY,
                           f"survivors {sorted(blk.J)} vs live indices {sorted(expected_J)}")
        del stack[len(stack) - blk.m:]
        stack.extend(popped[j] for j in blk.J)
        stack.extend(fresh_ids)
        inst = new_inst
    return Verdict(True)


def _resolve_simple(f, s: dict, elem: dict):
    rel, args = f
    return (rel, tuple(elem[s[a]] for a in args))


def _wellformed_block(action: Action, s: dict, blk: Block, b: int) -> Optional[str]:
    if set(s) != set(action.params) | set(action.fresh):
        return "substitution domain does not match the action"
    for k, v in enumerate(action.fresh):
        if s[v] != -(k + 1):
            return f"fresh variable {v} must map to {-(k + 1)}"
    for u in action.params:
        if not 0 <= s[u] < b:
            return f"s({u}) = {s[u]} outside 0..{b - 1}"
        if s[u] >= blk.m:
            return f"s({u}) = {s[u]} not below the pop count {blk.m}"
    if blk.m > b:
        return f"pop count {blk.m} exceeds the bound {b}"
    if blk.fresh_count != len(action.fresh):
        return f"{blk.fresh_count} fresh pushes for an action with {len(action.fresh)} fresh variables"
    return None


# Serialization


def letter_to_json(letter) -> dict:
    kind = letter[0]
    if kind == INIT:
        return {"kind": "int", "payload": {"init": [[r, list(a)] for r, a in sorted(letter[1])]}}
    if kind == HEAD:
        return {"kind": "int", "payload": {"action": letter[1], "s": {v: i for v, i in letter[2]}}}
    return {"kind": kind, "payload": {"index": letter[1]}}


def letter_from_json(item):
    kind = item["kind"]
    payload = item["payload"]
    if kind == "int":
        if "init" in payload:
            return (INIT, frozenset((r, tuple(a)) for r, a in payload["init"]))
        return head_letter(payload["action"], {k: int(v) for k, v in payload["s"].items()})
    if kind in (PUSH, POP):
        return (kind, int(payload["index"]))
    raise ValueError(f"unknown letter kind {kind!r}")


def nw_to_json(nw: NestedWord) -> dict:
    matching, pending = compute_matching(nw.letters)
    return {
        "letters": [letter_to_json(l) for l in nw.letters],
        "matching": sorted([i, j] for i, j in matching),
        "pending": list(pending),
    }


def letters_from_json(data) -> list:
    return [letter_from_json(item) for item in data["letters"]]


def dump_nw(nw: NestedWord) -> str:
    return json.dumps(nw_to_json(nw), indent=2)
