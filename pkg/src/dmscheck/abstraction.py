"""Recency-indexing abstraction of bounded runs.

A concrete substitution is abstracted letter by letter: each action
parameter is replaced by the recency index of its value (0 = most recent
active value) and the k-th fresh variable by -k.  Over a fixed model and
bound this yields words over a finite symbolic alphabet.  The partial
inverse rebuilds the canonical run, decoding each index against the current
recency list and failing at the first letter whose decoded binding does not
satisfy the guard.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Optional

from .core import adom
from .model import DMS, Action
from .query import eval_query
from .semantics import (
    BConfig,
    RunPrefix,
    b_recent,
    b_step,
    initial_bconfig,
    initial_prefix,
    make_label,
    recency_index,
)


class ParamNotRecent(ValueError):
    """A parameter binding lies outside the recency window; the prefix is
    not b-bounded for the requested bound."""


@dataclass(frozen=True)
class SymLetter:
    """One abstract generating letter <action : s>."""

    action: str
    s: tuple  # sorted ((var, index), ...)

    @property
    def mapping(self) -> dict:
        return dict(self.s)

    def __str__(self) -> str:
        binds = ", ".join(f"{v}->{i}" for v, i in self.s)
        return f"<{self.action}:{{{binds}}}>"


def make_letter(action: str, s: dict) -> SymLetter:
    return SymLetter(action, tuple(sorted(s.items())))


SymWord = tuple  # tuple of SymLetter


def sym_subs(action: Action, b: int) -> list:
    """All symbolic substitutions for an action: the fresh part is forced to
    -1..-n, parameters range over {0..b-1}; b^|params| maps in total."""
    fresh_part = {v: -(k + 1) for k, v in enumerate(action.fresh)}
    out = []
    for combo in itertools.product(range(b), repeat=len(action.params)):
        out.append(make_letter(action.name, {**dict(zip(action.params, combo)), **fresh_part}))
    return out


def sym_alphabet(dms: DMS, b: int) -> list:
    out = []
    for action in sorted(dms.acts, key=lambda a: a.name):
        out.extend(sym_subs(action, b))
    return out


def abstr(prefix: RunPrefix) -> SymWord:
    """The symbolic word of a b-bounded prefix, letter by letter."""
    b = prefix.bound
    letters = []
    for cfg, label in zip(prefix.configs, prefix.labels):
        action = label.action
        sigma = label.subst
        s = {}
        for u in action.params:
            idx = recency_index(cfg.inst, cfg.seq_no, sigma[u])
            if b is not None and idx >= b:
                raise ParamNotRecent(
                    f"{action.name}: parameter {u} -> e{sigma[u]} has recency index {idx} >= {b}")
            s[u] = idx
        for k, v in enumerate(action.fresh):
            s[v] = -(k + 1)
        letters.append(make_letter(action.name, s))
    return tuple(letters)


@dataclass
class ConcrOutcome:
    prefix: Optional[RunPrefix]
    fail_index: Optional[int] = None  # first letter that cannot be realized
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.prefix is not None


def concr(word: SymWord, dms: DMS, b: int) -> ConcrOutcome:
    """Canonical concretization; undefined as soon as a letter has no
    guard-satisfying decoding against the current recency list."""
    prefix = initial_prefix(dms, b)
    for k, letter in enumerate(word):
        try:
            action = dms.action(letter.action)
        except KeyError:
            return ConcrOutcome(None, k, f"unknown action {letter.action!r}")
        s = letter.mapping
        shape = _symsubs_shape_error(action, s, b)
        if shape:
            return ConcrOutcome(None, k, shape)
        cfg = prefix.last
        recent = b_recent(cfg.inst, cfg.seq_no, b)
        sigma = {}
        bad = None
        for u in action.params:
            idx = s[u]
            if idx >= len(recent):
                bad = f"recency index {idx} does not denote an element (|adom| = {len(adom(cfg.inst))})"
                break
            sigma[u] = recent[idx]
        if bad:
            return ConcrOutcome(None, k, bad)
        if not eval_query(cfg.inst, sigma, action.guard):
            return ConcrOutcome(None, k, "guard is not satisfied by the decoded binding")
        base = len(cfg.hist)
        for i, v in enumerate(action.fresh):
            sigma[v] = base + i + 1
        nxt = b_step(cfg, action, sigma, b)
        prefix = prefix.extend(make_label(action, sigma), nxt)
    return ConcrOutcome(prefix)


def _symsubs_shape_error(action: Action, s: dict, b: int) -> Optional[str]:
    if set(s) != set(action.params) | set(action.fresh):
        return "symbolic substitution domain mismatch"
    for k, v in enumerate(action.fresh):
        if s[v] != -(k + 1):
            return f"fresh variable {v} must map to {-(k + 1)}"
    for u in action.params:
        if not 0 <= s[u] < b:
            return f"parameter index {s[u]} outside 0..{b - 1}"
    return None


def is_canonical(prefix: RunPrefix) -> bool:
    """Canonical runs number history e_1..e_n gap-free and draw fresh values
    in declaration order directly above the current history."""
    for cfg in prefix.configs:
        if not cfg.is_canonical():
            return False
    for cfg, label in zip(prefix.configs, prefix.labels):
        base = len(cfg.hist)
        sigma = label.subst
        for k, v in enumerate(label.action.fresh):
            if sigma[v] != base + k + 1:
                return False
    return True


# Serialization


def word_to_json(word: SymWord) -> list:
    return [{"action": l.action, "s": {var: idx for var, idx in l.s}} for l in word]


def word_from_json(data: list) -> SymWord:
    return tuple(make_letter(item["action"], {k: int(v) for k, v in item["s"].items()})
                 for item in data)


def dump_word(word: SymWord) -> str:
    return json.dumps(word_to_json(word), indent=2)
