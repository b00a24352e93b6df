"""Text format for models: parser and canonical printer.

One model per file::

    constants { c1, c2 }            # optional, extended models only
    schema { p/0; R/1; Q/1 }
    init { p }
    action alpha { params: ; fresh: v1, v2, v3; guard: true; del: ; add: R(v1), p }
    bulk action beta { ... }        # retrieve-all-answers action

Guard syntax: ``true``, ``R(x, ...)``, ``x = y``, ``!``, ``&``, ``|``,
``->``, ``exists x. ...``, ``forall x. ...`` and parentheses; ``&`` binds
tighter than ``|``, which binds tighter than the right-associative ``->``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .core import Fact, Instance, Schema, format_fact
from .model import DMS, Action
from .query import (
    And,
    Eq,
    Exists,
    Forall,
    Implies,
    Not,
    Or,
    Query,
    Rel,
    TRUE,
    TrueQ,
    normalize,
)


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<arrow>->)
  | (?P<punct>[{}();:,./=!&|<>@]|\[|\])
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> list[Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        chunk = m.group(0)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, chunk, line, col))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            col = len(chunk) - chunk.rfind("\n")
        else:
            col += len(chunk)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


class TokenStream:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        tok = self.tokens[self.i]
        if tok.kind != "eof":
            self.i += 1
        return tok

    def at(self, text: str) -> bool:
        return self.peek().text == text

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.next()
            return True
        return False

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.line, tok.col)
        return self.next()

    def expect_name(self, what: str = "name") -> Token:
        tok = self.peek()
        if tok.kind != "name":
            raise ParseError(f"expected {what}, found {tok.text or 'end of input'!r}", tok.line, tok.col)
        return self.next()

    def error(self, message: str):
        tok = self.peek()
        raise ParseError(message, tok.line, tok.col)


KEYWORDS = {"true", "exists", "forall"}


class _GuardParser:
    """Recursive-descent parser for the guard sublanguage."""

    def __init__(self, ts: TokenStream, schema: Schema | None, consts: dict):
        self.ts = ts
        self.schema = schema
        self.consts = consts

    def parse(self) -> Query:
        return self.implication()

    def implication(self) -> Query:
        left = self.disjunction()
        if self.ts.accept("->"):
            return Implies(left, self.implication())
        return left

    def disjunction(self) -> Query:
        out = self.conjunction()
        while self.ts.accept("|"):
            out = Or(out, self.conjunction())
        return out

    def conjunction(self) -> Query:
        out = self.negation()
        while self.ts.accept("&"):
            out = And(out, self.negation())
        return out

    def negation(self) -> Query:
        if self.ts.accept("!"):
            return Not(self.negation())
        return self.atom()

    def atom(self) -> Query:
        ts = self.ts
        if ts.accept("("):
            inner = self.implication()
            ts.expect(")")
            return inner
        tok = ts.peek()
        if tok.kind != "name":
            ts.error(f"expected a guard atom, found {tok.text or 'end of input'!r}")
        if tok.text == "true":
            ts.next()
            return TRUE
        if tok.text in ("exists", "forall"):
            ts.next()
            var = ts.expect_name("variable").text
            ts.expect(".")
            body = self.implication()
            return Exists(var, body) if tok.text == "exists" else Forall(var, body)
        name = ts.next().text
        if ts.accept("("):
            args = []
            if not ts.at(")"):
                while True:
                    args.append(self.term())
                    if not ts.accept(","):
                        break
            ts.expect(")")
            if self.schema is not None:
                if name not in self.schema:
                    raise ParseError(f"unknown relation {name!r}", tok.line, tok.col)
                if self.schema.arity(name) != len(args):
                    raise ParseError(
                        f"{name} used with {len(args)} arguments, declared arity is "
                        f"{self.schema.arity(name)}", tok.line, tok.col)
            return Rel(name, tuple(args))
        if ts.accept("="):
            right = self.term()
            return Eq(self._term_of(name), right)
        if self.schema is not None and name in self.schema:
            if self.schema.arity(name) != 0:
                raise ParseError(
                    f"{name} used with 0 arguments, declared arity is "
                    f"{self.schema.arity(name)}", tok.line, tok.col)
            return Rel(name, ())
        if self.schema is None:
            return Rel(name, ())
        raise ParseError(f"unknown relation {name!r}", tok.line, tok.col)

    def term(self):
        tok = self.ts.expect_name("variable or constant")
        return self._term_of(tok.text)

    def _term_of(self, name: str):
        return self.consts.get(name, name)


def _parse_fact(ts: TokenStream, schema: Schema, consts: dict) -> Fact:
    tok = ts.expect_name("relation name")
    name = tok.text
    if name not in schema:
        raise ParseError(f"unknown relation {name!r}", tok.line, tok.col)
    args: list = []
    if ts.accept("("):
        if not ts.at(")"):
            while True:
                arg = ts.expect_name("variable or constant").text
                args.append(consts.get(arg, arg))
                if not ts.accept(","):
                    break
        ts.expect(")")
    if schema.arity(name) != len(args):
        raise ParseError(
            f"{name} used with {len(args)} arguments, declared arity is "
            f"{schema.arity(name)}", tok.line, tok.col)
    return (name, tuple(args))


def _parse_fact_list(ts: TokenStream, schema: Schema, consts: dict, until: str) -> frozenset:
    facts = set()
    if not ts.at(until):
        while True:
            facts.add(_parse_fact(ts, schema, consts))
            if not ts.accept(","):
                break
    return frozenset(facts)


def _parse_var_list(ts: TokenStream, until: str) -> tuple:
    out = []
    if not ts.at(until):
        while True:
            out.append(ts.expect_name("variable").text)
            if not ts.accept(","):
                break
    return tuple(out)


def parse_spec(text: str) -> DMS:
    """Parse a model from its text form."""
    ts = TokenStream(tokenize(text))

    const_names: tuple = ()
    if ts.at("constants"):
        ts.next()
        ts.expect("{")
        const_names = _parse_var_list(ts, "}")
        ts.expect("}")
    consts = {name: i + 1 for i, name in enumerate(const_names)}

    ts.expect("schema")
    ts.expect("{")
    relations: dict = {}
    if not ts.at("}"):
        while True:
            tok = ts.expect_name("relation name")
            ts.expect("/")
            arity_tok = ts.expect_name("arity")
            if not arity_tok.text.isdigit():
                raise ParseError("arity must be a number", arity_tok.line, arity_tok.col)
            if tok.text in relations:
                raise ParseError(f"duplicate relation {tok.text!r}", tok.line, tok.col)
            relations[tok.text] = int(arity_tok.text)
            if not ts.accept(";"):
                break
    ts.expect("}")
    schema = Schema(relations)

    ts.expect("init")
    ts.expect("{")
    init = Instance(schema, _parse_fact_list(ts, schema, consts, "}"))
    ts.expect("}")

    actions: list[Action] = []
    names_seen = set()
    while not ts.at(""):
        bulk = False
        if ts.at("bulk"):
            ts.next()
            bulk = True
        tok = ts.expect("action")
        name_tok = ts.expect_name("action name")
        if name_tok.text in names_seen:
            raise ParseError(f"duplicate action name {name_tok.text!r}", name_tok.line, name_tok.col)
        names_seen.add(name_tok.text)
        ts.expect("{")
        ts.expect("params")
        ts.expect(":")
        params = _parse_var_list(ts, ";")
        ts.expect(";")
        ts.expect("fresh")
        ts.expect(":")
        fresh = _parse_var_list(ts, ";")
        ts.expect(";")
        ts.expect("guard")
        ts.expect(":")
        guard = normalize(_GuardParser(ts, schema, consts).parse())
        ts.expect(";")
        ts.expect("del")
        ts.expect(":")
        delete = Instance(schema, _parse_fact_list(ts, schema, consts, ";"))
        ts.expect(";")
        ts.expect("add")
        ts.expect(":")
        add = Instance(schema, _parse_fact_list(ts, schema, consts, "}"))
        ts.expect("}")
        actions.append(Action(name_tok.text, params, fresh, guard, delete, add, bulk=bulk))

    return DMS(schema, init, tuple(actions), constants=const_names)


# Printing


def format_query(q: Query, const_names: dict | None = None) -> str:
    names = const_names or {}

    def term(a) -> str:
        if isinstance(a, int):
            return names.get(a, f"e{a}")
        return a

    def walk(node: Query, prec: int) -> str:
        # prec: 0 implication, 1 disjunction, 2 conjunction, 3 negation
        if isinstance(node, TrueQ):
            return "true"
        if isinstance(node, Rel):
            if not node.args:
                return node.relation
            return f"{node.relation}({', '.join(term(a) for a in node.args)})"
        if isinstance(node, Eq):
            return f"{term(node.left)} = {term(node.right)}"
        if isinstance(node, Not):
            body = node.body
            if isinstance(body, Exists) and isinstance(body.body, Not):
                out = f"forall {body.var}. {walk(body.body.body, 0)}"
                return f"({out})" if prec > 0 else out
            if isinstance(body, And) and isinstance(body.left, Not) and isinstance(body.right, Not):
                out = f"{walk(body.left.body, 2)} | {walk(body.right.body, 2)}"
                return f"({out})" if prec > 1 else out
            if isinstance(body, And) and isinstance(body.right, Not):
                out = f"{walk(body.left, 1)} -> {walk(body.right.body, 0)}"
                return f"({out})" if prec > 0 else out
            return f"!{walk(body, 3)}"
        if isinstance(node, And):
            out = f"{walk(node.left, 2)} & {walk(node.right, 3)}"
            return f"({out})" if prec > 2 else out
        if isinstance(node, Exists):
            out = f"exists {node.var}. {walk(node.body, 0)}"
            return f"({out})" if prec > 0 else out
        raise TypeError(f"not a query node: {node!r}")

    return walk(q, 0)


def print_spec(dms: DMS) -> str:
    """Canonical text form; ``parse_spec(print_spec(d))`` is structurally d."""
    names = {v: k for k, v in dms.constant_values().items()}

    def fmt_fact(f: Fact) -> str:
        rel, args = f
        if not args:
            return rel
        return f"{rel}({', '.join(names.get(a, f'e{a}') if isinstance(a, int) else a for a in args)})"

    def fmt_facts(inst: Instance) -> str:
        return ", ".join(fmt_fact(f) for f in inst)

    lines = []
    if dms.constants:
        lines.append("constants { " + ", ".join(dms.constants) + " }")
    rels = "; ".join(f"{n}/{dms.schema.arity(n)}" for n in dms.schema.names())
    lines.append("schema { " + rels + " }")
    lines.append("init { " + fmt_facts(dms.init) + " }")
    for act in dms.acts:
        head = "bulk action" if act.bulk else "action"
        lines.append(
            f"{head} {act.name} {{ "
            f"params: {', '.join(act.params)}; "
            f"fresh: {', '.join(act.fresh)}; "
            f"guard: {format_query(act.guard, names)}; "
            f"del: {fmt_facts(act.delete)}; "
            f"add: {fmt_facts(act.add)} }}"
        )
    return "\n".join(lines) + "\n"


def parse_guard(text: str, schema: Schema | None = None, consts: dict | None = None) -> Query:
    """Parse a standalone guard expression (used by tests and tools)."""
    ts = TokenStream(tokenize(text))
    q = _GuardParser(ts, schema, consts or {}).parse()
    tok = ts.peek()
    if tok.kind != "eof":
        raise ParseError(f"unexpected trailing input {tok.text!r}", tok.line, tok.col)
    return normalize(q)
