"""Configuration graphs: unbounded and recency-bounded execution.

A configuration pairs a database instance with the history-set of all values
ever active; the recency-bounded variant adds an injective sequence
numbering of the history.  Under recency bound b an action may only bind its
parameters to the b most recently introduced active values.

Reading note: the bounded-step ordering constraint on freshly introduced
values is stated on variables in the source material; we read it on their
images, i.e. seq_no'(sigma(v_i)) < seq_no'(sigma(v_j)) for i < j, and in
addition assign consecutive numbers directly above the current maximum.

Canonical runs use domain values e_1, e_2, ... in introduction order, so a
canonical configuration is determined by its instance and history size; the
exploration routines deduplicate on that pair.
"""

from __future__ import annotations

import itertools
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Optional

from .core import Instance, Substitution, adom, db_diff, db_union, substitute_db
from .model import DMS, Action
from .query import answers, eval_query

STANDARD = "standard"
ARBITRARY_INPUT = "arbitrary_input"
NON_INJECTIVE = "non_injective"
BULK = "bulk"
MODES = (STANDARD, ARBITRARY_INPUT, NON_INJECTIVE, BULK)


class NotInstantiating(ValueError):
    """The substitution fails one of the instantiation conditions."""


class NotRecent(NotInstantiating):
    """A parameter is bound outside the b most recent active values."""

    def __init__(self, param: str, value: int):
        super().__init__(f"parameter {param} is bound to e{value}, outside the recency window")
        self.param = param
        self.value = value


@dataclass(frozen=True)
class Config:
    inst: Instance
    hist: frozenset


@dataclass(frozen=True, eq=True)
class BConfig:
    inst: Instance
    hist: frozenset
    seq: tuple  # ((value, seq_no), ...) sorted by seq_no ascending

    @cached_property
    def seq_no(self) -> dict:
        return dict(self.seq)

    @property
    def next_no(self) -> int:
        return self.seq[-1][1] + 1 if self.seq else 1

    def is_canonical(self) -> bool:
        return all(v == n for v, n in self.seq) and self.hist == {v for v, _ in self.seq} and (
            not self.seq or self.seq[-1][0] == len(self.seq)
        )


def initial_config(dms: DMS) -> Config:
    return Config(dms.init, frozenset())


def initial_bconfig(dms: DMS) -> BConfig:
    consts = tuple(sorted(dms.constant_values().values()))
    # Declared constants are part of the history from the start, so fresh
    # values can never collide with them.
    return BConfig(dms.init, frozenset(consts), tuple((c, c) for c in consts))


@dataclass(frozen=True)
class StepLabel:
    action: Action
    sigma: tuple  # sorted ((var, value), ...)

    @cached_property
    def subst(self) -> dict:
        return dict(self.sigma)

    def __str__(self) -> str:
        binds = ", ".join(f"{v}->e{e}" for v, e in self.sigma)
        return f"{self.action.name}:{{{binds}}}"


def make_label(action: Action, sigma: Substitution) -> StepLabel:
    return StepLabel(action, tuple(sorted(sigma.items())))


def is_instantiating(action: Action, sigma: Substitution, config) -> bool:
    """The four instantiation conditions at a configuration <I, H>."""
    active = adom(config.inst)
    for u in action.params:
        if sigma[u] not in active:
            return False
    fresh_values = [sigma[v] for v in action.fresh]
    if any(e in config.hist for e in fresh_values):
        return False
    if len(set(fresh_values)) != len(fresh_values):
        return False
    return eval_query(config.inst, {u: sigma[u] for u in action.params}, action.guard)


def apply_update(inst: Instance, action: Action, sigma: Substitution) -> Instance:
    """I' = (I - Del sigma) + Add sigma; additions win over deletions."""
    return db_union(db_diff(inst, substitute_db(sigma, action.delete)),
                    substitute_db(sigma, action.add))


def step(config: Config, action: Action, sigma: Substitution) -> Config:
    if not is_instantiating(action, sigma, config):
        raise NotInstantiating(f"{action.name} is not instantiating under {dict(sigma)}")
    inst = apply_update(config.inst, action, sigma)
    hist = config.hist | {sigma[v] for v in action.fresh}
    return Config(inst, hist)


def b_recent(inst: Instance, seq_no: dict, b: int) -> list:
    """The min(b, |adom|) most recent active values, most recent first."""
    active = adom(inst)
    ranked = sorted(active, key=lambda e: -seq_no[e])
    return ranked[:b]


def recency_index(inst: Instance, seq_no: dict, value: int) -> int:
    """Number of active values strictly more recent than the given one."""
    mine = seq_no[value]
    return sum(1 for e in adom(inst) if seq_no[e] > mine)


def b_step(config: BConfig, action: Action, sigma: Substitution, b: int) -> BConfig:
    recent = set(b_recent(config.inst, config.seq_no, b))
    for u in action.params:
        if sigma[u] not in recent:
            raise NotRecent(u, sigma[u])
    if not is_instantiating(action, sigma, config):
        raise NotInstantiating(f"{action.name} is not instantiating under {dict(sigma)}")
    inst = apply_update(config.inst, action, sigma)
    hist = config.hist | {sigma[v] for v in action.fresh}
    no = config.next_no
    new_seq = config.seq + tuple((sigma[v], no + i) for i, v in enumerate(action.fresh))
    return BConfig(inst, hist, new_seq)


@dataclass(frozen=True)
class RunPrefix:
    """A finite b-bounded (or unbounded, bound=None) execution prefix."""

    configs: tuple  # BConfig, one more than labels
    labels: tuple  # StepLabel
    bound: Optional[int] = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def instances(self) -> list:
        return [c.inst for c in self.configs]

    @property
    def last(self) -> BConfig:
        return self.configs[-1]

    def gadom(self) -> set:
        return set(self.configs[-1].hist)

    def extend(self, label: StepLabel, config: BConfig) -> "RunPrefix":
        return RunPrefix(self.configs + (config,), self.labels + (label,), self.bound)


def initial_prefix(dms: DMS, b: Optional[int]) -> RunPrefix:
    return RunPrefix((initial_bconfig(dms),), (), b)


def replay(dms: DMS, steps: Iterable, b: Optional[int] = None) -> RunPrefix:
    """Replay (action name, substitution) pairs from the initial configuration."""
    prefix = initial_prefix(dms, b)
    for name, sigma in steps:
        action = dms.action(name)
        cfg = prefix.last
        if b is None:
            nxt = step(Config(cfg.inst, cfg.hist), action, sigma)
            no = cfg.next_no
            seq = cfg.seq + tuple((sigma[v], no + i) for i, v in enumerate(action.fresh))
            new = BConfig(nxt.inst, nxt.hist, seq)
        else:
            new = b_step(cfg, action, sigma, b)
        prefix = prefix.extend(make_label(action, sigma), new)
    return prefix


def history_invariant(prefix: RunPrefix) -> bool:
    """H_i equals the union of active domains up to position i.

    Declared constants sit in the history from the start, so they are
    allowed on top of the accumulated active domains.
    """
    base = set(prefix.configs[0].hist)
    acc: set = set()
    for cfg in prefix.configs:
        acc |= adom(cfg.inst)
        if set(cfg.hist) != base | acc:
            return False
    return True


# Successor enumeration over canonical configurations


def _canonical_fresh(config: BConfig, count: int) -> list:
    base = len(config.hist)
    return [base + i + 1 for i in range(count)]


def _param_bindings(action: Action, config: BConfig, b: Optional[int]):
    """Candidate guard bindings: recency-decoded for bounded, adom tuples otherwise."""
    if b is None:
        active = sorted(adom(config.inst))
        for combo in itertools.product(active, repeat=len(action.params)):
            yield dict(zip(action.params, combo))
    else:
        recent = b_recent(config.inst, config.seq_no, b)
        for combo in itertools.product(range(b), repeat=len(action.params)):
            if any(i >= len(recent) for i in combo):
                continue
            yield {u: recent[i] for u, i in zip(action.params, combo)}


def successors(config: BConfig, dms: DMS, b: Optional[int], mode: str = STANDARD):
    """Canonical successors: fresh values are forced to the next unused e_i.

    Yields (StepLabel, BConfig) pairs, deterministically ordered.  Branching
    is bounded by the number of symbolic substitutions per action.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    out = []
    for action in sorted(dms.acts, key=lambda a: a.name):
        if mode == BULK and action.bulk:
            out.extend(_bulk_successors(config, action))
            continue
        for sigma_u in _param_bindings(action, config, b):
            if not eval_query(config.inst, sigma_u, action.guard):
                continue
            for sigma in _fresh_choices(action, sigma_u, config, mode):
                label = make_label(action, sigma)
                nxt = _apply_canonical(config, action, sigma)
                out.append((label, nxt))
    out.sort(key=lambda pair: (pair[0].action.name, pair[0].sigma))
    return out


def _fresh_choices(action: Action, sigma_u: dict, config: BConfig, mode: str):
    n = len(action.fresh)
    if mode in (STANDARD, BULK):
        fresh = _canonical_fresh(config, n)
        yield {**sigma_u, **dict(zip(action.fresh, fresh))}
        return
    if mode == NON_INJECTIVE:
        # One choice per set-partition of the fresh variables; each class is
        # merged onto one canonical new value, ordered by first appearance.
        for part in _set_partitions(list(action.fresh)):
            values = _canonical_fresh(config, len(part))
            sigma = dict(sigma_u)
            for cls, val in zip(part, values):
                for v in cls:
                    sigma[v] = val
            yield sigma
        return
    if mode == ARBITRARY_INPUT:
        # Each input variable is either bound to a history value or is fresh;
        # fresh ones are injective and canonical.
        hist = sorted(config.hist)
        for split in itertools.product([False, True], repeat=n):
            fresh_vars = [v for v, is_new in zip(action.fresh, split) if is_new]
            old_vars = [v for v, is_new in zip(action.fresh, split) if not is_new]
            news = _canonical_fresh(config, len(fresh_vars))
            for old_combo in itertools.product(hist, repeat=len(old_vars)):
                sigma = dict(sigma_u)
                sigma.update(zip(fresh_vars, news))
                sigma.update(zip(old_vars, old_combo))
                yield sigma
        return
    raise ValueError(mode)


def _set_partitions(items: list):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def _apply_canonical(config: BConfig, action: Action, sigma: dict) -> BConfig:
    inst = apply_update(config.inst, action, sigma)
    new_values = sorted({sigma[v] for v in action.fresh} - set(config.hist))
    hist = config.hist | set(new_values)
    no = config.next_no
    seq = config.seq + tuple((val, no + i) for i, val in enumerate(new_values))
    return BConfig(inst, hist, seq)


def _bulk_successors(config: BConfig, action: Action):
    """Retrieve-all-answers step: apply the update for every guard answer."""
    ans = answers(action.guard, config.inst)
    if not ans:
        return []
    fresh = _canonical_fresh(config, len(action.fresh))
    sigma_v = dict(zip(action.fresh, fresh))
    deletions = []
    additions = []
    for frozen in ans:
        sigma = {**dict(frozen), **sigma_v}
        deletions.append(substitute_db(sigma, action.delete))
        additions.append(substitute_db(sigma, action.add))
    inst = config.inst
    for d in deletions:
        inst = db_diff(inst, d)
    for a in additions:
        inst = db_union(inst, a)
    no = config.next_no
    new = BConfig(inst, config.hist | set(fresh),
                  config.seq + tuple((v, no + i) for i, v in enumerate(fresh)))
    return [(make_label(action, sigma_v), new)]


def enumerate_b_successors(config: BConfig, dms: DMS, b: int):
    """One successor per action and guard-satisfying symbolic substitution."""
    return successors(config, dms, b, STANDARD)


# Exploration


@dataclass
class Node:
    config: BConfig
    depth: int
    parent: Optional[int]
    label: Optional[StepLabel]
    index: int


@dataclass
class Exploration:
    nodes: list
    truncated: bool
    depth: int
    complete: bool  # no unexpanded frontier below the depth limit

    def prefix(self, node: Node, bound: Optional[int]) -> RunPrefix:
        chain = []
        cur: Optional[Node] = node
        while cur is not None:
            chain.append(cur)
            cur = self.nodes[cur.parent] if cur.parent is not None else None
        chain.reverse()
        return RunPrefix(tuple(n.config for n in chain),
                         tuple(n.label for n in chain[1:]), bound)

    def states(self) -> set:
        return {state_key(n.config) for n in self.nodes}


def state_key(config: BConfig):
    return (config.inst.facts, len(config.hist))


def explore(dms: DMS, b: Optional[int], depth: int, mode: str = STANDARD,
            order: str = "bfs", cap: Optional[int] = None, jobs: int = 1,
            visit: Optional[Callable[[Node, "Exploration"], bool]] = None) -> Exploration:
    """Depth-bounded canonical state exploration with deduplication.

    States repeat under the key (instance, history size); revisits are not
    re-expanded.  The optional visit callback runs on every node in
    deterministic order and may return True to stop early.  Exceeding the
    state cap sets the truncated flag and stops expansion.
    """
    root = Node(initial_bconfig(dms), 0, None, None, 0)
    result = Exploration([root], False, depth, True)
    seen = {state_key(root.config): 0}
    if visit and visit(root, result):
        result.complete = False
        return result

    def admit(node: Node, label: StepLabel, child_cfg: BConfig) -> Optional[Node]:
        key = state_key(child_cfg)
        if key in seen:
            return None
        if cap is not None and len(result.nodes) >= cap:
            result.truncated = True
            result.complete = False
            return None
        child = Node(child_cfg, node.depth + 1, node.index, label, len(result.nodes))
        seen[key] = child.index
        result.nodes.append(child)
        return child

    if order == "dfs":
        stack = [root]
        while stack:
            node = stack.pop()
            for label, child_cfg in reversed(successors(node.config, dms, b, mode)):
                child = admit(node, label, child_cfg)
                if child is None:
                    if result.truncated:
                        return result
                    continue
                if visit and visit(child, result):
                    result.complete = False
                    return result
                if child.depth < depth:
                    stack.append(child)
                else:
                    result.complete = False
        return result

    frontier = [root]
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while frontier:
            nxt: list = []
            if pool is not None:
                expanded = list(pool.map(lambda n: successors(n.config, dms, b, mode), frontier))
            else:
                expanded = [successors(n.config, dms, b, mode) for n in frontier]
            for node, succ in zip(frontier, expanded):
                for label, child_cfg in succ:
                    child = admit(node, label, child_cfg)
                    if child is None:
                        if result.truncated:
                            return result
                        continue
                    if visit and visit(child, result):
                        result.complete = False
                        return result
                    if child.depth < depth:
                        nxt.append(child)
                    else:
                        result.complete = False
            frontier = nxt
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
    return result


def random_prefix(dms: DMS, b: Optional[int], length: int, rng: random.Random,
                  canonical: bool = True, mode: str = STANDARD) -> RunPrefix:
    """A random walk; with canonical=False, fresh values are drawn at random."""
    prefix = initial_prefix(dms, b)
    for _ in range(length):
        succ = successors(prefix.last, dms, b, mode)
        if not succ:
            break
        label, cfg = succ[rng.randrange(len(succ))]
        if not canonical and label.action.fresh:
            cfg, label = _shuffle_fresh(prefix.last, label, rng)
        prefix = prefix.extend(label, cfg)
    return prefix


def _shuffle_fresh(config: BConfig, label: StepLabel, rng: random.Random):
    action = label.action
    sigma = dict(label.subst)
    used = set(config.hist)
    pool = [e for e in range(1, len(config.hist) + 50) if e not in used]
    rng.shuffle(pool)
    for v in action.fresh:
        sigma[v] = pool.pop()
    inst = apply_update(config.inst, action, sigma)
    hist = config.hist | {sigma[v] for v in action.fresh}
    no = config.next_no
    seq = config.seq + tuple((sigma[v], no + i) for i, v in enumerate(action.fresh))
    return BConfig(inst, hist, seq), make_label(action, sigma)


def replay_symbolic_step(config: BConfig, action: Action, s: dict, b: int,
                         fresh_values: Optional[list] = None) -> Optional[BConfig]:
    """Apply one abstract letter, choosing fresh values (canonical by default).

    Returns None when the letter's recency indices do not decode to a guard
    satisfying binding at this configuration.
    """
    recent = b_recent(config.inst, config.seq_no, b)
    sigma = {}
    for u in action.params:
        idx = s[u]
        if idx < 0 or idx >= len(recent):
            return None
        sigma[u] = recent[idx]
    if not eval_query(config.inst, sigma, action.guard):
        return None
    values = fresh_values if fresh_values is not None else _canonical_fresh(config, len(action.fresh))
    for v, e in zip(action.fresh, values):
        sigma[v] = e
    return b_step(config, action, sigma, b)


# Permutation equivalence


def isomorphic_mod_permutation(p1: RunPrefix, p2: RunPrefix) -> Optional[dict]:
    """Bijection between global active domains witnessing instance-wise
    isomorphism, built by pairing fresh values position by position."""
    if len(p1) != len(p2):
        return None
    lam: dict = {}
    for l1, l2 in zip(p1.labels, p2.labels):
        if l1.action.name != l2.action.name:
            return None
        s1, s2 = l1.subst, l2.subst
        for v in l1.action.fresh:
            e1, e2 = s1[v], s2[v]
            if lam.get(e1, e2) != e2:
                return None
            lam[e1] = e2
    if len(set(lam.values())) != len(lam):
        return None
    for c1, c2 in zip(p1.configs, p2.configs):
        mapped = {(rel, tuple(lam.get(a, a) for a in args)) for rel, args in c1.inst.facts}
        if mapped != set(c2.inst.facts):
            return None
    return lam


# Trace serialization


def fact_to_json(f) -> list:
    return [f[0], list(f[1])]


def fact_from_json(item) -> tuple:
    return (item[0], tuple(item[1]))


def trace_to_json(prefix: RunPrefix) -> list:
    out = [{"facts": [fact_to_json(f) for f in prefix.configs[0].inst]}]
    for label, cfg, prev in zip(prefix.labels, prefix.configs[1:], prefix.configs):
        delta = {str(v): n for v, n in cfg.seq[len(prev.seq):]}
        out.append({
            "facts": [fact_to_json(f) for f in cfg.inst],
            "action": label.action.name,
            "substitution": {var: val for var, val in label.sigma},
            "seq_no_delta": delta,
        })
    return out


def trace_from_json(dms: DMS, data: list, b: Optional[int] = None) -> RunPrefix:
    first = Instance(dms.schema, frozenset(fact_from_json(f) for f in data[0]["facts"]))
    if first.facts != dms.init.facts:
        raise ValueError("trace does not start at the model's initial instance")
    steps = [(entry["action"], {var: int(val) for var, val in entry["substitution"].items()})
             for entry in data[1:]]
    prefix = replay(dms, steps, b)
    for entry, cfg in zip(data[1:], prefix.configs[1:]):
        expect = frozenset(fact_from_json(f) for f in entry["facts"])
        if expect != cfg.inst.facts:
            raise ValueError("trace instance does not match the replayed step")
    return prefix


def dump_trace(prefix: RunPrefix) -> str:
    return json.dumps(trace_to_json(prefix), indent=2)
