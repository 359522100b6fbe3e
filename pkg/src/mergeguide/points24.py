"""Symbolic Points24: append numbers/operators to a formula that must equal 24.

Rewards: -1 for an illegal action, 0 for a legal one; at termination (a legal
"=" or reaching the step limit) the step reward is the outcome instead, +10
if the formula evaluates to exactly 24 and -1 otherwise. Illegal actions
leave the formula and card usage untouched but still consume a step.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .policy import ACTION_TOKENS, TOKEN_ID

NUMBER_TOKENS = tuple(str(v) for v in range(1, 11))
OPERATORS = ("+", "-", "*", "/")
MAX_STEPS = 20
TARGET = Fraction(24)
ILLEGAL_REWARD = -1.0
LEGAL_REWARD = 0.0
SUCCESS_REWARD = 10.0
FAILURE_REWARD = -1.0
OBS_DIM = 44
# the 13 ranks A..K, J/Q/K count as 10
STANDARD_DECK = np.array([1, 1, 1, 1, 1, 1, 1, 1, 1, 4], dtype=np.float64) / 13.0


class EpisodeFinishedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Points24State:
    cards: tuple[int, ...]
    formula: tuple[str, ...] = ()
    used_mask: tuple[bool, ...] = (False, False, False, False)
    step_count: int = 0
    done: bool = False

    def __post_init__(self):
        if len(self.cards) != 4 or any(not 1 <= c <= 10 for c in self.cards):
            raise ValueError(f"need four card values in 1..10, got {self.cards}")
        if self.step_count > MAX_STEPS:
            raise ValueError("step_count exceeds the horizon")


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    next_state: Points24State
    done: bool
    info: dict = field(default_factory=dict)


def reset(rng: np.random.Generator, deck_distribution: Sequence[float] | None = None) -> Points24State:
    probs = STANDARD_DECK if deck_distribution is None else np.asarray(deck_distribution, dtype=np.float64)
    if probs.shape != (10,) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
        raise ValueError("deck_distribution must be 10 probabilities over values 1..10")
    cards = tuple(int(v) + 1 for v in rng.choice(10, size=4, p=probs))
    return Points24State(cards=cards)


# --- grammar ------------------------------------------------------------------


def _scan(formula: Iterable[str]):
    """Return ``(expect_operand, depth)`` after ``formula`` or ``None`` if it is
    not a prefix of any well-formed infix expression."""
    expect_operand, depth = True, 0
    for tok in formula:
        if tok in NUMBER_TOKENS:
            if not expect_operand:
                return None
            expect_operand = False
        elif tok == "(":
            if not expect_operand:
                return None
            depth += 1
        elif tok == ")":
            if expect_operand or depth == 0:
                return None
            depth -= 1
        elif tok in OPERATORS:
            if expect_operand:
                return None
            expect_operand = True
        else:
            return None
    return expect_operand, depth


def is_complete(formula: Sequence[str]) -> bool:
    scan = _scan(formula)
    return bool(formula) and scan is not None and scan == (False, 0)


def legal(state: Points24State, action: str) -> bool:
    if action not in ACTION_TOKENS:
        return False
    if action in NUMBER_TOKENS:
        v = int(action)
        return any(c == v and not u for c, u in zip(state.cards, state.used_mask))
    scan = _scan(state.formula)
    if scan is None:
        return False
    expect_operand, depth = scan
    if action == "(":
        return expect_operand
    if action == ")":
        return not expect_operand and depth > 0
    if action == "=":
        return bool(state.formula) and not expect_operand and depth == 0
    return not expect_operand


def evaluate_formula(formula: Sequence[str]) -> Fraction | None:
    """Exact value of a complete formula, ``None`` if malformed or dividing by zero."""
    if not is_complete(formula):
        return None
    pos = 0

    def expr():
        nonlocal pos
        val = term()
        while pos < len(formula) and formula[pos] in ("+", "-"):
            op = formula[pos]
            pos += 1
            rhs = term()
            if val is None or rhs is None:
                val = None
            else:
                val = val + rhs if op == "+" else val - rhs
        return val

    def term():
        nonlocal pos
        val = factor()
        while pos < len(formula) and formula[pos] in ("*", "/"):
            op = formula[pos]
            pos += 1
            rhs = factor()
            if val is None or rhs is None or (op == "/" and rhs == 0):
                val = None
            else:
                val = val * rhs if op == "*" else val / rhs
        return val

    def factor():
        nonlocal pos
        tok = formula[pos]
        pos += 1
        if tok == "(":
            val = expr()
            pos += 1  # ")"
            return val
        return Fraction(int(tok))

    return expr()


def step(state: Points24State, action: str | None, require_all_cards: bool = False) -> StepOutcome:
    """Apply one action; ``None`` stands for an unparseable response."""
    if state.done:
        raise EpisodeFinishedError("episode already finished")
    count = state.step_count + 1
    is_legal = action is not None and legal(state, action)
    success = False
    if not is_legal:
        reward = ILLEGAL_REWARD
        nxt = replace(state, step_count=count)
        done = False
    elif action == "=":
        value = evaluate_formula(state.formula)
        success = value == TARGET and (not require_all_cards or all(state.used_mask))
        nxt = replace(state, step_count=count, done=True)
        done = True
        reward = SUCCESS_REWARD if success else FAILURE_REWARD
    else:
        used = list(state.used_mask)
        if action in NUMBER_TOKENS:
            idx = next(i for i, (c, u) in enumerate(zip(state.cards, used)) if c == int(action) and not u)
            used[idx] = True
        nxt = replace(state, formula=state.formula + (action,), used_mask=tuple(used), step_count=count)
        done = False
        reward = LEGAL_REWARD
    if not done and count >= MAX_STEPS:
        done = True
        reward = FAILURE_REWARD
        nxt = replace(nxt, done=True)
    return StepOutcome(reward=reward, next_state=nxt, done=done,
                       info={"legal": is_legal, "success": success})


def observation_features(state: Points24State) -> np.ndarray:
    """Each card one-hot over its value 1..10, or slot 11 once used."""
    feats = np.zeros(OBS_DIM)
    for i, (c, u) in enumerate(zip(state.cards, state.used_mask)):
        feats[11 * i + (10 if u else c - 1)] = 1.0
    return feats


def formula_ids(state: Points24State) -> list[int]:
    return [TOKEN_ID[t] for t in state.formula]


# --- solver -------------------------------------------------------------------

_ATOM, _ADD, _MUL = 0, 1, 2
_ORDER = {t: i for i, t in enumerate(ACTION_TOKENS)}


def _key(tokens: tuple[str, ...]):
    return (len(tokens), tuple(_ORDER[t] for t in tokens))


def _combine(op: str, left, right):
    (lv, lt, lc), (rv, rt, rc) = left, right
    if op in ("+", "-"):
        value = lv + rv if op == "+" else lv - rv
        cls = _ADD
        wrap_l, wrap_r = False, rc == _ADD
    else:
        if op == "/" and rv == 0:
            return None
        value = lv * rv if op == "*" else lv / rv
        cls = _MUL
        wrap_l, wrap_r = lc == _ADD, rc != _ATOM
    lt = ("(",) + lt + (")",) if wrap_l else lt
    rt = ("(",) + rt + (")",) if wrap_r else rt
    return value, lt + (op,) + rt, cls


def _splits(cards: tuple[int, ...]):
    n = len(cards)
    out = set()
    for mask in range(1, (1 << n) - 1):
        left = tuple(c for i, c in enumerate(cards) if mask >> i & 1)
        right = tuple(c for i, c in enumerate(cards) if not mask >> i & 1)
        out.add((left, right))
    return sorted(out)


@functools.lru_cache(maxsize=None)
def _entries(cards: tuple[int, ...]) -> dict:
    """Every expression over exactly the sorted multiset ``cards``, keyed by
    ``(value, class)`` and keeping the best rendering. Each tree is rendered
    with the minimal parentheses that preserve its structure."""
    if len(cards) == 1:
        return {(Fraction(cards[0]), _ATOM): (str(cards[0]),)}
    entries: dict = {}
    for left, right in _splits(cards):
        for (lv, lc), lt in _entries(left).items():
            for (rv, rc), rt in _entries(right).items():
                for op in OPERATORS:
                    res = _combine(op, (lv, lt, lc), (rv, rt, rc))
                    if res is None:
                        continue
                    key = (res[0], res[2])
                    old = entries.get(key)
                    if old is None or _key(res[1]) < _key(old):
                        entries[key] = res[1]
    return entries


def _best_at_target(cards: tuple[int, ...]) -> tuple[str, ...] | None:
    """Best rendering over exactly ``cards`` whose value is the target, without
    tabulating every value the full multiset can reach."""
    if len(cards) < 4:
        found = [t for (v, _), t in _entries(cards).items() if v == TARGET]
        return min(found, key=_key) if found else None
    best = None
    for left, right in _splits(cards):
        rights = _entries(right)
        for (lv, lc), lt in _entries(left).items():
            # the right operand each operator would need to hit the target
            wanted = {"+": TARGET - lv, "-": lv - TARGET}
            if lv != 0:
                wanted.update({"*": TARGET / lv, "/": lv / TARGET})
            for op, rv in wanted.items():
                for rc in (_ATOM, _ADD, _MUL):
                    rt = rights.get((rv, rc))
                    if rt is None:
                        continue
                    res = _combine(op, (lv, lt, lc), (rv, rt, rc))
                    if res is not None and (best is None or _key(res[1]) < _key(best)):
                        best = res[1]
    return best


@functools.lru_cache(maxsize=None)
def _solve_sorted(cards: tuple[int, ...], require_all: bool) -> tuple[str, ...] | None:
    n = len(cards)
    subsets = {tuple(c for i, c in enumerate(cards) if mask >> i & 1) for mask in range(1, 1 << n)}
    best = None
    for sub in subsets:
        if require_all and len(sub) != n:
            continue
        toks = _best_at_target(sub)
        if toks is not None and (best is None or _key(toks) < _key(best)):
            best = toks
    return None if best is None else best + ("=",)


def solve(cards: Sequence[int], require_all_cards: bool = False) -> list[str] | None:
    """Shortest (then lexicographically smallest, in vocabulary order) winning
    action sequence ending in "=", or ``None`` if no formula reaches 24."""
    if len(cards) != 4 or any(not 1 <= c <= 10 for c in cards):
        raise ValueError(f"need four card values in 1..10, got {cards}")
    out = _solve_sorted(tuple(sorted(cards)), require_all_cards)
    return None if out is None else list(out)


# --- supervised initialization data -------------------------------------------


@dataclass(frozen=True)
class SFTRecord:
    state: Points24State
    thought: tuple[str, ...]
    action: str

    def to_line(self) -> str:
        return "|".join([
            ",".join(str(c) for c in self.state.cards),
            " ".join(self.state.formula),
            " ".join(self.thought),
            self.action,
        ])


def make_sft_dataset(n_hands: int, rng: np.random.Generator, require_all_cards: bool = False) -> list[SFTRecord]:
    records = []
    for _ in range(n_hands):
        state = reset(rng)
        witness = solve(state.cards, require_all_cards)
        if witness is None:
            continue
        for t, action in enumerate(witness):
            records.append(SFTRecord(state, tuple(witness[t:]), action))
            state = step(state, action, require_all_cards).next_state
    return records


def dataset_checksum(records: Sequence[SFTRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.to_line().encode("utf-8") + b"\n")
    return h.hexdigest()
