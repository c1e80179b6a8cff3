"""Syntactically co-safe LTL: parsing, positive normal form and DFA compilation.

The DFA is built by formula progression. Each automaton state is a canonical
formula (the obligation still to be met); reading a letter progresses the
formula by one step. States equal to ``true`` accept, states equal to
``false`` collapse into a single sink.

Concrete syntax::

    phi := true | false | ident | '!' phi | 'X' phi | 'F' phi
         | phi '&' phi | phi '|' phi | phi 'U' phi | '(' phi ')'

Precedence, tightest first: ``!``, ``X``/``F``, ``&``, ``|``, ``U``
(right-associative).
"""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import kernels

RESERVED = frozenset({"X", "F", "U", "true", "false"})
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
DEFAULT_STATE_BUDGET = 10_000
DEFAULT_MAX_AP = 12


class FormulaSyntaxError(ValueError):
    def __init__(self, message: str, position: int, expected: str):
        super().__init__(f"{message} at position {position} (expected {expected})")
        self.position = position
        self.expected = expected


class UnknownProposition(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown atomic proposition {name!r}")
        self.name = name


class NotCoSafe(ValueError):
    """Negation cannot be pushed to the atoms without 'always'/'release'."""


class StateBudgetExceeded(RuntimeError):
    def __init__(self, limit: int):
        super().__init__(f"DFA construction exceeded the state budget of {limit}")
        self.limit = limit


def check_proposition(name: str) -> str:
    if not name or not _IDENT.match(name) or name in RESERVED:
        raise ValueError(f"invalid atomic proposition name {name!r}")
    return name


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

class Formula:
    """Immutable formula node. Equality and hashing are structural."""

    __slots__ = ("_hash", "_text")

    def _fields(self) -> tuple:
        raise NotImplementedError

    def children(self) -> tuple["Formula", ...]:
        return ()

    def _key(self):
        return (type(self).__name__,) + self._fields()

    def __eq__(self, other):
        if self is other:
            return True
        if type(self) is not type(other) or hash(self) != hash(other):
            return False
        return self._fields() == other._fields()

    def __hash__(self):
        try:
            return self._hash
        except AttributeError:
            h = hash(self._key())
            object.__setattr__(self, "_hash", h)
            return h

    def __setattr__(self, name, value):
        raise AttributeError("formulas are immutable")

    def __str__(self):
        try:
            return self._text
        except AttributeError:
            text = self._render()
            object.__setattr__(self, "_text", text)
            return text

    def _render(self) -> str:
        raise NotImplementedError


class Const(Formula):
    __slots__ = ("value",)

    def __init__(self, value: bool):
        object.__setattr__(self, "value", bool(value))

    def _fields(self):
        return (self.value,)

    def _render(self):
        return "true" if self.value else "false"

    def __repr__(self):
        return "TRUE" if self.value else "FALSE"


TRUE = Const(True)
FALSE = Const(False)


class Atom(Formula):
    __slots__ = ("name",)

    def __init__(self, name: str):
        object.__setattr__(self, "name", name)

    def _fields(self):
        return (self.name,)

    def _render(self):
        return self.name

    def __repr__(self):
        return f"Atom({self.name!r})"


class NegAtom(Formula):
    __slots__ = ("name",)

    def __init__(self, name: str):
        object.__setattr__(self, "name", name)

    def _fields(self):
        return (self.name,)

    def _render(self):
        return "!" + self.name

    def __repr__(self):
        return f"NegAtom({self.name!r})"


class Not(Formula):
    """General negation; only present before conversion to PNF."""

    __slots__ = ("arg",)

    def __init__(self, arg: Formula):
        object.__setattr__(self, "arg", arg)

    def _fields(self):
        return (self.arg,)

    def children(self):
        return (self.arg,)

    def _render(self):
        return f"!({self.arg})"

    def __repr__(self):
        return f"Not({self.arg!r})"


class _NAry(Formula):
    __slots__ = ("args",)
    _op = ""

    def __init__(self, *args: Formula):
        if len(args) < 2:
            raise ValueError(f"{type(self).__name__} needs at least two operands")
        object.__setattr__(self, "args", tuple(args))

    def _fields(self):
        return self.args

    def children(self):
        return self.args

    def _render(self):
        return "(" + f" {self._op} ".join(str(a) for a in self.args) + ")"

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(repr(a) for a in self.args)})"


class And(_NAry):
    __slots__ = ()
    _op = "&"


class Or(_NAry):
    __slots__ = ()
    _op = "|"


class Next(Formula):
    __slots__ = ("arg",)

    def __init__(self, arg: Formula):
        object.__setattr__(self, "arg", arg)

    def _fields(self):
        return (self.arg,)

    def children(self):
        return (self.arg,)

    def _render(self):
        return f"X {_wrap(self.arg)}"

    def __repr__(self):
        return f"Next({self.arg!r})"


class Until(Formula):
    __slots__ = ("left", "right")

    def __init__(self, left: Formula, right: Formula):
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def _fields(self):
        return (self.left, self.right)

    def children(self):
        return (self.left, self.right)

    def _render(self):
        if self.left == TRUE:
            return f"F {_wrap(self.right)}"
        return f"({self.left} U {self.right})"

    def __repr__(self):
        if self.left == TRUE:
            return f"Eventually({self.right!r})"
        return f"Until({self.left!r}, {self.right!r})"


def _wrap(f: Formula) -> str:
    text = str(f)
    if isinstance(f, (Next, Not)) or (isinstance(f, Until) and f.left == TRUE):
        return f"({text})"
    return text


def Eventually(f: Formula) -> Formula:
    """``F f`` is sugar for ``true U f``."""
    return Until(TRUE, f)


def atoms(f: Formula) -> frozenset[str]:
    if isinstance(f, (Atom, NegAtom)):
        return frozenset({f.name})
    out: set[str] = set()
    for c in f.children():
        out |= atoms(c)
    return frozenset(out)


def is_pnf(f: Formula) -> bool:
    if isinstance(f, Not):
        return False
    return all(is_pnf(c) for c in f.children())


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<sym>[()!&|])|(?P<word>[A-Za-z_][A-Za-z0-9_]*))")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            bad = len(text) - len(text[pos:].lstrip())
            raise FormulaSyntaxError(f"unexpected character {text[bad]!r}", bad, "a token")
        if m.group("sym"):
            tokens.append(("sym", m.group("sym"), m.start("sym")))
        else:
            tokens.append(("word", m.group("word"), m.start("word")))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, ap):
        self.tokens = _tokenize(text)
        self.i = 0
        self.ap = ap

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at(self, value: str) -> bool:
        kind, val, _ = self.peek()
        return kind != "eof" and val == value

    def parse(self) -> Formula:
        f = self.until()
        kind, val, pos = self.peek()
        if kind != "eof":
            raise FormulaSyntaxError(f"unexpected token {val!r}", pos, "end of input")
        return f

    def until(self) -> Formula:
        left = self.disjunction()
        if self.at("U"):
            self.take()
            return Until(left, self.until())
        return left

    def disjunction(self) -> Formula:
        f = self.conjunction()
        while self.at("|"):
            self.take()
            f = Or(f, self.conjunction())
        return f

    def conjunction(self) -> Formula:
        f = self.unary()
        while self.at("&"):
            self.take()
            f = And(f, self.unary())
        return f

    def unary(self) -> Formula:
        kind, val, pos = self.peek()
        if val == "!" and kind == "sym":
            self.take()
            return Not(self.unary())
        if kind == "word" and val == "X":
            self.take()
            return Next(self.unary())
        if kind == "word" and val == "F":
            self.take()
            return Eventually(self.unary())
        return self.primary()

    def primary(self) -> Formula:
        kind, val, pos = self.take()
        if kind == "sym" and val == "(":
            f = self.until()
            kind2, val2, pos2 = self.take()
            if val2 != ")":
                raise FormulaSyntaxError(f"unexpected token {val2 or 'end of input'!r}", pos2, "')'")
            return f
        if kind == "word":
            if val == "true":
                return TRUE
            if val == "false":
                return FALSE
            if val in RESERVED:
                raise FormulaSyntaxError(f"operator {val!r} in operand position", pos, "a proposition or '('")
            if self.ap is not None and val not in self.ap:
                raise UnknownProposition(val)
            return Atom(val)
        what = "end of input" if kind == "eof" else repr(val)
        raise FormulaSyntaxError(f"unexpected {what}", pos, "a proposition, 'true', 'false', '!', 'X', 'F' or '('")


def parse_formula(text: str, ap: Iterable[str] | None = None) -> Formula:
    """Parse ``text`` into a formula AST (possibly with general negation).

    When ``ap`` is given every identifier must belong to it.
    """
    if not text or not text.strip():
        raise FormulaSyntaxError("empty formula", 0, "a formula")
    ap_set = None if ap is None else frozenset(check_proposition(p) for p in ap)
    return _Parser(text, ap_set).parse()


# ---------------------------------------------------------------------------
# Positive normal form and canonical simplification
# ---------------------------------------------------------------------------

def to_pnf(f: Formula) -> Formula:
    """Push negations down to the atoms."""
    if isinstance(f, Not):
        return _negate(f.arg)
    if isinstance(f, And):
        return And(*(to_pnf(a) for a in f.args))
    if isinstance(f, Or):
        return Or(*(to_pnf(a) for a in f.args))
    if isinstance(f, Next):
        return Next(to_pnf(f.arg))
    if isinstance(f, Until):
        return Until(to_pnf(f.left), to_pnf(f.right))
    return f


def _negate(f: Formula) -> Formula:
    if isinstance(f, Const):
        return FALSE if f.value else TRUE
    if isinstance(f, Atom):
        return NegAtom(f.name)
    if isinstance(f, NegAtom):
        return Atom(f.name)
    if isinstance(f, Not):
        return to_pnf(f.arg)
    if isinstance(f, And):
        return Or(*(_negate(a) for a in f.args))
    if isinstance(f, Or):
        return And(*(_negate(a) for a in f.args))
    if isinstance(f, Next):
        return Next(_negate(f.arg))
    if isinstance(f, Until):
        raise NotCoSafe(f"negated until/eventually {f} needs a release/always operator")
    raise TypeError(f"not a formula: {f!r}")


def _complement(lit: Formula):
    if isinstance(lit, Atom):
        return NegAtom(lit.name)
    if isinstance(lit, NegAtom):
        return Atom(lit.name)
    return None


def _sort(items) -> tuple:
    return tuple(sorted(items, key=str))


def _conj(args: Iterable[Formula]) -> Formula:
    """Canonical conjunction of already-canonical operands."""
    flat: set[Formula] = set()
    for a in args:
        if a == FALSE:
            return FALSE
        if a == TRUE:
            continue
        if isinstance(a, And):
            flat.update(a.args)
        else:
            flat.add(a)
    for a in flat:
        c = _complement(a)
        if c is not None and c in flat:
            return FALSE
    # absorption: a & (a | b) == a
    kept = set()
    for o in flat:
        if isinstance(o, Or):
            members = set(o.args)
            if any(x is not o and (x in members or (isinstance(x, Or) and set(x.args) < members)) for x in flat):
                continue
        kept.add(o)
    if not kept:
        return TRUE
    if len(kept) == 1:
        return next(iter(kept))
    return And(*_sort(kept))


def _disj(args: Iterable[Formula]) -> Formula:
    """Canonical disjunction of already-canonical operands."""
    flat: set[Formula] = set()
    for a in args:
        if a == TRUE:
            return TRUE
        if a == FALSE:
            continue
        if isinstance(a, Or):
            flat.update(a.args)
        else:
            flat.add(a)
    for a in flat:
        c = _complement(a)
        if c is not None and c in flat:
            return TRUE
    kept = set()
    for o in flat:
        if isinstance(o, And):
            members = set(o.args)
            if any(x is not o and (x in members or (isinstance(x, And) and set(x.args) < members)) for x in flat):
                continue
        kept.add(o)
    if not kept:
        return FALSE
    if len(kept) == 1:
        return next(iter(kept))
    return Or(*_sort(kept))


def _next(arg: Formula) -> Formula:
    if isinstance(arg, Const):
        return arg
    return Next(arg)


def _until(left: Formula, right: Formula) -> Formula:
    if isinstance(right, Const):
        return right
    if left == FALSE or left == right:
        return right
    return Until(left, right)


@lru_cache(maxsize=None)
def simplify(f: Formula) -> Formula:
    """Canonical form: flattened, sorted, deduplicated and/or with unit and
    absorption rules applied. Requires PNF."""
    if isinstance(f, (Const, Atom, NegAtom)):
        return f
    if isinstance(f, And):
        return _conj(simplify(a) for a in f.args)
    if isinstance(f, Or):
        return _disj(simplify(a) for a in f.args)
    if isinstance(f, Next):
        return _next(simplify(f.arg))
    if isinstance(f, Until):
        return _until(simplify(f.left), simplify(f.right))
    if isinstance(f, Not):
        raise ValueError("simplify expects a formula in positive normal form")
    raise TypeError(f"not a formula: {f!r}")


@lru_cache(maxsize=None)
def _progress(f: Formula, sigma: frozenset) -> Formula:
    if isinstance(f, Const):
        return f
    if isinstance(f, Atom):
        return TRUE if f.name in sigma else FALSE
    if isinstance(f, NegAtom):
        return FALSE if f.name in sigma else TRUE
    if isinstance(f, And):
        return _conj(_progress(a, sigma) for a in f.args)
    if isinstance(f, Or):
        return _disj(_progress(a, sigma) for a in f.args)
    if isinstance(f, Next):
        return f.arg
    if isinstance(f, Until):
        return _disj([_progress(f.right, sigma), _conj([_progress(f.left, sigma), f])])
    raise ValueError(f"progress expects a PNF formula, got {f!r}")


def progress(f: Formula, sigma: Iterable[str]) -> Formula:
    """One-step derivative of ``f`` after reading the letter ``sigma``."""
    return _progress(simplify(f), frozenset(sigma))


# ---------------------------------------------------------------------------
# DFA
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dfa:
    """Complete DFA over the alphabet 2^AP.

    Letters are indexed by bitmask over ``ap`` (sorted): bit ``i`` set means
    ``ap[i]`` holds. ``delta[q, letter]`` is the successor state.
    """

    ap: tuple[str, ...]
    delta: np.ndarray
    initial: int
    accepting: frozenset
    sink: int | None = None
    labels: tuple[str, ...] = ()

    @property
    def n_states(self) -> int:
        return self.delta.shape[0]

    @property
    def states(self) -> range:
        return range(self.n_states)

    @property
    def n_symbols(self) -> int:
        return self.delta.shape[1]

    def symbol_index(self, symbol: Iterable[str]) -> int:
        idx = 0
        for p in symbol:
            try:
                idx |= 1 << self.ap.index(p)
            except ValueError:
                raise UnknownProposition(p) from None
        return idx

    def symbol(self, index: int) -> frozenset:
        return frozenset(p for i, p in enumerate(self.ap) if index >> i & 1)

    def step(self, q: int, symbol: Iterable[str]) -> int:
        return int(self.delta[q, self.symbol_index(symbol)])

    def is_accepting(self, q: int) -> bool:
        return q in self.accepting

    def accepting_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.accepting)] = True
        return mask

    def successors(self, q: int) -> set[int]:
        return set(int(x) for x in np.unique(self.delta[q]))

    # -- export ----------------------------------------------------------------
    def to_json(self) -> dict:
        transitions = []
        for q in self.states:
            for s in range(self.n_symbols):
                transitions.append({"from": q, "symbol": sorted(self.symbol(s)), "to": int(self.delta[q, s])})
        return {
            "states": list(self.states),
            "labels": list(self.labels),
            "initial": self.initial,
            "accepting": sorted(self.accepting),
            "sink": self.sink,
            "ap": list(self.ap),
            "transitions": transitions,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Dfa":
        ap = tuple(doc["ap"])
        n = len(doc["states"])
        delta = np.full((n, 2 ** len(ap)), -1, dtype=np.int64)
        for t in doc["transitions"]:
            idx = 0
            for p in t["symbol"]:
                idx |= 1 << ap.index(p)
            delta[t["from"], idx] = t["to"]
        if (delta < 0).any():
            raise ValueError("DFA document is not complete")
        labels = tuple(doc.get("labels") or (str(q) for q in range(n)))
        return cls(ap, delta, int(doc["initial"]), frozenset(doc["accepting"]), doc.get("sink"), labels)

    def to_dot(self, name: str = "dfa") -> str:
        lines = [f"digraph {name} {{", "  rankdir=LR;", '  __start [shape=point];']
        for q in self.states:
            shape = "doublecircle" if q in self.accepting else "circle"
            tip = self.labels[q].replace('"', '\\"') if self.labels else ""
            lines.append(f'  q{q} [shape={shape}, label="q{q}", tooltip="{tip}"];')
        lines.append(f"  __start -> q{self.initial};")
        for q in self.states:
            grouped: dict[int, list[int]] = {}
            for s in range(self.n_symbols):
                grouped.setdefault(int(self.delta[q, s]), []).append(s)
            for dst, syms in grouped.items():
                if len(syms) == self.n_symbols:
                    label = "true"
                else:
                    label = ", ".join("{" + ",".join(sorted(self.symbol(s))) + "}" for s in syms)
                lines.append(f'  q{q} -> q{dst} [label="{label}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def compile_dfa(f: Formula, ap: Iterable[str] | None = None, *, max_states: int = DEFAULT_STATE_BUDGET,
                max_ap: int = DEFAULT_MAX_AP) -> Dfa:
    """Compile a PNF formula to a complete DFA accepting its good prefixes.

    States are the canonical formulas reachable by progression. After the
    closure is built, states from which every continuation reaches ``true``
    are merged into the accepting state and states that can no longer reach
    it are merged into the sink, so acceptance is decided on the first
    letter that makes the formula unavoidable.
    """
    if not is_pnf(f):
        raise ValueError("compile_dfa expects a formula in positive normal form (see to_pnf)")
    props = tuple(sorted(set(ap) if ap is not None else atoms(f)))
    for p in props:
        check_proposition(p)
    missing = atoms(f) - set(props)
    if missing:
        raise UnknownProposition(sorted(missing)[0])
    if len(props) > max_ap:
        raise ValueError(f"{len(props)} atomic propositions exceed the configured cap of {max_ap}")
    n_sym = 2 ** len(props)
    symbols = [frozenset(p for i, p in enumerate(props) if m >> i & 1) for m in range(n_sym)]

    start = simplify(f)
    formulas = [start]
    index = {start: 0}
    rows: list[list[int]] = []
    queue = deque([start])
    while queue:
        g = queue.popleft()
        row = []
        for sigma in symbols:
            h = _progress(g, sigma)
            j = index.get(h)
            if j is None:
                if len(formulas) >= max_states:
                    raise StateBudgetExceeded(max_states)
                j = len(formulas)
                index[h] = j
                formulas.append(h)
                queue.append(h)
            row.append(j)
        rows.append(row)
    raw = np.asarray(rows, dtype=np.int64)
    n = len(formulas)

    # states from which every path reaches `true` (attractor)
    won = np.array([g == TRUE for g in formulas])
    changed = True
    while changed:
        new = won | won[raw].all(axis=1)
        changed = bool((new != won).any())
        won = new
    # states from which `true` is reachable
    alive = won.copy()
    changed = True
    while changed:
        new = alive | alive[raw].any(axis=1)
        changed = bool((new != alive).any())
        alive = new

    # renumber: merge won -> one accepting state, dead -> one sink
    order: list[int] = []
    new_id = np.full(n, -1, dtype=np.int64)
    acc_id = sink_id = None
    labels: list[str] = []
    queue2 = deque([0])
    seen = {0}
    while queue2:
        i = queue2.popleft()
        if won[i]:
            if acc_id is None:
                acc_id = len(labels)
                labels.append("true")
            new_id[i] = acc_id
        elif not alive[i]:
            if sink_id is None:
                sink_id = len(labels)
                labels.append("false")
            new_id[i] = sink_id
        else:
            new_id[i] = len(labels)
            labels.append(str(formulas[i]))
            order.append(i)
        for j in raw[i]:
            j = int(j)
            if j not in seen:
                seen.add(j)
                queue2.append(j)
    m = len(labels)
    delta = np.empty((m, n_sym), dtype=np.int64)
    if acc_id is not None:
        delta[acc_id] = acc_id
    if sink_id is not None:
        delta[sink_id] = sink_id
    for i in order:
        delta[new_id[i]] = new_id[raw[i]]
    accepting = frozenset() if acc_id is None else frozenset({acc_id})
    return Dfa(props, delta, int(new_id[0]), accepting, sink_id, tuple(labels))


def compile_text(text: str, ap: Iterable[str] | None = None, **kwargs) -> Dfa:
    """Parse, normalise and compile in one go."""
    ap = None if ap is None else list(ap)
    f = to_pnf(parse_formula(text, ap))
    return compile_dfa(f, ap, **kwargs)


def accepts(d: Dfa, word: Sequence[Iterable[str]]) -> bool:
    """Good-prefix acceptance: true once the run has entered an accepting state."""
    q = d.initial
    if q in d.accepting:
        return True
    for sigma in word:
        q = d.step(q, sigma)
        if q in d.accepting:
            return True
    return False


def accepts_batch(d: Dfa, words: np.ndarray) -> np.ndarray:
    """Vectorised ``accepts`` over letter-index words (``-1`` pads short words)."""
    words = np.ascontiguousarray(words, dtype=np.int64)
    if words.ndim != 2:
        raise ValueError("words must be a 2-d array of letter indices")
    return kernels.dfa_run(d.delta, d.initial, d.accepting_mask(), words)


def save_dfa(d: Dfa, path) -> None:
    with open(path, "w") as fh:
        json.dump(d.to_json(), fh, indent=1)


def load_dfa(path) -> Dfa:
    with open(path) as fh:
        return Dfa.from_json(json.load(fh))
