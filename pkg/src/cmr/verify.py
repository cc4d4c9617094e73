"""Propositional properties of a decoded rulebook.

A decoded book is read as a theory: for every task ``y`` exactly one of its
rules is selected and ``y`` takes that rule's truth value.  The selector is
treated adversarially, so a property is *entailed* when it holds for every
concept assignment combined with every possible selection.

Property syntax, loosest binding first::

    a <-> b      (left associative)
    a -> b       (right associative)
    a | b
    a & b
    !a
    name   true   false   ( ... )   role(task, rule, concept, P|N|I)

Role atoms are constants once a book is fixed.
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

from .rules import ROLES, Rulebook, evaluate_batch, global_predict

DEFAULT_CAP = 24
BLOCK = 1 << 14


class ParseError(ValueError):
    def __init__(self, message: str, offset: int, expected: Sequence[str] = ()):
        self.offset = offset
        self.expected = tuple(sorted(set(expected)))
        exp = f"; expected one of {', '.join(self.expected)}" if self.expected else ""
        super().__init__(f"{message} at byte {offset}{exp}")


class ResolveError(ValueError):
    """An atom does not name a concept, task or valid role literal of the book."""


class CapExceeded(ValueError):
    pass


# --------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Const:
    value: bool


@dataclass(frozen=True)
class Atom:
    name: str


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Iff:
    left: "Formula"
    right: "Formula"


Formula = Union[Const, Atom, Not, And, Or, Implies, Iff]

_PREC = {Iff: 1, Implies: 2, Or: 3, And: 4, Not: 5, Atom: 6, Const: 6}
_SYMBOL = {Iff: "<->", Implies: "->", Or: "|", And: "&"}


def render(f: Formula) -> str:
    """Text that :func:`parse` maps back to ``f``, with minimal parentheses."""
    def wrap(g, min_prec):
        s = render(g)
        return f"({s})" if _PREC[type(g)] < min_prec else s

    if isinstance(f, Const):
        return "true" if f.value else "false"
    if isinstance(f, Atom):
        return f.name
    if isinstance(f, Not):
        return "!" + wrap(f.arg, _PREC[Not])
    p = _PREC[type(f)]
    if isinstance(f, Implies):
        left, right = wrap(f.left, p + 1), wrap(f.right, p)
    else:
        left, right = wrap(f.left, p), wrap(f.right, p + 1)
    return f"{left} {_SYMBOL[type(f)]} {right}"


def atoms(f: Formula) -> set[str]:
    if isinstance(f, Atom):
        return {f.name}
    if isinstance(f, Const):
        return set()
    if isinstance(f, Not):
        return atoms(f.arg)
    return atoms(f.left) | atoms(f.right)


# --------------------------------------------------------------------------
# parsing

@dataclass(frozen=True)
class Token:
    kind: str   # IDENT, NOT, AND, OR, IMPLIES, IFF, LPAREN, RPAREN, EOF
    text: str
    offset: int  # byte offset into the UTF-8 source


_IDENT_START = re.compile(r"[A-Za-z_]")
_IDENT_CHAR = re.compile(r"[A-Za-z0-9_,]")
_OPERATORS = [("<->", "IFF"), ("->", "IMPLIES"), ("&", "AND"), ("|", "OR"), ("!", "NOT"),
              ("(", "LPAREN"), (")", "RPAREN")]
_DESCRIBE = {"IDENT": "identifier", "NOT": "'!'", "AND": "'&'", "OR": "'|'", "IMPLIES": "'->'",
             "IFF": "'<->'", "LPAREN": "'('", "RPAREN": "')'", "EOF": "end of input"}


def tokenize(src: str) -> list[Token]:
    """Split ``src`` into tokens.  Parentheses that directly follow an
    identifier character belong to the identifier (``role(y,0,c,P)``) and may
    contain whitespace, which is dropped."""
    byte_at = [0]
    for ch in src:
        byte_at.append(byte_at[-1] + len(ch.encode("utf-8")))
    out, i, n = [], 0, len(src)
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
            continue
        if _IDENT_START.match(ch):
            start, depth, buf = i, 0, []
            while i < n:
                ch = src[i]
                if _IDENT_CHAR.match(ch):
                    buf.append(ch)
                elif ch == "(" and buf:
                    depth += 1
                    buf.append(ch)
                elif ch == ")" and depth > 0:
                    depth -= 1
                    buf.append(ch)
                elif ch.isspace() and depth > 0:
                    pass
                else:
                    break
                i += 1
            if depth:
                raise ParseError("unbalanced parenthesis in identifier", byte_at[start], ["')'"])
            out.append(Token("IDENT", "".join(buf), byte_at[start]))
            continue
        for sym, kind in _OPERATORS:
            if src.startswith(sym, i):
                out.append(Token(kind, sym, byte_at[i]))
                i += len(sym)
                break
        else:
            raise ParseError(f"unknown token {ch!r}", byte_at[i],
                             [_DESCRIBE[k] for k in ("IDENT", "NOT", "LPAREN")])
    out.append(Token("EOF", "", byte_at[n]))
    return out


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.pos = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.pos]

    def fail(self, *kinds: str):
        t = self.tok
        what = "unexpected end of input" if t.kind == "EOF" else f"unexpected {t.text!r}"
        raise ParseError(what, t.offset, [_DESCRIBE[k] for k in kinds])

    def accept(self, kind: str) -> bool:
        if self.tok.kind == kind:
            self.pos += 1
            return True
        return False

    def iff(self) -> Formula:
        f = self.implies()
        while self.accept("IFF"):
            f = Iff(f, self.implies())
        return f

    def implies(self) -> Formula:
        f = self.disj()
        if self.accept("IMPLIES"):
            return Implies(f, self.implies())
        return f

    def disj(self) -> Formula:
        f = self.conj()
        while self.accept("OR"):
            f = Or(f, self.conj())
        return f

    def conj(self) -> Formula:
        f = self.unary()
        while self.accept("AND"):
            f = And(f, self.unary())
        return f

    def unary(self) -> Formula:
        if self.accept("NOT"):
            return Not(self.unary())
        t = self.tok
        if self.accept("IDENT"):
            if t.text in ("true", "false"):
                return Const(t.text == "true")
            return Atom(t.text)
        if self.accept("LPAREN"):
            f = self.iff()
            if not self.accept("RPAREN"):
                self.fail("RPAREN", "AND", "OR", "IMPLIES", "IFF")
            return f
        self.fail("IDENT", "NOT", "LPAREN")


def parse(src: str) -> Formula:
    p = _Parser(tokenize(src))
    f = p.iff()
    if p.tok.kind != "EOF":
        p.fail("EOF", "AND", "OR", "IMPLIES", "IFF")
    return f


# --------------------------------------------------------------------------
# atom resolution

_ROLE_ATOM = re.compile(r"^role\(([^,()]+),([^,()]+),([^,()]+),([^,()]+)\)$")


def role_atom_value(book: Rulebook, name: str) -> bool:
    m = _ROLE_ATOM.match(name)
    if not m:
        raise ResolveError(f"malformed role atom {name!r}; expected role(task,rule,concept,P|N|I)")
    task, rule, concept, role = m.groups()
    if task not in book.tasks:
        raise ResolveError(f"role atom {name!r}: unknown task {task!r}")
    if concept not in book.concepts:
        raise ResolveError(f"role atom {name!r}: unknown concept {concept!r}")
    if role not in ROLES:
        raise ResolveError(f"role atom {name!r}: role must be one of P, N, I")
    rs = book.rules[book.tasks.index(task)]
    if not rule.isdigit() or int(rule) >= len(rs):
        raise ResolveError(f"role atom {name!r}: task {task!r} has rules 0..{len(rs) - 1}")
    return rs[int(rule)].roles[book.concepts.index(concept)] == role


def resolve(f: Formula, book: Rulebook) -> Formula:
    """Replace role atoms by constants and check every other atom exists."""
    if isinstance(f, Const):
        return f
    if isinstance(f, Atom):
        if f.name.startswith("role("):
            return Const(role_atom_value(book, f.name))
        if f.name not in book.concepts and f.name not in book.tasks:
            raise ResolveError(f"unknown atom {f.name!r}: not a concept or task of the rulebook")
        return f
    if isinstance(f, Not):
        return Not(resolve(f.arg, book))
    return type(f)(resolve(f.left, book), resolve(f.right, book))


# --------------------------------------------------------------------------
# checking

@dataclass(frozen=True)
class TheoryModel:
    concepts: tuple[int, ...]
    selected: tuple[int, ...]

    def tasks(self, book: Rulebook) -> tuple[int, ...]:
        return tuple(int(v) for v in global_predict(book, self.selected, self.concepts))

    def to_json(self, book: Rulebook) -> dict:
        return {
            "concepts": dict(zip(book.concepts, self.concepts)),
            "selected": dict(zip(book.tasks, self.selected)),
            "tasks": dict(zip(book.tasks, self.tasks(book))),
        }


@dataclass(frozen=True)
class Verdict:
    entailed: bool
    counterexample: TheoryModel | None
    models_checked: int

    def __post_init__(self):
        if self.entailed == (self.counterexample is not None):
            raise ValueError("a verdict has a counterexample exactly when it is not entailed")


def _check_book(book: Rulebook) -> None:
    for t, rs in zip(book.tasks, book.rules):
        if not rs:
            raise ValueError(f"task {t!r} has no rules; the theory leaves it undefined")


def _models_before(c_index: int, selected: Sequence[int], counts: Sequence[int]) -> int:
    """Rank of ``(c, s)`` in the lexicographic order of all theory models."""
    rank = c_index
    for s, n in zip(selected, counts):
        rank = rank * n + s
    return rank


def _eval_np(f: Formula, env: dict) -> np.ndarray | bool:
    if isinstance(f, Const):
        return f.value
    if isinstance(f, Atom):
        return env[f.name]
    if isinstance(f, Not):
        return ~np.asarray(_eval_np(f.arg, env))
    a, b = _eval_np(f.left, env), _eval_np(f.right, env)
    if isinstance(f, And):
        return np.logical_and(a, b)
    if isinstance(f, Or):
        return np.logical_or(a, b)
    if isinstance(f, Implies):
        return np.logical_or(np.logical_not(a), b)
    return np.equal(a, b)


def _bits(start: int, stop: int, n: int) -> np.ndarray:
    """Rows for assignments ``start..stop-1``; concept 0 is the most significant bit."""
    idx = np.arange(start, stop, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.int8)


def check_entailment(book: Rulebook, prop: Formula | str, *, cap: int = DEFAULT_CAP) -> Verdict:
    """Does ``prop`` hold in every model of the book's theory?

    Assignments are scanned in lexicographic order in blocks.  Within an
    assignment only the achievable values of each mentioned task matter: a
    task can be true (false) iff some rule of it evaluates true (false).
    """
    _check_book(book)
    f = resolve(parse(prop) if isinstance(prop, str) else prop, book)
    n = book.n_concepts
    if n > cap:
        raise CapExceeded(f"enumeration needs 2^{n} concept assignments; the cap allows 2^{cap}")
    counts = [len(rs) for rs in book.rules]
    per_c = int(np.prod(counts, dtype=object))
    mentioned = [t for t, name in enumerate(book.tasks) if name in atoms(f)]
    total = 1 << n
    for start in range(0, total, BLOCK):
        stop = min(total, start + BLOCK)
        C = _bits(start, stop, n)
        env = {name: C[:, i].astype(bool) for i, name in enumerate(book.concepts)}
        truth = {t: np.stack([evaluate_batch(r.roles, C) for r in book.rules[t]], axis=1).astype(bool)
                 for t in mentioned}
        best = None
        for values in itertools.product((False, True), repeat=len(mentioned)):
            feasible = np.ones(len(C), dtype=bool)
            for t, v in zip(mentioned, values):
                feasible &= truth[t].any(axis=1) if v else (~truth[t]).any(axis=1)
                env[book.tasks[t]] = v
            bad = feasible & ~np.broadcast_to(_eval_np(f, env), feasible.shape)
            if not bad.any():
                continue
            row = int(np.argmax(bad))
            sel = [0] * len(counts)
            for t, v in zip(mentioned, values):
                sel[t] = int(np.argmax(truth[t][row] == v))
            key = (row, sel)
            best = key if best is None or key < best else best
        if best is not None:
            row, sel = best
            c_index = start + row
            model = TheoryModel(tuple(int(b) for b in C[row]), tuple(sel))
            return Verdict(False, model, _models_before(c_index, sel, counts) + 1)
    return Verdict(True, None, total * per_c)


# --------------------------------------------------------------------------
# reference checker: plain truth table, one model at a time

def _oracle_source(f, names: dict) -> str:
    kind = type(f).__name__
    if kind == "Const":
        return repr(bool(f.value))
    if kind == "Atom":
        return names[f.name]
    if kind == "Not":
        return f"(not {_oracle_source(f.arg, names)})"
    a, b = _oracle_source(f.left, names), _oracle_source(f.right, names)
    return {
        "And": f"({a} and {b})",
        "Or": f"({a} or {b})",
        "Implies": f"((not {a}) or {b})",
        "Iff": f"({a} == {b})",
    }[kind]


def _oracle_role(book: Rulebook, text: str) -> bool:
    inner = text[len("role("):-1].split(",")
    if len(inner) != 4:
        raise ResolveError(f"malformed role atom {text!r}")
    task, rule, concept, role = inner
    for t, rs in zip(book.tasks, book.rules):
        if t == task:
            for i, cname in enumerate(book.concepts):
                if cname == concept and role in ("P", "N", "I"):
                    k = int(rule)
                    if 0 <= k < len(rs):
                        return rs[k].roles[i] == role
    raise ResolveError(f"role atom {text!r} does not resolve")


def _oracle_substitute(f, book):
    kind = type(f).__name__
    if kind == "Atom" and f.name.startswith("role("):
        return Const(_oracle_role(book, f.name))
    if kind in ("Atom", "Const"):
        return f
    if kind == "Not":
        return Not(_oracle_substitute(f.arg, book))
    return type(f)(_oracle_substitute(f.left, book), _oracle_substitute(f.right, book))


def _oracle_rule_holds(roles: str, c: tuple) -> bool:
    for r, v in zip(roles, c):
        if (r == "P" and v == 0) or (r == "N" and v == 1):
            return False
    return True


def check_oracle(book: Rulebook, prop: Formula | str, *, limit: int = 16) -> Verdict:
    """Straight-line truth table: every assignment, every selection of the
    tasks the property mentions, evaluated one model at a time."""
    f = parse(prop) if isinstance(prop, str) else prop
    f = _oracle_substitute(f, book)
    n = len(book.concepts)
    if n > limit:
        raise CapExceeded(f"oracle enumerates at most 2^{limit} assignments; got 2^{n}")
    names, used_tasks = {}, []
    for a in sorted(atoms(f)):
        if a in book.concepts:
            names[a] = f"c[{book.concepts.index(a)}]"
        elif a in book.tasks:
            used_tasks.append(book.tasks.index(a))
            names[a] = f"y[{book.tasks.index(a)}]"
        else:
            raise ResolveError(f"unknown atom {a!r}")
    used_tasks.sort()
    holds = eval(f"lambda c, y: {_oracle_source(f, names)}")  # noqa: S307 -- generated from a checked AST
    counts = [len(rs) for rs in book.rules]
    per_c = 1
    for k in counts:
        per_c *= k
    for c_index, c in enumerate(itertools.product((0, 1), repeat=n)):
        for choice in itertools.product(*[range(counts[t]) for t in used_tasks]):
            y = [0] * len(book.tasks)
            for t, j in zip(used_tasks, choice):
                y[t] = int(_oracle_rule_holds(book.rules[t][j].roles, c))
            if not holds(c, y):
                sel = [0] * len(book.tasks)
                for t, j in zip(used_tasks, choice):
                    sel[t] = j
                rank = c_index
                for s, k in zip(sel, counts):
                    rank = rank * k + s
                return Verdict(False, TheoryModel(tuple(c), tuple(sel)), rank + 1)
    return Verdict(True, None, (1 << n) * per_c)


# --------------------------------------------------------------------------
# property files

def read_properties(text: str) -> Iterator[tuple[int, str]]:
    """Non-empty formula lines with their 1-based line numbers; ``#`` starts a comment."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            yield lineno, body


def check_properties(book: Rulebook, text: str, *, cap: int = DEFAULT_CAP) -> dict:
    """Check every property in a property file; parse errors are reported
    per line (a property that does not parse is not entailed)."""
    results = []
    for lineno, src in read_properties(text):
        rec = {"line": lineno, "property": src}
        try:
            v = check_entailment(book, src, cap=cap)
        except (ParseError, ResolveError) as e:
            rec.update(entailed=False, error=str(e))
        else:
            rec.update(entailed=v.entailed, models_checked=v.models_checked,
                       counterexample=v.counterexample.to_json(book) if v.counterexample else None)
        results.append(rec)
    return {"all_entailed": all(r["entailed"] for r in results), "properties": results}


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2)
