"""Seeded random rulebooks and formulas shared by the verify tests and the
acceptance suite."""
import numpy as np

from cmr.rules import Rulebook, SymbolicRule
from cmr.verify import And, Atom, Const, Iff, Implies, Not, Or

BINARY = (And, Or, Implies, Iff)


def random_book(rng, *, max_concepts=12, max_tasks=3, max_rules=4, min_concepts=1):
    n_c = int(rng.integers(min_concepts, max_concepts + 1))
    n_t = int(rng.integers(1, max_tasks + 1))
    # bias toward relevant roles so rules are not trivially true
    rules = [[SymbolicRule("".join(rng.choice(list("PNI"), n_c, p=[0.25, 0.25, 0.5])))
              for _ in range(int(rng.integers(1, max_rules + 1)))] for _ in range(n_t)]
    return Rulebook([f"c{i}" for i in range(n_c)], [f"y{t}" for t in range(n_t)], rules)


def random_atom(rng, book=None):
    if book is None:
        return Atom(f"a{int(rng.integers(5))}")
    u = rng.random()
    if u < 0.05:
        return Const(bool(rng.integers(2)))
    if u < 0.12:
        t = int(rng.integers(len(book.tasks)))
        j = int(rng.integers(len(book.rules[t])))
        i = int(rng.integers(book.n_concepts))
        return Atom(f"role({book.tasks[t]},{j},{book.concepts[i]},{'PNI'[int(rng.integers(3))]})")
    if u < 0.55:
        return Atom(str(rng.choice(book.tasks)))
    return Atom(str(rng.choice(book.concepts)))


def random_formula(rng, depth=6, book=None):
    if depth == 0 or rng.random() < 0.25:
        return random_atom(rng, book)
    if rng.random() < 0.2:
        return Not(random_formula(rng, depth - 1, book))
    op = BINARY[int(rng.integers(len(BINARY)))]
    return op(random_formula(rng, depth - 1, book), random_formula(rng, depth - 1, book))


def random_literal(rng, book):
    a = Atom(str(rng.choice(book.concepts)))
    return Not(a) if rng.random() < 0.5 else a


def random_rule_property(rng, book):
    """``task -> clause`` style properties: these are the shape verification
    is used for and are entailed far more often than arbitrary formulas."""
    premise = Atom(str(rng.choice(book.tasks)))
    if rng.random() < 0.3:
        premise = And(premise, random_literal(rng, book))
    clause = random_literal(rng, book)
    for _ in range(int(rng.integers(0, 3))):
        clause = Or(clause, random_literal(rng, book))
    return Implies(premise, Not(clause) if rng.random() < 0.3 else clause)


def random_pair(seed, **kw):
    rng = np.random.default_rng(seed)
    book = random_book(rng, **kw)
    if rng.random() < 0.5:
        return book, random_rule_property(rng, book)
    return book, random_formula(rng, int(rng.integers(1, 7)), book)
