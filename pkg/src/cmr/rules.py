"""Symbolic rules: decoded rulebooks, rule evaluation, the global formula and
rule interventions (manual rules, role pins).

A rule is a conjunction over the concept set, written as one role per concept:
``P`` (concept must be true), ``N`` (concept must be false) or ``I``
(irrelevant).  The role string, e.g. ``"PIN"``, is the canonical wire form.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc

ROLES = "PNI"
P, N, I = 0, 1, 2
PIN_KINDS = ("forbid_P", "forbid_N", "force_I", "force_P", "force_N")
PIN_CONSTANT = -1e9


class RuleFitError(RuntimeError):
    """A manual rule could not be realized as an embedding of the shared decoder."""


@dataclass(frozen=True)
class SymbolicRule:
    roles: str
    provenance: str = "learned"

    def __post_init__(self):
        if any(ch not in ROLES for ch in self.roles):
            raise ValueError(f"invalid role string {self.roles!r}; roles must be drawn from 'PNI'")
        if self.provenance not in ("learned", "manual"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.roles)

    @property
    def codes(self) -> np.ndarray:
        return np.array([ROLES.index(ch) for ch in self.roles], dtype=np.int8)


@dataclass(frozen=True)
class Rulebook:
    concepts: tuple[str, ...]
    tasks: tuple[str, ...]
    rules: tuple[tuple[SymbolicRule, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "rules", tuple(tuple(r) for r in self.rules))
        if len(set(self.concepts)) != len(self.concepts):
            raise ValueError("concept names must be unique")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError("task names must be unique")
        if set(self.concepts) & set(self.tasks):
            raise ValueError("concept and task names must not overlap")
        if len(self.rules) != len(self.tasks):
            raise ValueError(f"{len(self.tasks)} tasks but {len(self.rules)} rule lists")
        for t, rs in zip(self.tasks, self.rules):
            for r in rs:
                if len(r) != len(self.concepts):
                    raise ValueError(f"rule {r.roles!r} of task {t!r} has {len(r)} roles, "
                                     f"expected {len(self.concepts)}")

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def task_index(self, task: str | int) -> int:
        return task if isinstance(task, (int, np.integer)) else self.tasks.index(task)

    def role_strings(self, task: str | int) -> list[str]:
        return [r.roles for r in self.rules[self.task_index(task)]]

    def to_json(self) -> dict:
        return {
            "concepts": list(self.concepts),
            "tasks": [
                {"name": t, "rules": [{"roles": r.roles, "provenance": r.provenance} for r in rs]}
                for t, rs in zip(self.tasks, self.rules)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Rulebook":
        return cls(
            concepts=doc["concepts"],
            tasks=[t["name"] for t in doc["tasks"]],
            rules=[[SymbolicRule(r["roles"], r.get("provenance", "learned")) for r in t["rules"]]
                   for t in doc["tasks"]],
        )

    def save(self, path: str | os.PathLike) -> None:
        write_json_atomic(path, self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Rulebook":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def render(self, style: str = "standard") -> str:
        lines = []
        for t, rs in zip(self.tasks, self.rules):
            for r in rs:
                lines.append(render_rule(r, self.concepts, t, style=style))
        return "\n".join(lines)


RULEBOOK_SCHEMA = {
    "type": "object",
    "required": ["concepts", "tasks"],
    "properties": {
        "concepts": {"type": "array", "items": {"type": "string"}},
        "tasks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "rules"],
                "properties": {
                    "name": {"type": "string"},
                    "rules": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["roles"],
                            "properties": {
                                "roles": {"type": "string", "pattern": "^[PNI]*$"},
                                "provenance": {"enum": ["learned", "manual"]},
                            },
                        },
                    },
                },
            },
        },
    },
}


def write_json_atomic(path, doc) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_rule(rule: SymbolicRule, concepts: Sequence[str], task: str, style: str = "standard") -> str:
    """Human-readable rule.

    ``standard`` lists every relevant literal (``~c`` for negative roles).
    ``compact`` shows positive concepts as-is and irrelevant ones between
    parentheses, omitting negative literals.
    """
    parts = []
    for name, role in zip(concepts, rule.roles):
        if style == "standard":
            if role == "P":
                parts.append(name)
            elif role == "N":
                parts.append(f"~{name}")
        elif style == "compact":
            if role == "P":
                parts.append(name)
            elif role == "I":
                parts.append(f"({name})")
        else:
            raise ValueError(f"unknown style {style!r}")
    body = " & ".join(parts) if parts else "true"
    tag = "  [manual]" if rule.provenance == "manual" else ""
    return f"{task} <- {body}{tag}"


# --------------------------------------------------------------------------
# evaluation

def evaluate(rule: SymbolicRule | str, c: Sequence[int]) -> int:
    roles = rule.roles if isinstance(rule, SymbolicRule) else rule
    if len(roles) != len(c):
        raise ValueError(f"rule has {len(roles)} roles but concept vector has {len(c)} entries")
    for role, ci in zip(roles, c):
        if role == "P" and not ci:
            return 0
        if role == "N" and ci:
            return 0
    return 1


def evaluate_batch(roles: str | np.ndarray, C: np.ndarray) -> np.ndarray:
    """Vectorized :func:`evaluate` over the rows of a 0/1 matrix."""
    codes = np.array([ROLES.index(ch) for ch in roles]) if isinstance(roles, str) else np.asarray(roles)
    C = np.asarray(C).astype(bool)
    if C.shape[-1] != len(codes):
        raise ValueError(f"rule has {len(codes)} roles but concepts have width {C.shape[-1]}")
    bad = ((codes == P) & ~C) | ((codes == N) & C)
    return (~bad.any(axis=-1)).astype(np.int8)


def global_predict(book: Rulebook, selected: Sequence[int], c: Sequence[int]) -> np.ndarray:
    """Task bits under the global formula for a one-hot selection per task."""
    if len(selected) != len(book.tasks):
        raise ValueError(f"need one selected rule per task ({len(book.tasks)}), got {len(selected)}")
    out = np.zeros(len(book.tasks), dtype=np.int8)
    for t, j in enumerate(selected):
        rs = book.rules[t]
        if not 0 <= j < len(rs):
            raise IndexError(f"task {book.tasks[t]!r} has {len(rs)} rules; selected {j}")
        out[t] = evaluate(rs[j], c)
    return out


def universal_book(n_concepts: int, task: str = "y") -> Rulebook:
    """Three rules (all-I, all-P, all-N) that let a selector output any bit."""
    names = [f"c_{i}" for i in range(n_concepts)]
    rules = [SymbolicRule("I" * n_concepts), SymbolicRule("P" * n_concepts),
             SymbolicRule("N" * n_concepts)]
    return Rulebook(names, [task], [rules])


def decode(role_probs: np.ndarray, concepts: Sequence[str], tasks: Sequence[str],
           slots: Sequence[Sequence[int]] | None = None,
           provenance: Sequence[Sequence[str]] | None = None) -> Rulebook:
    """Collapse role distributions ``(tasks, rules, concepts, 3)`` to symbolic rules.

    Ties go to the first role in P, N, I order.  ``slots[t]`` restricts task
    ``t`` to the listed rule slots.
    """
    probs = np.asarray(role_probs)
    codes = probs.argmax(axis=-1)
    n_tasks, n_slots = codes.shape[:2]
    slots = [range(n_slots)] * n_tasks if slots is None else slots
    rules = []
    for t in range(n_tasks):
        rs = []
        for j in slots[t]:
            prov = provenance[t][j] if provenance is not None else "learned"
            rs.append(SymbolicRule("".join(ROLES[k] for k in codes[t, j]), prov))
        rules.append(rs)
    return Rulebook(concepts, tasks, rules)


def add_manual_rule(book: Rulebook, task: str | int, rule: SymbolicRule | str) -> Rulebook:
    roles = rule.roles if isinstance(rule, SymbolicRule) else rule
    t = book.task_index(task)
    new = [list(rs) for rs in book.rules]
    new[t].append(SymbolicRule(roles, "manual"))
    return Rulebook(book.concepts, book.tasks, new)


def one_hot_roles(book: Rulebook) -> np.ndarray:
    """Degenerate role distributions reproducing ``book`` (tasks must share a rule count)."""
    counts = {len(rs) for rs in book.rules}
    if len(counts) != 1:
        raise ValueError("one_hot_roles needs the same number of rules per task")
    out = np.zeros((len(book.tasks), counts.pop(), book.n_concepts, 3))
    for t, rs in enumerate(book.rules):
        for j, r in enumerate(rs):
            out[t, j, np.arange(book.n_concepts), r.codes] = 1.0
    return out


# --------------------------------------------------------------------------
# interventions on a trained model

@dataclass(frozen=True)
class RolePin:
    task: int
    rule: int
    concept: int
    kind: str

    def __post_init__(self):
        if self.kind not in PIN_KINDS:
            raise ValueError(f"unknown pin kind {self.kind!r}; expected one of {PIN_KINDS}")

    @property
    def blocked(self) -> tuple[int, ...]:
        return {
            "forbid_P": (P,), "forbid_N": (N,), "force_I": (P, N),
            "force_P": (N, I), "force_N": (P, I),
        }[self.kind]

    @classmethod
    def force(cls, task: int, rule: int, concept: int, role: str) -> "RolePin":
        return cls(task, rule, concept, f"force_{role}")


def pin_roles(model, pins: Iterable[RolePin]):
    """Mask decoder logits so pinned roles can never be decoded.

    The blocked logits get a large negative constant after the decoder and
    before the softmax, which zeroes both their probability and gradient.
    """
    n_tasks = model.config.n_tasks
    for pin in pins:
        if not (0 <= pin.task < n_tasks and 0 <= pin.rule < model.rule_counts[pin.task]
                and 0 <= pin.concept < model.config.n_concepts):
            raise IndexError(f"pin {pin} out of range")
        row = model.pin_logits[pin.task, model.slot_of(pin.task, pin.rule), pin.concept]
        trial = row.copy()
        trial[list(pin.blocked)] = PIN_CONSTANT
        if np.all(trial <= PIN_CONSTANT):
            raise ValueError(f"pin {pin} would block every role of that concept")
        row[:] = trial
    return model


def fit_rule_embedding(model, roles: str, *, steps: int = 5000, lr: float = 1e-2,
                       seed: int = 0, min_prob: float = 0.9) -> np.ndarray:
    """Find an embedding the frozen decoder maps to ``roles``."""
    target = np.array([ROLES.index(ch) for ch in roles])
    n_c = model.config.n_concepts
    rng = np.random.default_rng(seed)
    e = dc.Tensor(rng.normal(size=(1, model.config.rule_emb_size)), requires_grad=True)
    opt = dc.AdamW({"e": e}, lr=lr)
    onehot = np.zeros((n_c, 3))
    onehot[np.arange(n_c), target] = 1.0
    for step in range(steps + 1):
        logits = model.decode_embeddings(e).reshape((n_c, 3))
        logp = dc.log_softmax(logits, axis=-1)
        if step % 25 == 0 or step == steps:
            probs = np.exp(logp.data)
            if (np.array_equal(probs.argmax(-1), target)
                    and probs[np.arange(n_c), target].min() >= min_prob):
                return e.data[0].copy()
        if step == steps:
            break
        loss = dc.scale(dc.sum_(dc.mul(logp, onehot)), -1.0 / n_c)
        opt.zero_grad()
        dc.backward(loss)
        opt.step()
    decoded = "".join(ROLES[k] for k in np.exp(logp.data).argmax(-1))
    raise RuleFitError(f"could not fit an embedding for rule {roles!r} within {steps} steps "
                       f"(decoded {decoded!r})")


def extend_model(model, task: int | str, rule: SymbolicRule | str, *, steps: int = 5000,
                 lr: float = 1e-2, seed: int = 0, trainable: bool = False) -> int:
    """Add a manual rule to ``task`` as a new selectable rulebook slot.

    The embedding is fitted against the frozen decoder.  Unless ``trainable``,
    the embedding is frozen and every role of the slot is pinned so later
    decoder updates cannot alter the rule.  Returns the rule index of the new
    rule within its task.
    """
    roles = rule.roles if isinstance(rule, SymbolicRule) else rule
    if len(roles) != model.config.n_concepts:
        raise ValueError(f"rule has {len(roles)} roles, model has {model.config.n_concepts} concepts")
    t = model.task_index(task)
    # frozen rules are pinned below, so decoding to the right roles is enough;
    # trainable ones need a margin to survive later updates
    emb = fit_rule_embedding(model, roles, steps=steps, lr=lr, seed=seed,
                             min_prob=0.9 if trainable else 0.0)
    index = model.add_rule_slot(t, emb, provenance="manual", frozen=not trainable)
    if not trainable:
        pin_roles(model, [RolePin.force(t, index, i, ch) for i, ch in enumerate(roles)])
    return index
