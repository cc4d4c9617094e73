"""Synthetic concept/task datasets with known ground-truth rulebooks.

Inputs are noisy indicator vectors standing in for images: every coordinate
of the clean one-hot code gets independent Gaussian noise.

* ``pairsum`` -- two digits in ``[0, D)``; concepts are the two one-hot digit
  codes; task ``y_k`` is true iff the digits sum to ``k``.
* ``paritycolor`` -- one digit plus one of two colors; tasks are even/odd,
  colors are irrelevant.
* ``pairsum_incomplete`` -- ``pairsum`` with some digit concepts removed.
"""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .rules import Rulebook, SymbolicRule, evaluate_batch

KINDS = ("pairsum", "paritycolor", "pairsum_incomplete")
DEFAULT_SIGMA = 0.2


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "pairsum"
    digits: int = 4
    noise_sigma: float = DEFAULT_SIGMA
    n_examples: int = 1000
    seed: int = 0
    dropped_concepts: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.digits < 2:
            raise ValueError("digits must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_examples < 0:
            raise ValueError("n_examples must be >= 0")
        object.__setattr__(self, "dropped_concepts", tuple(int(d) for d in self.dropped_concepts))

    def to_json(self) -> dict:
        d = asdict(self)
        d["dropped_concepts"] = list(self.dropped_concepts)
        return d


class Example(NamedTuple):
    x: np.ndarray
    c_hat: np.ndarray
    y_hat: np.ndarray


@dataclass
class Dataset:
    concept_names: list[str]
    task_names: list[str]
    x: np.ndarray
    c: np.ndarray
    y: np.ndarray
    spec: dict = field(default_factory=dict)
    ground_truth: Rulebook | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(len(self.x), -1)
        self.c = np.asarray(self.c, dtype=np.int8).reshape(len(self.c), -1)
        self.y = np.asarray(self.y, dtype=np.int8).reshape(len(self.y), -1)
        if not len(self.x) == len(self.c) == len(self.y):
            raise DatasetFormatError("x, c and y must have the same number of rows")
        if self.c.shape[1] != len(self.concept_names) or self.y.shape[1] != len(self.task_names):
            raise DatasetFormatError("column counts must match the concept / task names")

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> Example:
        return Example(self.x[i], self.c[i], self.y[i])

    def __iter__(self) -> Iterator[Example]:
        return (self[i] for i in range(len(self)))

    @property
    def n_inputs(self) -> int:
        return self.x.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.concept_names, self.task_names, self.x[index], self.c[index],
                       self.y[index], dict(self.spec), self.ground_truth)

    def metadata(self) -> dict:
        return {
            "concept_names": list(self.concept_names),
            "task_names": list(self.task_names),
            "n_inputs": self.n_inputs,
            "n_examples": len(self),
            "spec": self.spec,
            "ground_truth": self.ground_truth.to_json() if self.ground_truth is not None else None,
        }

    def save(self, path) -> None:
        path = os.fspath(path)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.metadata()) + "\n")
            for xi, ci, yi in zip(self.x, self.c, self.y):
                row = {"x": [float(v) for v in xi], "c": ci.tolist(), "y": yi.tolist()}
                fh.write(json.dumps(row) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(os.fspath(path), encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise DatasetFormatError(f"{path}: empty file")
        try:
            meta = json.loads(lines[0])
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{path}:1: bad metadata: {e}") from None
        n_c, n_t = len(meta["concept_names"]), len(meta["task_names"])
        d = meta.get("n_inputs")
        xs, cs, ys = [], [], []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                x, c, y = row["x"], row["c"], row["y"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DatasetFormatError(f"{path}:{lineno}: malformed row ({e})") from None
            if d is None:
                d = len(x)
            if len(x) != d or len(c) != n_c or len(y) != n_t:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected widths x={d}, c={n_c}, y={n_t}; "
                    f"got {len(x)}, {len(c)}, {len(y)}")
            for name, bits in (("c", c), ("y", y)):
                if any(v not in (0, 1) or isinstance(v, bool) for v in bits):
                    raise DatasetFormatError(f"{path}:{lineno}: field {name!r} must contain only 0/1")
            xs.append(x)
            cs.append(c)
            ys.append(y)
        gt = meta.get("ground_truth")
        return cls(
            meta["concept_names"], meta["task_names"],
            np.asarray(xs, dtype=np.float64).reshape(len(xs), d or 0),
            np.asarray(cs, dtype=np.int8).reshape(len(cs), n_c),
            np.asarray(ys, dtype=np.int8).reshape(len(ys), n_t),
            meta.get("spec", {}),
            Rulebook.from_json(gt) if gt else None,
        )


# --------------------------------------------------------------------------
# generators

def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n), dtype=np.int8)
    out[np.arange(len(idx)), idx] = 1
    return out


def pairsum_truth(digits: int) -> Rulebook:
    D = digits
    concepts = [f"c_0_{i}" for i in range(D)] + [f"c_1_{j}" for j in range(D)]
    tasks = [f"y_{k}" for k in range(2 * D - 1)]
    rules = []
    for k in range(2 * D - 1):
        rs = []
        for i in range(D):
            j = k - i
            if 0 <= j < D:
                roles = ["N"] * (2 * D)
                roles[i] = roles[D + j] = "P"
                rs.append(SymbolicRule("".join(roles)))
        rules.append(rs)
    return Rulebook(concepts, tasks, rules)


def gen_pairsum(spec: GeneratorSpec) -> Dataset:
    D = spec.digits
    rng = np.random.default_rng(spec.seed)
    a = rng.integers(0, D, spec.n_examples)
    b = rng.integers(0, D, spec.n_examples)
    c = np.concatenate([_one_hot(a, D), _one_hot(b, D)], axis=1)
    x = c + spec.noise_sigma * rng.normal(size=c.shape)
    y = _one_hot(a + b, 2 * D - 1)
    truth = pairsum_truth(D)
    return Dataset(list(truth.concepts), list(truth.tasks), x, c, y, spec.to_json(), truth)


def paritycolor_truth(digits: int) -> Rulebook:
    D = digits
    concepts = [f"c_{i}" for i in range(D)] + ["red", "green"]
    tasks = ["y_even", "y_odd"]
    rules = []
    for parity in (0, 1):
        rs = []
        for i in range(D):
            if i % 2 == parity:
                roles = ["N"] * D + ["I", "I"]
                roles[i] = "P"
                rs.append(SymbolicRule("".join(roles)))
        rules.append(rs)
    return Rulebook(concepts, tasks, rules)


def gen_paritycolor(spec: GeneratorSpec) -> Dataset:
    D = spec.digits
    rng = np.random.default_rng(spec.seed)
    digit = rng.integers(0, D, spec.n_examples)
    color = rng.integers(0, 2, spec.n_examples)
    c = np.concatenate([_one_hot(digit, D), _one_hot(color, 2)], axis=1)
    x = c + spec.noise_sigma * rng.normal(size=c.shape)
    y = np.stack([digit % 2 == 0, digit % 2 == 1], axis=1).astype(np.int8)
    truth = paritycolor_truth(D)
    return Dataset(list(truth.concepts), list(truth.tasks), x, c, y, spec.to_json(), truth)


def gen_pairsum_incomplete(spec: GeneratorSpec) -> Dataset:
    full = gen_pairsum(spec)
    D = spec.digits
    dropped = set(spec.dropped_concepts)
    if not dropped <= set(range(D)):
        raise ValueError(f"dropped digits {sorted(dropped)} out of range for D={D}")
    keep = [k for k in range(2 * D) if k % D not in dropped]
    names = [full.concept_names[k] for k in keep]
    return Dataset(names, full.task_names, full.x, full.c[:, keep], full.y, spec.to_json(), None)


GENERATORS = {
    "pairsum": gen_pairsum,
    "paritycolor": gen_paritycolor,
    "pairsum_incomplete": gen_pairsum_incomplete,
}


def generate(spec: GeneratorSpec) -> Dataset:
    return GENERATORS[spec.kind](spec)


def bottleneck_ceiling(data: Dataset) -> float:
    """Best subset accuracy of any function from concepts to tasks on ``data``.

    Every observed concept pattern is mapped to its most frequent task vector.
    """
    table: dict[bytes, Counter] = {}
    for ci, yi in zip(data.c, data.y):
        table.setdefault(ci.tobytes(), Counter())[yi.tobytes()] += 1
    best = sum(cnt.most_common(1)[0][1] for cnt in table.values())
    return best / len(data)


def truth_accuracy(data: Dataset, book: Rulebook | None = None) -> float:
    """Subset accuracy of a rulebook used as 'some rule fires' per task."""
    book = data.ground_truth if book is None else book
    pred = np.stack([
        np.max(np.stack([evaluate_batch(r.roles, data.c) for r in rs]), axis=0) if rs
        else np.zeros(len(data), dtype=np.int8)
        for rs in book.rules
    ], axis=1)
    return float(np.mean(np.all(pred == data.y, axis=1)))
