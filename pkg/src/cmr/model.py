"""Concept-based memory reasoner: concept encoder, rule selector, rulebook
memory, role decoder and the exact (regularized) likelihood.

Shapes used throughout: ``B`` batch, ``C`` concepts, ``T`` tasks, ``R`` rule
slots per task.  Role axes are ordered ``[P, N, I]``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from . import rules as rl
from .rules import PIN_CONSTANT, Rulebook

SELECTOR_INPUTS = ("embedding", "concept_probs")


@dataclass
class ModelConfig:
    n_inputs: int
    n_concepts: int
    n_tasks: int
    n_rules: int
    rule_emb_size: int = 64
    encoder_hidden: tuple[int, ...] = (100, 100)
    selector_hidden: tuple[int, ...] = (100,)
    decoder_hidden: tuple[int, ...] = (100,)
    beta: float = 1.0
    selector_input: str = "embedding"
    positive_weight: float = 1.0
    concept_groups: tuple[tuple[int, ...], ...] = ()
    concept_names: tuple[str, ...] | None = None
    task_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.selector_hidden = tuple(self.selector_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.concept_groups = tuple(tuple(int(i) for i in g) for g in self.concept_groups)
        if self.n_rules < 1:
            raise ValueError("n_rules must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if min((self.n_inputs, self.n_concepts, self.n_tasks, self.rule_emb_size)) < 1:
            raise ValueError("dimensions must be >= 1")
        if not self.encoder_hidden:
            raise ValueError("encoder needs at least one hidden layer")
        for w in self.encoder_hidden + self.selector_hidden + self.decoder_hidden:
            if w < 1:
                raise ValueError("all hidden widths must be >= 1")
        if self.selector_input not in SELECTOR_INPUTS:
            raise ValueError(f"selector_input must be one of {SELECTOR_INPUTS}")
        seen = [i for g in self.concept_groups for i in g]
        if len(seen) != len(set(seen)) or any(not 0 <= i < self.n_concepts for i in seen):
            raise ValueError("concept groups must be disjoint and in range")
        if self.concept_names is None:
            self.concept_names = tuple(f"c_{i}" for i in range(self.n_concepts))
        if self.task_names is None:
            self.task_names = tuple(f"y_{t}" for t in range(self.n_tasks))
        self.concept_names = tuple(self.concept_names)
        self.task_names = tuple(self.task_names)
        if len(self.concept_names) != self.n_concepts or len(self.task_names) != self.n_tasks:
            raise ValueError("name lists must match n_concepts / n_tasks")

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ForwardOut(NamedTuple):
    concept_probs: dc.Tensor     # (B, C)
    selector_log_probs: dc.Tensor  # (B, T, R)
    role_probs: dc.Tensor        # (T, R, C, 3)
    embedding: dc.Tensor         # (B, H)

    @property
    def selector_probs(self) -> np.ndarray:
        return np.exp(self.selector_log_probs.data)


class Batch(NamedTuple):
    x: np.ndarray
    c_hat: np.ndarray
    y_hat: np.ndarray


def _check_bits(name: str, a: np.ndarray) -> None:
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")


# --------------------------------------------------------------------------
# closed-form likelihood pieces (plain numpy, one rule at a time)

def task_likelihood(c: Sequence[int], role_probs: np.ndarray) -> float:
    """p(y=1 | c, s) for one rule with role distributions ``(C, 3)``."""
    c = np.asarray(c)
    rp = np.asarray(role_probs)
    factors = rp[:, 2] + rp[:, 0] * (c == 1) + rp[:, 1] * (c == 0)
    return float(np.prod(factors))


def reg_likelihood(c_hat: Sequence[int], role_probs: np.ndarray) -> float:
    """p_reg(r = c_hat | s): irrelevant roles count half."""
    c = np.asarray(c_hat)
    rp = np.asarray(role_probs)
    factors = 0.5 * rp[:, 2] + rp[:, 0] * (c == 1) + rp[:, 1] * (c == 0)
    return float(np.prod(factors))


def hard_concepts(concept_probs) -> np.ndarray:
    """Threshold at 0.5 (inclusive)."""
    return (np.asarray(concept_probs) >= 0.5).astype(np.int8)


# --------------------------------------------------------------------------
# differentiable likelihood

def _literal_logs(role_probs: dc.Tensor, irrelevant_weight: float) -> tuple[dc.Tensor, dc.Tensor]:
    """log(P + w*I) and log(N + w*I) reshaped to (C, T*R) for a matmul with concepts."""
    T, R, C, _ = role_probs.shape
    p_pos = dc.take(role_probs, 0, axis=3)
    p_neg = dc.take(role_probs, 1, axis=3)
    p_irr = dc.take(role_probs, 2, axis=3)
    if irrelevant_weight != 1.0:
        p_irr = dc.scale(p_irr, irrelevant_weight)
    on = dc.log(dc.add(p_pos, p_irr)).reshape((T * R, C))
    off = dc.log(dc.add(p_neg, p_irr)).reshape((T * R, C))
    return dc.transpose(on), dc.transpose(off)


def _rule_log_probs(c: np.ndarray, role_probs: dc.Tensor, irrelevant_weight: float) -> dc.Tensor:
    T, R = role_probs.shape[:2]
    on, off = _literal_logs(role_probs, irrelevant_weight)
    c = np.asarray(c, dtype=np.float64)
    out = dc.add(dc.matmul(dc.Tensor(c), on), dc.matmul(dc.Tensor(1.0 - c), off))
    return out.reshape((len(c), T, R))


def log_task_likelihood(c: np.ndarray, role_probs: dc.Tensor) -> dc.Tensor:
    """log p(y=1 | c, s) for every example, task and rule slot: (B, T, R)."""
    return _rule_log_probs(c, role_probs, 1.0)


def log_reg_likelihood(c_hat: np.ndarray, role_probs: dc.Tensor) -> dc.Tensor:
    """log p_reg(r = c_hat | s): (B, T, R)."""
    return _rule_log_probs(c_hat, role_probs, 0.5)


def log_likelihood_terms(concept_probs: dc.Tensor, selector_log_probs: dc.Tensor,
                         role_probs: dc.Tensor, c_hat: np.ndarray, y_hat: np.ndarray, *,
                         c_task: np.ndarray | None = None, beta: float = 1.0,
                         regularize: bool = True, positive_weight: float = 1.0,
                         ) -> tuple[dc.Tensor, dc.Tensor]:
    """Per-example concept log-likelihood (B,) and per-task mixture term (B, T).

    The task term is ``log sum_s p(s|x) p(y=y_hat|c,s)^beta p_reg(r=c_hat|s)^y_hat``
    evaluated with logsumexp.  ``c_task`` are the concepts fed to the rules
    (``c_hat`` when teacher forcing).
    """
    c_hat = np.asarray(c_hat, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    c_task = c_hat if c_task is None else np.asarray(c_task, dtype=np.float64)
    B = len(c_hat)
    T, R = role_probs.shape[:2]

    # p(c_i = c_hat_i | x) = (1 - c_hat) + (2 c_hat - 1) p
    match = dc.add(dc.mul(concept_probs, 2.0 * c_hat - 1.0), 1.0 - c_hat)
    concept_ll = dc.sum_(dc.log(match), axis=1)

    lp1 = log_task_likelihood(c_task, role_probs)
    lp0 = dc.log(dc.add(dc.neg(dc.exp(lp1)), 1.0))
    Y = np.broadcast_to(y_hat[:, :, None], (B, T, R))
    log_py = dc.add(dc.mul(lp1, Y), dc.mul(lp0, 1.0 - Y))
    score = dc.add(selector_log_probs, dc.scale(log_py, beta) if beta != 1.0 else log_py)
    if regularize:
        score = dc.add(score, dc.mul(log_reg_likelihood(c_hat, role_probs), Y))
    task_ll = dc.logsumexp(score, axis=-1)
    if positive_weight != 1.0:
        task_ll = dc.mul(task_ll, np.where(y_hat == 1, positive_weight, 1.0))
    return concept_ll, task_ll


# --------------------------------------------------------------------------
# the network

def _mlp_params(rng, prefix: str, widths: Sequence[int], n_out: int | None,
                out_name: str = "out") -> dict[str, dc.Tensor]:
    params = {}
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"{prefix}.{k}.W"] = dc.Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), True)
        params[f"{prefix}.{k}.b"] = dc.Tensor(np.zeros(fan_out), True)
    if n_out is not None:
        fan_in = widths[-1]
        params[f"{prefix}.{out_name}.W"] = dc.Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, n_out)), True)
        params[f"{prefix}.{out_name}.b"] = dc.Tensor(np.zeros(n_out), True)
    return params


class CMR:
    """Parameters plus the bookkeeping needed for rule interventions.

    Besides the learnable tensors in ``params`` the model tracks, per task and
    rule slot, whether the slot is active, its provenance, whether its
    embedding is frozen, and additive pin logits for the role decoder.
    """

    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        T, R = config.n_tasks, config.n_rules
        self.params: dict[str, dc.Tensor] = {}
        self.params.update(_mlp_params(rng, "trunk", (config.n_inputs,) + config.encoder_hidden, None))
        hidden = config.encoder_hidden[-1]
        self.params["concepts.W"] = dc.Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, config.n_concepts)), True)
        self.params["concepts.b"] = dc.Tensor(np.zeros(config.n_concepts), True)
        self.params.update(self._fresh_selector(rng))
        self.params["rulebook"] = dc.Tensor(rng.normal(0.0, 1.0, (T * R, config.rule_emb_size)), True)
        self.params.update(_mlp_params(rng, "decoder", (config.rule_emb_size,) + config.decoder_hidden,
                                       3 * config.n_concepts))
        self.n_slots = R
        self.active = np.ones((T, R), dtype=bool)
        self.provenance = [["learned"] * R for _ in range(T)]
        self.frozen = np.zeros((T, R), dtype=bool)
        self.pin_logits = np.zeros((T, R, config.n_concepts, 3))

    # ---- structure ------------------------------------------------------
    @property
    def selector_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("selector.")]

    @property
    def rule_mask(self) -> np.ndarray:
        return self.active

    @property
    def rule_counts(self) -> list[int]:
        return [int(n) for n in self.active.sum(axis=1)]

    def slots(self, task: int) -> np.ndarray:
        """Slot index of every decoded rule of ``task``, in rule order."""
        return np.flatnonzero(self.active[task])

    def slot_of(self, task: int, rule: int) -> int:
        slots = self.slots(task)
        if not 0 <= rule < len(slots):
            raise IndexError(f"task {task} has {len(slots)} rules; got rule index {rule}")
        return int(slots[rule])

    def deactivate(self, task: int, rule: int) -> None:
        """Remove a rule: its slot can no longer be selected or decoded."""
        if self.rule_counts[task] == 1:
            raise ValueError("cannot remove the last rule of a task")
        slot = self.slot_of(task, rule)
        self.active[task, slot] = False
        self.provenance[task][slot] = ""

    def task_index(self, task: int | str) -> int:
        return task if isinstance(task, (int, np.integer)) else self.config.task_names.index(task)

    def _fresh_selector(self, rng) -> dict[str, dc.Tensor]:
        cfg = self.config
        n_in = cfg.encoder_hidden[-1] if cfg.selector_input == "embedding" else cfg.n_concepts
        n_slots = getattr(self, "n_slots", cfg.n_rules)
        return _mlp_params(rng, "selector", (n_in,) + cfg.selector_hidden, cfg.n_tasks * n_slots)

    def reset_selector(self, rng: np.random.Generator) -> None:
        """Redraw the selector network from the init distribution (in place)."""
        for name, fresh in self._fresh_selector(rng).items():
            self.params[name].data = fresh.data
            self.params[name].grad = None

    def add_rule_slot(self, task: int, embedding: np.ndarray, *, provenance: str = "manual",
                      frozen: bool = True) -> int:
        """Add a rule to ``task`` in a free slot, widening every task by one slot
        if none is free.  The new selector logit starts at zero for every input.
        Returns the rule index of the new rule in the decoded book.
        """
        T, q = self.config.n_tasks, self.config.rule_emb_size
        if self.active[task].all():
            R = self.n_slots
            pad = lambda a, axis: np.concatenate(  # noqa: E731
                [a, np.zeros(a.shape[:axis] + (1,) + a.shape[axis + 1:], a.dtype)], axis=axis)
            book = self.params["rulebook"]
            book.data = pad(book.data.reshape(T, R, q), 1).reshape(T * (R + 1), q)
            W = self.params["selector.out.W"]
            W.data = pad(W.data.reshape(-1, T, R), 2).reshape(-1, T * (R + 1))
            b = self.params["selector.out.b"]
            b.data = pad(b.data.reshape(T, R), 1).reshape(T * (R + 1))
            self.frozen = pad(self.frozen, 1)
            self.active = pad(self.active, 1)
            self.pin_logits = pad(self.pin_logits, 1)
            for prov in self.provenance:
                prov.append("")
            self.n_slots = R + 1
        R = self.n_slots
        slot = int(np.flatnonzero(~self.active[task])[0])
        self.params["rulebook"].data.reshape(T, R, q)[task, slot] = embedding
        self.params["selector.out.W"].data.reshape(-1, T, R)[:, task, slot] = 0.0
        self.params["selector.out.b"].data.reshape(T, R)[task, slot] = 0.0
        self.pin_logits[task, slot] = 0.0
        self.frozen[task, slot] = frozen
        self.provenance[task][slot] = provenance
        self.active[task, slot] = True
        return int(np.searchsorted(self.slots(task), slot))

    def mask_gradients(self) -> None:
        """Zero the rulebook gradient rows of frozen slots."""
        g = self.params["rulebook"].grad
        if g is not None and self.frozen.any():
            g.reshape(self.frozen.shape + (-1,))[self.frozen] = 0.0

    # ---- forward --------------------------------------------------------
    def _checked(self, t: dc.Tensor, layer: str) -> dc.Tensor:
        if not np.all(np.isfinite(t.data)):
            raise dc.NumericError(f"non-finite activation in layer {layer!r}")
        return t

    def _mlp(self, h: dc.Tensor, prefix: str, n_hidden: int, has_out: bool) -> dc.Tensor:
        p = self.params
        for k in range(n_hidden):
            h = dc.relu(dc.add(dc.matmul(h, p[f"{prefix}.{k}.W"]), p[f"{prefix}.{k}.b"]))
            self._checked(h, f"{prefix}.{k}")
        if has_out:
            h = dc.add(dc.matmul(h, p[f"{prefix}.out.W"]), p[f"{prefix}.out.b"])
            self._checked(h, f"{prefix}.out")
        return h

    def _concept_activation(self, z: dc.Tensor) -> dc.Tensor:
        groups = self.config.concept_groups
        if not groups:
            return dc.sigmoid(z)
        grouped = [i for g in groups for i in g]
        rest = [i for i in range(self.config.n_concepts) if i not in set(grouped)]
        parts = [dc.softmax(dc.take(z, list(g), axis=1), axis=1) for g in groups]
        if rest:
            parts.append(dc.sigmoid(dc.take(z, rest, axis=1)))
        order = np.argsort(grouped + rest)
        return dc.take(dc.concat(parts, axis=1), order, axis=1)

    def decode_embeddings(self, emb: dc.Tensor) -> dc.Tensor:
        """Role logits (n, 3C) for rule embeddings (n, q), without pins."""
        return self._mlp(emb, "decoder", len(self.config.decoder_hidden), True)

    def role_probs(self) -> dc.Tensor:
        T, R, C = self.config.n_tasks, self.n_slots, self.config.n_concepts
        logits = self.decode_embeddings(self.params["rulebook"]).reshape((T, R, C, 3))
        if self.pin_logits.any():
            logits = dc.add(logits, self.pin_logits)
        return dc.softmax(logits, axis=-1)

    def forward(self, x, concepts: np.ndarray | None = None) -> ForwardOut:
        """``concepts`` replaces the predicted concept probabilities wherever
        they are consumed downstream (the selector, when it reads concepts);
        ``concept_probs`` in the output are always the encoder's own."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.n_inputs:
            raise dc.ShapeError(f"forward: expected input of width {cfg.n_inputs}, got shape {x.shape}")
        emb = self._mlp(dc.Tensor(x), "trunk", len(cfg.encoder_hidden), False)
        z = self._checked(dc.add(dc.matmul(emb, self.params["concepts.W"]), self.params["concepts.b"]),
                          "concepts")
        concept_probs = self._concept_activation(z)
        if cfg.selector_input == "embedding":
            sel_in = emb
        elif concepts is not None:
            sel_in = dc.Tensor(np.asarray(concepts, dtype=np.float64).reshape(len(x), cfg.n_concepts))
        else:
            sel_in = concept_probs
        logits = self._mlp(sel_in, "selector", len(cfg.selector_hidden), True)
        logits = logits.reshape((len(x), cfg.n_tasks, self.n_slots))
        if not self.rule_mask.all():
            logits = dc.add(logits, np.where(self.rule_mask, 0.0, PIN_CONSTANT))
        return ForwardOut(concept_probs, dc.log_softmax(logits, axis=-1), self.role_probs(), emb)

    # ---- objective ------------------------------------------------------
    def objective(self, batch: Batch, *, teacher_force: bool = True, out: ForwardOut | None = None
                  ) -> dc.Tensor:
        """Mean negative regularized log-likelihood of the batch."""
        cfg = self.config
        c_hat = np.asarray(batch.c_hat)
        y_hat = np.asarray(batch.y_hat)
        if c_hat.shape[1] != cfg.n_concepts or y_hat.shape[1] != cfg.n_tasks:
            raise dc.ShapeError(f"objective: batch concepts {c_hat.shape} / tasks {y_hat.shape} "
                                f"do not match the model")
        out = self.forward(batch.x) if out is None else out
        c_task = c_hat if teacher_force else hard_concepts(out.concept_probs.data)
        concept_ll, task_ll = log_likelihood_terms(
            out.concept_probs, out.selector_log_probs, out.role_probs, c_hat, y_hat,
            c_task=c_task, beta=cfg.beta, positive_weight=cfg.positive_weight)
        total = dc.add(concept_ll, dc.sum_(task_ll, axis=1))
        return dc.scale(dc.sum_(total), -1.0 / len(c_hat))

    def concept_bce(self, batch: Batch) -> float:
        """Summed concept log-likelihood, averaged over the batch."""
        out = self.forward(batch.x)
        c_hat = np.asarray(batch.c_hat, dtype=np.float64)
        match = dc.add(dc.mul(out.concept_probs, 2.0 * c_hat - 1.0), 1.0 - c_hat)
        return float(dc.log(match).data.sum(axis=1).mean())

    # ---- symbolic view --------------------------------------------------
    def decode(self) -> Rulebook:
        return rl.decode(self.role_probs().data, self.config.concept_names, self.config.task_names,
                         slots=[self.slots(t) for t in range(self.config.n_tasks)],
                         provenance=self.provenance)

    def predict(self, x, c: np.ndarray | None = None, book: Rulebook | None = None
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Test-time prediction: hard concepts, argmax selection, symbolic evaluation.

        Returns ``(y, c_used, selected)`` where ``selected`` holds decoded rule
        indices.  Passing ``c`` overrides the predicted concepts (a concept
        intervention); a selector that reads concepts then sees ``c`` as well.
        """
        out = self.forward(x, concepts=c)
        c_used = hard_concepts(out.concept_probs.data) if c is None else np.asarray(c, dtype=np.int8)
        slot_sel = out.selector_log_probs.data.argmax(axis=-1)
        book = self.decode() if book is None else book
        n = len(c_used)
        y = np.zeros((n, self.config.n_tasks), dtype=np.int8)
        selected = np.zeros_like(slot_sel)
        for t, rs in enumerate(book.rules):
            slots = self.slots(t)
            rule_of_slot = np.full(self.n_slots, -1)
            rule_of_slot[slots] = np.arange(len(slots))
            selected[:, t] = rule_of_slot[slot_sel[:, t]]
            truth = np.stack([rl.evaluate_batch(r.roles, c_used) for r in rs], axis=1)
            y[:, t] = truth[np.arange(n), selected[:, t]]
        return y, c_used, selected

    # ---- persistence ----------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "config": self.config.to_json(),
            "params": {k: dc._pack(p.data) for k, p in self.params.items()},
            "n_slots": self.n_slots,
            "active": self.active.astype(int).tolist(),
            "provenance": [list(p) for p in self.provenance],
            "frozen": self.frozen.astype(int).tolist(),
            "pin_logits": dc._pack(self.pin_logits),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "CMR":
        model = cls.__new__(cls)
        model.config = ModelConfig.from_json(state["config"])
        model.params = {k: dc.Tensor(dc._unpack(v), True) for k, v in state["params"].items()}
        model.n_slots = int(state["n_slots"])
        model.active = np.asarray(state["active"], dtype=bool).reshape(model.config.n_tasks, model.n_slots)
        model.provenance = [list(p) for p in state["provenance"]]
        model.frozen = np.asarray(state["frozen"], dtype=bool).reshape(model.config.n_tasks, model.n_slots)
        model.pin_logits = dc._unpack(state["pin_logits"])
        return model

    def copy(self) -> "CMR":
        return CMR.from_state_dict(self.state_dict())


def save_checkpoint(path, model: CMR, optimizer: dc.AdamW | None = None, *, step: int = 0,
                    seed: int | None = None, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "format": "cmr-checkpoint/1",
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "seed": seed,
        "rng_state": rng_state,
    }
    if extra:
        doc.update(extra)
    rl.write_json_atomic(path, doc)


def load_checkpoint(path) -> dict:
    """Read a checkpoint; the returned dict carries a rebuilt ``CMR`` under ``model``."""
    with open(os.fspath(path), encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "cmr-checkpoint/1":
        raise ValueError(f"{path}: not a CMR checkpoint")
    doc["model"] = CMR.from_state_dict(doc["model"])
    return doc
