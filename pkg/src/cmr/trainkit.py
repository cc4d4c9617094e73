"""Training loop, selector re-initialization, checkpoints, metrics and
scripted interventions."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import rules as rl
from .datasets import Dataset
from .model import CMR, Batch, ModelConfig, hard_concepts, save_checkpoint

log = logging.getLogger(__name__)

RESTORE_POLICIES = ("best_val_loss", "best_train_loss", "last")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 512
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 1
    selector_reset_every: int = 40
    teacher_force_concepts: bool = True
    checkpoint_path: str | None = None
    eval_every: int = 1
    restore_policy: str = "best_val_loss"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1 or self.selector_reset_every < 0:
            raise ValueError("epochs/selector_reset_every must be >= 0; batch_size/eval_every >= 1")
        if self.restore_policy not in RESTORE_POLICIES:
            raise ValueError(f"restore_policy must be one of {RESTORE_POLICIES}")
        if self.restore_policy == "best_val_loss" and not 0 < self.val_fraction < 1:
            raise ValueError("best_val_loss needs 0 < val_fraction < 1")


def split_config(doc: dict) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat JSON config into model and training parts."""
    names_m = {f.name for f in fields(ModelConfig)}
    names_t = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - names_m - names_t
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return (ModelConfig(**{k: v for k, v in doc.items() if k in names_m}),
            TrainConfig(**{k: v for k, v in doc.items() if k in names_t}))


class Streams:
    """Independent generators derived from one run seed."""

    def __init__(self, seed: int):
        init, shuffle, reset, split = np.random.SeedSequence(seed).spawn(4)
        self.init = np.random.default_rng(init)
        self.shuffle = np.random.default_rng(shuffle)
        self.reset = np.random.default_rng(reset)
        self.split = np.random.default_rng(split)

    def state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in ("init", "shuffle", "reset", "split")}

    @classmethod
    def restore(cls, seed: int, state: dict | None) -> "Streams":
        streams = cls(seed)
        for k, st in (state or {}).items():
            getattr(streams, k).bit_generator.state = st
        return streams


def init_model(config: ModelConfig, seed: int) -> CMR:
    return CMR(config, Streams(seed).init)


def _batch(data: Dataset, idx=None) -> Batch:
    if idx is None:
        return Batch(data.x, data.c, data.y)
    return Batch(data.x[idx], data.c[idx], data.y[idx])


def dataset_loss(model: CMR, data: Dataset, *, teacher_force: bool = True, chunk: int = 4096) -> float:
    total = 0.0
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        n = len(data.x[sl])
        total += model.objective(_batch(data, sl), teacher_force=teacher_force).item() * n
    return total / max(len(data), 1)


@dataclass
class TrainResult:
    model: CMR
    history: list[dict]
    optimizer: dc.AdamW
    restored_epoch: int | None = None


def holdout(data: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Random ``(train, val)`` split; both keep the original row order."""
    order = rng.permutation(len(data))
    n_val = max(1, int(round(fraction * len(data))))
    return data.subset(np.sort(order[n_val:])), data.subset(np.sort(order[:n_val]))


def train(model: CMR, data: Dataset, config: TrainConfig, *, val: Dataset | None = None,
          optimizer: dc.AdamW | None = None, streams: Streams | None = None,
          epoch_offset: int = 0) -> TrainResult:
    """Minimize the model objective by minibatch AdamW.

    With ``restore_policy='best_val_loss'`` and no ``val`` set, a
    ``val_fraction`` slice of ``data`` is held out.  The model is modified in
    place and also returned.
    """
    streams = Streams(config.seed) if streams is None else streams
    if config.restore_policy == "best_val_loss" and val is None:
        data, val = holdout(data, config.val_fraction, streams.split)
    if optimizer is None:
        optimizer = dc.AdamW(model.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    history: list[dict] = []
    best = (np.inf, None, None)
    step = optimizer.step_count
    n = len(data)
    for epoch in range(epoch_offset, epoch_offset + config.epochs):
        if config.selector_reset_every and epoch > 0 and epoch % config.selector_reset_every == 0:
            model.reset_selector(streams.reset)
            optimizer.reset(model.selector_names)
            log.debug("epoch %d: selector re-initialized", epoch)
        order = streams.shuffle.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = model.objective(_batch(data, idx), teacher_force=config.teacher_force_concepts)
            if not np.isfinite(loss.data):
                raise dc.NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            dc.backward(loss)
            model.mask_gradients()
            optimizer.step()
            step += 1
            running += loss.item() * len(idx)
        done = epoch + 1 - epoch_offset
        if done % config.eval_every == 0 or done == config.epochs:
            rec = {"epoch": epoch + 1, "step": step, "train_loss": running / max(n, 1)}
            if val is not None:
                rec["val_loss"] = dataset_loss(model, val, teacher_force=config.teacher_force_concepts)
            history.append(rec)
            key = {"best_val_loss": "val_loss", "best_train_loss": "train_loss"}.get(config.restore_policy)
            if key is not None and rec[key] < best[0]:
                best = (rec[key], model.state_dict(), epoch + 1)
            if config.checkpoint_path:
                save_checkpoint(config.checkpoint_path, model, optimizer, step=step, seed=config.seed,
                                rng_state=streams.state(),
                                extra={"epoch": epoch + 1, "history": history, "train_config": asdict(config)})
            log.info("epoch %d %s", epoch + 1, {k: round(v, 5) for k, v in rec.items() if k != "epoch"})
    restored = None
    if best[1] is not None:
        restored = best[2]
        fresh = CMR.from_state_dict(best[1])
        for k, p in model.params.items():
            p.data = fresh.params[k].data
    return TrainResult(model, history, optimizer, restored)


# --------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    task_subset_accuracy: float
    task_accuracy: float
    concept_accuracy: list[float]
    mean_concept_accuracy: float
    nll: float
    rule_recovery: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(model: CMR, data: Dataset, *, reference: rl.Rulebook | None = None,
             intervene: bool = False) -> MetricsReport:
    """Score test-time predictions (decoded rules, hard concepts, argmax selection)."""
    y_pred, c_used, _ = model.predict(data.x, c=data.c if intervene else None)
    out = model.forward(data.x)
    c_pred = hard_concepts(out.concept_probs.data)
    per_concept = (c_pred == data.c).mean(axis=0)
    reference = data.ground_truth if reference is None else reference
    return MetricsReport(
        task_subset_accuracy=float(np.mean(np.all(y_pred == data.y, axis=1))),
        task_accuracy=float(np.mean(y_pred == data.y)),
        concept_accuracy=[float(v) for v in per_concept],
        mean_concept_accuracy=float(per_concept.mean()),
        nll=dataset_loss(model, data),
        rule_recovery=rule_recovery_score(model.decode(), reference) if reference is not None else None,
    )


def concept_intervention_eval(model: CMR, data: Dataset) -> dict:
    """Subset accuracy with predicted concepts vs. ground-truth concepts."""
    before, _, _ = model.predict(data.x)
    after, _, _ = model.predict(data.x, c=data.c)
    return {
        "before": float(np.mean(np.all(before == data.y, axis=1))),
        "after": float(np.mean(np.all(after == data.y, axis=1))),
    }


def rule_recovery_score(book: rl.Rulebook, reference: rl.Rulebook) -> dict:
    """Per-task set comparison of role strings (order and duplicates ignored)."""
    if list(book.tasks) != list(reference.tasks):
        raise ValueError("rulebooks describe different tasks")
    matched, missing, spurious = [], [], []
    for t, name in enumerate(book.tasks):
        got = set(book.role_strings(t))
        want = set(reference.role_strings(t))
        matched += [(name, r) for r in sorted(got & want)]
        missing += [(name, r) for r in sorted(want - got)]
        spurious += [(name, r) for r in sorted(got - want)]
    return {
        "matched": len(matched), "missing": len(missing), "spurious": len(spurious),
        "missing_rules": missing, "spurious_rules": spurious,
    }


def selected_rules(model: CMR, data: Dataset) -> list[set[str]]:
    """Role strings of every rule chosen (argmax) on some example, per task."""
    _, _, sel = model.predict(data.x)
    book = model.decode()
    return [{book.rules[t][j].roles for j in np.unique(sel[:, t])} for t in range(len(book.tasks))]


# --------------------------------------------------------------------------
# scripted rule intervention

@dataclass
class InterventionSchedule:
    first_epochs: int
    second_epochs: int
    manual_rules: Sequence[tuple[str, str]] = field(default_factory=list)  # (task name, roles)
    fit_steps: int = 5000
    fit_lr: float = 1e-2
    trainable_manual: bool = False


def run_rule_intervention(model: CMR, data: Dataset, config: TrainConfig,
                          schedule: InterventionSchedule, *, after_first=None) -> dict:
    """Train, add manual rules, keep training.

    ``after_first(model)`` may return extra ``(task, roles)`` pairs chosen by
    inspecting the model after the first phase.
    """
    streams = Streams(config.seed)
    val = None
    if config.restore_policy == "best_val_loss":
        data, val = holdout(data, config.val_fraction, streams.split)
    first_cfg = TrainConfig(**{**asdict(config), "epochs": schedule.first_epochs})
    res1 = train(model, data, first_cfg, val=val, streams=streams)
    book_before = model.decode()
    additions = list(schedule.manual_rules)
    if after_first is not None:
        additions += list(after_first(model))
    added = []
    for k, (task, roles) in enumerate(additions):
        index = rl.extend_model(model, task, roles, steps=schedule.fit_steps, lr=schedule.fit_lr,
                                seed=config.seed + k, trainable=schedule.trainable_manual)
        added.append((model.task_index(task), index, roles))
    optimizer = res1.optimizer
    if added:
        optimizer.reset(["rulebook", "selector.out.W", "selector.out.b"])
    second_cfg = TrainConfig(**{**asdict(config), "epochs": schedule.second_epochs})
    res2 = train(model, data, second_cfg, val=val, optimizer=optimizer, streams=streams,
                 epoch_offset=schedule.first_epochs)
    return {
        "model": model,
        "book_before": book_before,
        "book_after": model.decode(),
        "added": added,
        "history": res1.history + res2.history,
    }


def manual_selection_probability(model: CMR, data: Dataset, task: int, rule: int) -> float | None:
    """Mean p(s=rule|x) over positive examples of ``task`` the rule classifies correctly."""
    roles = model.decode().rules[task][rule].roles
    covered = (data.y[:, task] == 1) & (rl.evaluate_batch(roles, data.c) == 1)
    if not covered.any():
        return None
    probs = model.forward(data.x[covered]).selector_probs[:, task, model.slot_of(task, rule)]
    return float(probs.mean())


def prune_unused(model: CMR, data: Dataset) -> list[tuple[str, str]]:
    """Remove every rule the selector never picks (argmax) on ``data``.

    Predictions on ``data`` are unchanged; the decoded book, and hence what
    verification has to cover, shrinks to the rules actually in use.  Returns
    the removed ``(task, roles)`` pairs.
    """
    _, _, sel = model.predict(data.x)
    book = model.decode()
    removed = []
    for t, name in enumerate(book.tasks):
        used = set(np.unique(sel[:, t]).tolist())
        for j in reversed(range(len(book.rules[t]))):
            if j not in used and model.rule_counts[t] > 1:
                model.deactivate(t, j)
                removed.append((name, book.rules[t][j].roles))
    return removed[::-1]


def write_history(path, history: list[dict]) -> None:
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------
# single-concept optimum probe

OPTIMUM_CASES = {"P": (1, 1), "N": (0, 0), "I": (None, None)}


def regularization_optimum(case: str, *, seed: int = 1, steps: int = 2000, lr: float = 1e-3,
                           n_examples: int = 64) -> np.ndarray:
    """Train one rule over one concept on an always-positive task and return
    its final role distribution ``[P, N, I]``.

    ``case`` fixes the concept: ``"P"`` always 1, ``"N"`` always 0, ``"I"``
    half and half.  The concept encoder is frozen and the task term reads
    ground-truth concepts, so only the rulebook and decoder move.
    """
    if case not in OPTIMUM_CASES:
        raise ValueError(f"case must be one of {sorted(OPTIMUM_CASES)}")
    cfg = ModelConfig(n_inputs=1, n_concepts=1, n_tasks=1, n_rules=1, beta=1.0,
                      encoder_hidden=(4,), selector_hidden=(4,), decoder_hidden=(16,), rule_emb_size=8)
    model = CMR(cfg, seed)
    if case == "I":
        c = (np.arange(n_examples) % 2)[:, None]
    else:
        c = np.full((n_examples, 1), OPTIMUM_CASES[case][0])
    batch = Batch(c.astype(np.float64), c, np.ones((n_examples, 1), dtype=int))
    trainable = {k: p for k, p in model.params.items() if k == "rulebook" or k.startswith("decoder.")}
    opt = dc.AdamW(trainable, lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        dc.backward(model.objective(batch))
        opt.step()
    return model.role_probs().data[0, 0, 0]
