"""Experiment settings used by the acceptance suite and the demos.

Each preset returns the train/test data and the model/training configuration
for one synthetic experiment.  Test sets use ``seed + 100`` so they never
share draws with the training set.
"""
from __future__ import annotations

from dataclasses import dataclass

from .datasets import Dataset, GeneratorSpec, generate
from .model import ModelConfig
from .trainkit import TrainConfig

N_TRAIN, N_TEST = 10_000, 2_000


@dataclass
class Experiment:
    name: str
    train: Dataset
    test: Dataset
    model: ModelConfig
    training: TrainConfig


def _data(kind: str, digits: int, sigma: float, seed: int, **kw) -> tuple[Dataset, Dataset]:
    spec = dict(kind=kind, digits=digits, noise_sigma=sigma, **kw)
    return (generate(GeneratorSpec(n_examples=N_TRAIN, seed=seed, **spec)),
            generate(GeneratorSpec(n_examples=N_TEST, seed=seed + 100, **spec)))


def _model(data: Dataset, n_rules: int, **kw) -> ModelConfig:
    return ModelConfig(n_inputs=data.n_inputs, n_concepts=len(data.concept_names),
                       n_tasks=len(data.task_names), n_rules=n_rules,
                       concept_names=data.concept_names, task_names=data.task_names, **kw)


def _digit_groups(digits: int, n_digits: int) -> list[list[int]]:
    return [list(range(k * digits, (k + 1) * digits)) for k in range(n_digits)]


def pairsum_recovery(seed: int, *, sigma: float = 0.3, digits: int = 4, epochs: int = 300) -> Experiment:
    """Complete concepts, selector reading concept predictions, small β."""
    train, test = _data("pairsum", digits, sigma, seed)
    model = _model(train, 16, beta=0.1, selector_input="concept_probs",
                   concept_groups=_digit_groups(digits, 2))
    return Experiment("pairsum_recovery", train, test, model,
                      TrainConfig(epochs=epochs, seed=seed, eval_every=10, restore_policy="best_val_loss"))


def paritycolor_irrelevance(seed: int, *, sigma: float = 0.2, digits: int = 10, epochs: int = 300
                            ) -> Experiment:
    """Digits one-hot, colors independent sigmoid concepts, six rules per task."""
    train, test = _data("paritycolor", digits, sigma, seed)
    model = _model(train, 6, beta=1.0, concept_groups=[list(range(digits))])
    return Experiment("paritycolor_irrelevance", train, test, model,
                      TrainConfig(epochs=epochs, seed=seed, eval_every=10, restore_policy="best_train_loss"))


def pairsum_incomplete(seed: int, *, sigma: float = 0.2, digits: int = 4, dropped=(0, 1),
                       epochs: int = 300) -> Experiment:
    """Concepts of some digits removed; the selector reads the input embedding."""
    train, test = _data("pairsum_incomplete", digits, sigma, seed, dropped_concepts=tuple(dropped))
    model = _model(train, 16, beta=1.0, selector_input="embedding")
    return Experiment("pairsum_incomplete", train, test, model,
                      TrainConfig(epochs=epochs, seed=seed, eval_every=10, restore_policy="best_val_loss"))


def pairsum_rule_intervention(seed: int, *, n_rules: int = 3, sigma: float = 0.2, digits: int = 4,
                              beta: float = 0.1) -> Experiment:
    """Fewer rule slots than the largest task needs; 300 + 100 epochs around the intervention."""
    train, test = _data("pairsum", digits, sigma, seed)
    model = _model(train, n_rules, beta=beta, selector_input="embedding",
                   concept_groups=_digit_groups(digits, 2))
    return Experiment("pairsum_rule_intervention", train, test, model,
                      TrainConfig(epochs=300, seed=seed, eval_every=10, restore_policy="best_train_loss"))
