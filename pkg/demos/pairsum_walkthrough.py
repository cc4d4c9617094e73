"""Learn the rules of PAIRSUM, read them, verify them, intervene on concepts.

Each example is a noisy encoding of two digits in 0..3; task y_k is true
when the digits add up to k.  The model has to discover that y_k is a
disjunction of "first digit is i and second digit is k-i" rules.

    python3 demos/pairsum_walkthrough.py [--sigma 0.2] [--epochs 300] [--seed 1]

About a minute at the defaults on one core.
"""
import argparse

from cmr import presets
from cmr import trainkit as tk
from cmr import verify as vf

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=1)
parser.add_argument("--sigma", type=float, default=0.2)
parser.add_argument("--epochs", type=int, default=300)
args = parser.parse_args()

exp = presets.pairsum_recovery(args.seed, sigma=args.sigma, epochs=args.epochs)
print(f"{len(exp.train)} training examples, {len(exp.train.concept_names)} concepts, "
      f"{len(exp.train.task_names)} tasks, {exp.model.n_rules} rule slots per task")

# %% Train
model = tk.init_model(exp.model, args.seed)
result = tk.train(model, exp.train, exp.training)
print(f"restored epoch {result.restored_epoch} of {args.epochs}")

# %% The decoded rulebook is the whole task predictor
book = model.decode()
print(book.render())

report = tk.evaluate(model, exp.test)
rec = report.rule_recovery
print(f"\ntest subset accuracy {report.task_subset_accuracy:.4f}")
print(f"ground-truth rules recovered: {rec['matched']}, missing: {rec['missing']}, extra: {rec['spurious']}")

# Extra slots may decode to rules that never fire; these are the ones that do.
used = tk.selected_rules(model, exp.test)
idle = [(t, r) for t, r in rec["spurious_rules"] if r not in used[book.task_index(t)]]
print(f"extra rules never selected on the test set: {len(idle)} of {rec['spurious']}")

# %% Verification: no task ever requires two values of the first digit at once
props = [f"{y} -> !(c_0_{i} & c_0_{j})" for y in book.tasks for i in range(4) for j in range(i + 1, 4)]
failed = [p for p in props if not vf.check_entailment(book, p).entailed]
print(f"\n{len(props) - len(failed)}/{len(props)} one-digit properties entailed by the raw book")

pruned = model.copy()
removed = tk.prune_unused(pruned, exp.train)
clean = pruned.decode()
print(f"after pruning {len(removed)} unused rules: "
      f"{sum(vf.check_entailment(clean, p).entailed for p in props)}/{len(props)} entailed")

# A property that does not hold comes with a counterexample model.
v = vf.check_entailment(clean, "y_3 -> c_0_0")
print("y_3 -> c_0_0:", v.entailed, v.counterexample.to_json(clean) if v.counterexample else "")

# %% Concept interventions: replace predicted concepts with the true ones
ci = tk.concept_intervention_eval(model, exp.test)
print(f"\nsubset accuracy before {ci['before']:.4f}, after concept intervention {ci['after']:.4f}")
