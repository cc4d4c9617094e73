"""When the concepts do not tell the whole story.

Drop the concepts for digits 0 and 1 from PAIRSUM.  Any model that predicts
the tasks from the remaining concepts alone is capped by a lookup-table
ceiling.  The rule selector sees the input itself, so it can still tell a
"0" from a "1" and pick a different rule for each, even though both rules
read the same (all-zero) concepts.

    python3 demos/incomplete_concepts.py [--seed 1]
"""
import argparse

from cmr import datasets as ds
from cmr import presets
from cmr import trainkit as tk

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=1)
args = parser.parse_args()

exp = presets.pairsum_incomplete(args.seed)
print("concepts kept:", exp.train.concept_names)

ceiling = ds.bottleneck_ceiling(exp.test)
print(f"best any function of the concepts can do: {ceiling:.4f}")

model = tk.init_model(exp.model, args.seed)
tk.train(model, exp.train, exp.training)
acc = tk.evaluate(model, exp.test).task_subset_accuracy
print(f"memory reasoner: {acc:.4f} ({100 * (acc - ceiling):+.1f} points)")

# Rules stay readable once slots the selector never uses are dropped.
# Several tasks now rely on a rule like "no kept concept is on" and the
# selector decides when it applies.
removed = tk.prune_unused(model, exp.train)
print(f"{len(removed)} unused slots dropped")
print(model.decode().render())
