"""Hand the model rules it could not find on its own.

With only three rule slots per task, PAIRSUM's middle tasks (y_3 has four
ground-truth rules) cannot all be learned.  After a first round of training
we add every missing ground-truth rule but one as a manual rule, keep
training, and check that the one we held back is learned by the slot the
manual rules freed up.

    python3 demos/rule_intervention.py [--seed 1]
"""
import argparse
from collections import Counter

from cmr import presets
from cmr import trainkit as tk

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=1)
args = parser.parse_args()

exp = presets.pairsum_rule_intervention(args.seed)
truth = exp.train.ground_truth
held = []


def add_all_but_one(model):
    missing = tk.rule_recovery_score(model.decode(), truth)["missing_rules"]
    print("missing after the first phase:", missing)
    if not missing:
        return []
    counts = Counter(t for t, _ in missing)
    task = max(counts, key=lambda t: (counts[t], -truth.tasks.index(t)))
    held.append(next(m for m in missing if m[0] == task))
    print("withholding", held[0])
    return [m for m in missing if m != held[0]]


model = tk.init_model(exp.model, args.seed)
out = tk.run_rule_intervention(model, exp.train, exp.training, tk.InterventionSchedule(300, 100),
                               after_first=add_all_but_one)

print(out["book_after"].render())

for t, j, roles in out["added"]:
    p = tk.manual_selection_probability(model, exp.train, t, j)
    print(f"manual rule {truth.tasks[t]} {roles}: mean selection probability {p:.4f}")

if held:
    task, roles = held[0]
    found = [r for r in out["book_after"].rules[truth.tasks.index(task)] if r.roles == roles]
    print(f"withheld rule {task} {roles}:", found[0].provenance if found else "not learned")

rep = tk.evaluate(model, exp.test)
print(f"test subset accuracy {rep.task_subset_accuracy:.4f}, missing rules {rep.rule_recovery['missing']}")
