"""Command-line interface.

stdout carries JSON only; the resolved configuration, seed and logs go to
stderr.  Exit codes: 0 success, 1 verification (or oracle) failure, 2 usage
or input error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

import numpy as np

from . import datasets as ds
from . import diffcore as dc
from . import oracles
from . import rules as rl
from . import trainkit as tk
from . import verify as vf
from .model import CMR, Batch, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cmr")


class UsageError(Exception):
    pass


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _note(label: str, doc) -> None:
    print(f"{label}: {json.dumps(doc, sort_keys=True)}", file=sys.stderr)


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read {path}: {e}") from None


def _load_data(path: str) -> ds.Dataset:
    try:
        return ds.Dataset.load(path)
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e}") from None


def _load_ckpt(path: str) -> dict:
    try:
        return load_checkpoint(path)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    spec = ds.GeneratorSpec(kind=args.kind, digits=args.digits, noise_sigma=args.sigma,
                            n_examples=args.n, seed=args.seed,
                            dropped_concepts=tuple(args.drop) if args.drop else (0, 1))
    _note("config", spec.to_json())
    data = ds.generate(spec)
    data.save(args.out)
    _emit({"out": args.out, "n_examples": len(data), "concepts": data.concept_names,
           "tasks": data.task_names})
    return EXIT_OK


def _model_config_for(doc: dict, data: ds.Dataset) -> dict:
    doc = dict(doc)
    doc.setdefault("n_inputs", data.n_inputs)
    doc.setdefault("n_concepts", len(data.concept_names))
    doc.setdefault("n_tasks", len(data.task_names))
    doc.setdefault("concept_names", list(data.concept_names))
    doc.setdefault("task_names", list(data.task_names))
    return doc


def cmd_train(args) -> int:
    data = _load_data(args.data)
    doc = _model_config_for(_read_json(args.config), data)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        mcfg, tcfg = tk.split_config(doc)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from None
    if (mcfg.n_inputs, mcfg.n_concepts, mcfg.n_tasks) != (data.n_inputs, len(data.concept_names),
                                                          len(data.task_names)):
        raise UsageError("config dimensions do not match the dataset")
    _note("config", {**mcfg.to_json(), **asdict(tcfg)})
    _note("seed", tcfg.seed)
    streams = tk.Streams(tcfg.seed)
    model = CMR(mcfg, streams.init)
    res = tk.train(model, data, tcfg, streams=streams)
    save_checkpoint(args.out, model, res.optimizer, step=res.optimizer.step_count, seed=tcfg.seed,
                    rng_state=streams.state(),
                    extra={"epoch": tcfg.epochs, "history": res.history, "train_config": asdict(tcfg),
                           "restored_epoch": res.restored_epoch})
    if args.history:
        tk.write_history(args.history, res.history)
    _emit({"checkpoint": args.out, "restored_epoch": res.restored_epoch,
           "last": res.history[-1] if res.history else None})
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load_ckpt(args.ckpt)
    model, data = ck["model"], _load_data(args.data)
    _note("seed", ck.get("seed"))
    report = tk.evaluate(model, data).to_json()
    report["concept_intervention"] = tk.concept_intervention_eval(model, data)
    _emit(report)
    return EXIT_OK


def cmd_decode(args) -> int:
    ck = _load_ckpt(args.ckpt)
    book = ck["model"].decode()
    _note("seed", ck.get("seed"))
    print(book.render(args.style), file=sys.stderr)
    if args.out:
        book.save(args.out)
    _emit(book.to_json())
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        book = rl.Rulebook.from_json(_read_json(args.rules))
        with open(args.props, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise UsageError(f"bad input: {e}") from None
    _note("config", {"rules": args.rules, "props": args.props, "cap": args.cap})
    try:
        report = vf.check_properties(book, text, cap=args.cap)
    except vf.CapExceeded as e:
        raise UsageError(str(e)) from None
    _emit(report)
    return EXIT_OK if report["all_entailed"] else EXIT_FAIL


def _parse_pins(doc, model) -> list[rl.RolePin]:
    names_t, names_c = model.config.task_names, model.config.concept_names
    pins = []
    for p in doc:
        try:
            t = names_t.index(p["task"]) if isinstance(p["task"], str) else int(p["task"])
            c = names_c.index(p["concept"]) if isinstance(p["concept"], str) else int(p["concept"])
            pins.append(rl.RolePin(t, int(p["rule"]), c, p["kind"]))
        except (KeyError, ValueError, TypeError) as e:
            raise UsageError(f"bad pin {p!r}: {e}") from None
    return pins


def cmd_intervene(args) -> int:
    if not (args.add_rules or args.pins or args.prune_unused):
        raise UsageError("nothing to do: give --add-rules, --pins and/or --prune-unused")
    ck = _load_ckpt(args.ckpt)
    model = ck["model"]
    tcfg = tk.TrainConfig(**ck.get("train_config", {}))
    seed = tcfg.seed if ck.get("seed") is None else ck["seed"]
    _note("config", {**asdict(tcfg), "resume_epochs": args.resume_epochs})
    _note("seed", seed)
    optimizer = dc.AdamW(model.params, lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
    if ck.get("optimizer"):
        optimizer.load_state_dict(ck["optimizer"])
    data = _load_data(args.data) if args.data else None
    changes: dict = {"added": [], "pins": 0, "pruned": []}
    if args.prune_unused:
        if data is None:
            raise UsageError("--prune-unused needs --data")
        changes["pruned"] = [list(r) for r in tk.prune_unused(model, data)]
    if args.add_rules:
        doc = _read_json(args.add_rules)
        for k, item in enumerate(doc):
            try:
                index = rl.extend_model(model, item["task"], item["roles"], steps=args.fit_steps,
                                        seed=seed + k, trainable=bool(item.get("trainable", False)))
            except (KeyError, ValueError) as e:
                raise UsageError(f"bad rule {item!r}: {e}") from None
            except rl.RuleFitError as e:
                print(f"error: {e}", file=sys.stderr)
                return EXIT_NUMERIC
            changes["added"].append({"task": item["task"], "rule": index, "roles": item["roles"]})
        optimizer.reset(["rulebook", "selector.out.W", "selector.out.b"])
    if args.pins:
        pins = _parse_pins(_read_json(args.pins), model)
        try:
            rl.pin_roles(model, pins)
        except (IndexError, ValueError) as e:
            raise UsageError(str(e)) from None
        changes["pins"] = len(pins)
    history = list(ck.get("history", []))
    epoch = int(ck.get("epoch", 0))
    if args.resume_epochs:
        if data is None:
            raise UsageError("--resume-epochs needs --data")
        streams = tk.Streams.restore(seed, ck.get("rng_state"))
        cfg = tk.TrainConfig(**{**asdict(tcfg), "epochs": args.resume_epochs, "checkpoint_path": None})
        val = None
        if cfg.restore_policy == "best_val_loss":
            # the split stream's first draw is the partition the original run used
            data, val = tk.holdout(data, cfg.val_fraction, tk.Streams(seed).split)
        res = tk.train(model, data, cfg, val=val, optimizer=optimizer, streams=streams, epoch_offset=epoch)
        history += res.history
        epoch += args.resume_epochs
        rng_state = streams.state()
    else:
        rng_state = ck.get("rng_state")
    save_checkpoint(args.out, model, optimizer, step=optimizer.step_count, seed=seed, rng_state=rng_state,
                    extra={"epoch": epoch, "history": history, "train_config": asdict(tcfg)})
    _emit({"checkpoint": args.out, **changes, "rules": model.decode().to_json()})
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    ck = _load_ckpt(args.ckpt)
    model, data = ck["model"], _load_data(args.data)
    _note("config", {"n_cases": args.n_cases, "seed": args.seed})
    rng = np.random.default_rng(args.seed)
    idx = rng.choice(len(data), size=min(args.n_cases, len(data)), replace=False)
    out = model.forward(data.x[idx])
    cp, sp, rp = out.concept_probs.data, out.selector_probs, out.role_probs.data
    like_dev = 0.0
    for k, i in enumerate(idx):
        t = int(rng.integers(model.config.n_tasks))
        c, y = data.c[i], int(data.y[i, t])
        factored = oracles.factored_joint(cp[k], sp[k, t], rp[t], c, y)
        brute = oracles.brute_joint(cp[k], sp[k, t], rp[t], c, y)
        like_dev = max(like_dev, abs(factored - brute))
    small = idx[: min(8, len(idx))]
    batch = Batch(data.x[small], data.c[small], data.y[small])
    obj_dev = abs(model.objective(batch).item() - oracles.brute_objective(model, batch))
    grad_err = oracles.gradient_check(model, batch, n_coords=args.n_cases, rng=rng)
    ok = like_dev <= 1e-9 and obj_dev <= 1e-9 and grad_err <= 1e-4
    _emit({"max_likelihood_deviation": like_dev, "objective_deviation": obj_dev,
           "max_gradient_rel_error": grad_err, "within_tolerance": ok})
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmr", description="Concept-based memory reasoner")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset (JSONL)")
    g.add_argument("--kind", required=True, choices=ds.KINDS)
    g.add_argument("--digits", type=int, default=4)
    g.add_argument("--sigma", type=float, default=ds.DEFAULT_SIGMA)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--drop", type=int, nargs="*", help="digits whose concepts are removed (incomplete kind)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a flat JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="write per-eval metrics as JSONL")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics report for a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="decode the rulebook of a checkpoint")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--out")
    d.add_argument("--style", choices=("standard", "compact"), default="standard")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("verify", help="check properties against a decoded rulebook")
    v.add_argument("--rules", required=True)
    v.add_argument("--props", required=True)
    v.add_argument("--cap", type=int, default=vf.DEFAULT_CAP)
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("intervene", help="add rules, pin roles or prune unused rules, then resume")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--data")
    i.add_argument("--add-rules", help='JSON list of {"task", "roles"[, "trainable"]}')
    i.add_argument("--pins", help='JSON list of {"task", "rule", "concept", "kind"}')
    i.add_argument("--prune-unused", action="store_true",
                   help="remove rules never selected on --data")
    i.add_argument("--resume-epochs", type=int, default=0)
    i.add_argument("--fit-steps", type=int, default=5000)
    i.set_defaults(func=cmd_intervene)

    o = sub.add_parser("oracle-check", help="compare likelihood and gradients with brute-force oracles")
    o.add_argument("--ckpt", required=True)
    o.add_argument("--data", required=True)
    o.add_argument("--n-cases", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ds.DatasetFormatError, vf.ParseError, vf.ResolveError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except dc.NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
