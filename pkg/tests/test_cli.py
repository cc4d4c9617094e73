import json
import subprocess
import sys

import jsonschema
import pytest

from cmr import cli
from cmr.model import load_checkpoint, save_checkpoint
from cmr.rules import RULEBOOK_SCHEMA, Rulebook, SymbolicRule

TINY = {"n_rules": 3, "rule_emb_size": 16, "encoder_hidden": [16], "selector_hidden": [16],
        "decoder_hidden": [32], "epochs": 3, "batch_size": 64, "learning_rate": 0.01,
        "restore_policy": "best_train_loss", "seed": 2}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    path = workdir / "d.jsonl"
    assert cli.main(["gen-data", "--kind", "pairsum", "--digits", "3", "--n", "300", "--seed", "1",
                     "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(workdir, dataset):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    path = workdir / "m.json"
    assert cli.main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(path),
                     "--history", str(workdir / "h.jsonl")]) == 0
    return path


def test_gen_data_writes_header_plus_rows_and_is_repeatable(capsys, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        code, out, err = run(capsys, "gen-data", "--kind", "pairsum", "--digits", 4, "--n", 100,
                             "--seed", 3, "--out", p)
        assert code == 0
        assert json.loads(out)["n_examples"] == 100
        assert "config:" in err and '"seed": 3' in err
    assert len(a.read_text().splitlines()) == 101
    assert a.read_bytes() == b.read_bytes()


def test_unknown_kind_is_usage_error(capsys, tmp_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data", "--kind", "mnist", "--seed", "1", "--out", str(tmp_path / "x")])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_rejected(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["verify", "--rules", "a", "--props", "b", "--fast"])
    assert e.value.code == 2


def test_train_prints_config_and_seed(capsys, workdir, dataset, checkpoint):
    doc = json.loads(checkpoint.read_text())
    assert doc["seed"] == 2 and doc["epoch"] == 3
    assert len((workdir / "h.jsonl").read_text().splitlines()) == 3
    cfg = workdir / "cfg2.json"
    cfg.write_text(json.dumps({**TINY, "epochs": 1}))
    code, out, err = run(capsys, "train", "--config", cfg, "--data", dataset, "--out", workdir / "m2.json",
                         "--seed", 7)
    assert code == 0 and '"seed": 7' in err and "seed: 7" in err


def test_train_rejects_bad_config(capsys, workdir, dataset):
    cfg = workdir / "bad.json"
    cfg.write_text(json.dumps({**TINY, "lr": 1}))
    code, _, err = run(capsys, "train", "--config", cfg, "--data", dataset, "--out", workdir / "x.json")
    assert code == 2 and "unknown config keys" in err


def test_eval_reports_metrics(capsys, checkpoint, dataset):
    code, out, _ = run(capsys, "eval", "--ckpt", checkpoint, "--data", dataset)
    rep = json.loads(out)
    assert code == 0
    assert 0 <= rep["task_subset_accuracy"] <= 1
    assert set(rep["concept_intervention"]) == {"before", "after"}


def test_decode_validates_against_schema(capsys, checkpoint, tmp_path):
    code, out, err = run(capsys, "decode", "--ckpt", checkpoint, "--out", tmp_path / "r.json",
                         "--style", "compact")
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, RULEBOOK_SCHEMA)
    assert json.loads((tmp_path / "r.json").read_text()) == doc
    assert "<-" in err


@pytest.fixture
def toy_rules(tmp_path):
    path = tmp_path / "toy.json"
    Rulebook(["c1", "c2"], ["y"], [[SymbolicRule("PN")]]).save(path)
    return path


def test_verify_exit_codes(capsys, toy_rules, tmp_path):
    good, bad, broken = tmp_path / "good.txt", tmp_path / "bad.txt", tmp_path / "broken.txt"
    good.write_text("# toy\ny -> c1\n")
    bad.write_text("y -> c1\ny -> c2\n")
    broken.write_text("y -> qq\n")
    code, out, _ = run(capsys, "verify", "--rules", toy_rules, "--props", good)
    assert code == 0 and json.loads(out)["all_entailed"]
    code, out, _ = run(capsys, "verify", "--rules", toy_rules, "--props", bad)
    rep = json.loads(out)
    assert code == 1
    assert rep["properties"][1]["counterexample"]["concepts"] == {"c1": 1, "c2": 0}
    code, out, _ = run(capsys, "verify", "--rules", toy_rules, "--props", broken)
    assert code == 1 and "'qq'" in json.loads(out)["properties"][0]["error"]
    code, _, _ = run(capsys, "verify", "--rules", tmp_path / "missing.json", "--props", good)
    assert code == 2


def test_verify_cap_is_usage_error(capsys, toy_rules, tmp_path):
    props = tmp_path / "p.txt"
    props.write_text("y\n")
    code, _, err = run(capsys, "verify", "--rules", toy_rules, "--props", props, "--cap", 1)
    assert code == 2 and "cap" in err


def test_malformed_dataset_is_usage_error(capsys, checkpoint, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"concept_names": ["a"], "task_names": ["y"]}\n{"x": [1.0], "c": [2], "y": [1]}\n')
    code, _, err = run(capsys, "eval", "--ckpt", checkpoint, "--data", bad)
    assert code == 2 and ":2:" in err


def test_intervene_adds_rules_and_resumes(capsys, checkpoint, dataset, tmp_path):
    before = checkpoint.read_bytes()
    rules = tmp_path / "add.json"
    rules.write_text(json.dumps([{"task": "y_2", "roles": "NPNNPN"}]))
    pins = tmp_path / "pins.json"
    pins.write_text(json.dumps([{"task": "y_0", "rule": 0, "concept": "c_0_1", "kind": "force_I"}]))
    out_path = tmp_path / "m3.json"
    code, out, err = run(capsys, "intervene", "--ckpt", checkpoint, "--out", out_path, "--data", dataset,
                         "--add-rules", rules, "--pins", pins, "--resume-epochs", 2)
    assert code == 0, err
    doc = json.loads(out)
    book = Rulebook.from_json(doc["rules"])
    idx = doc["added"][0]["rule"]
    assert book.rules[2][idx] == SymbolicRule("NPNNPN", "manual")
    assert book.rules[0][0].roles[1] == "I"
    assert json.loads(out_path.read_text())["epoch"] == 5
    assert checkpoint.read_bytes() == before


def test_intervene_prune(capsys, checkpoint, dataset, tmp_path):
    code, out, _ = run(capsys, "intervene", "--ckpt", checkpoint, "--out", tmp_path / "p.json",
                       "--data", dataset, "--prune-unused")
    doc = json.loads(out)
    assert code == 0
    kept = sum(len(t["rules"]) for t in doc["rules"]["tasks"])
    assert kept + len(doc["pruned"]) == 5 * 3


def test_intervene_needs_an_action(capsys, checkpoint, tmp_path):
    code, _, err = run(capsys, "intervene", "--ckpt", checkpoint, "--out", tmp_path / "x.json")
    assert code == 2 and "nothing to do" in err


def test_numeric_abort_exit_code(capsys, checkpoint, dataset, tmp_path):
    doc = load_checkpoint(checkpoint)
    model = doc["model"]
    model.params["trunk.0.W"].data[:] = float("nan")
    bad = tmp_path / "nan.json"
    save_checkpoint(bad, model, seed=doc["seed"], extra={"train_config": doc["train_config"]})
    code, _, err = run(capsys, "intervene", "--ckpt", bad, "--out", tmp_path / "y.json", "--data", dataset,
                       "--prune-unused")
    assert code == 3 and "numeric abort" in err


def test_oracle_check_within_tolerance(capsys, checkpoint, dataset):
    code, out, _ = run(capsys, "oracle-check", "--ckpt", checkpoint, "--data", dataset, "--n-cases", 100)
    rep = json.loads(out)
    assert code == 0
    assert rep["max_likelihood_deviation"] <= 1e-9
    assert rep["max_gradient_rel_error"] <= 1e-4


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cmr", "gen-data", "--kind", "nope", "--seed", "1",
                           "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == ""
