import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmr import diffcore as dc
from cmr import oracles
from cmr import rules as rl
from cmr.model import (CMR, Batch, ModelConfig, hard_concepts, load_checkpoint, reg_likelihood,
                       save_checkpoint, task_likelihood)
from cmr.trainkit import regularization_optimum


def small_config(**kw):
    base = dict(n_inputs=5, n_concepts=4, n_tasks=2, n_rules=3, rule_emb_size=6,
                encoder_hidden=(7, 6), selector_hidden=(5,), decoder_hidden=(8,))
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, cfg, n=6):
    return Batch(rng.normal(size=(n, cfg.n_inputs)),
                 rng.integers(0, 2, (n, cfg.n_concepts)),
                 rng.integers(0, 2, (n, cfg.n_tasks)))


# ---- config ---------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(n_rules=0), dict(beta=-0.1), dict(encoder_hidden=(4, 0)),
                                 dict(selector_input="x"), dict(concept_groups=((0, 1), (1, 2))),
                                 dict(concept_groups=((3, 4),))])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        small_config(**bad)


def test_config_json_roundtrip():
    cfg = small_config(concept_groups=((0, 1),), beta=0.25)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


# ---- closed-form pieces ---------------------------------------------------

def test_task_likelihood_examples():
    one_hot = np.eye(3)[[0, 1]]                            # c0 P, c1 N
    assert task_likelihood([1, 0], one_hot) == 1.0
    assert task_likelihood([1, 1], one_hot) == 0.0
    assert task_likelihood([0, 1], np.full((2, 3), 1 / 3)) == pytest.approx(4 / 9)


def test_reg_likelihood_matches_extended_precision(frozen):
    case = frozen["reg_likelihood_case"]
    assert reg_likelihood(case["c_hat"], np.array(case["role_probs"])) == pytest.approx(case["value"], rel=1e-14)


def test_hard_concepts_threshold_is_inclusive():
    np.testing.assert_array_equal(hard_concepts([0.5, 0.4999, 0.9, 0.0]), [1, 0, 1, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_task_likelihood_complementarity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    rp = oracles.random_simplex(rng, (n, 3))
    c = rng.integers(0, 2, n)
    p1 = task_likelihood(c, rp)
    assert 0.0 <= p1 <= 1.0
    assert abs(p1 + (1.0 - p1) - 1.0) <= 1e-12
    assert p1 == pytest.approx(oracles.brute_task_likelihood(c, rp), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_collapse_consistency(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    roles = "".join(rng.choice(list("PNI"), n))
    rp = np.eye(3)[["PNI".index(r) for r in roles]]
    for bits in range(2 ** n):
        c = [(bits >> (n - 1 - i)) & 1 for i in range(n)]
        assert task_likelihood(c, rp) == rl.evaluate(roles, c)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_reg_likelihood_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    rp = oracles.random_simplex(rng, (n, 3))
    c = rng.integers(0, 2, n)
    assert reg_likelihood(c, rp) == pytest.approx(oracles.brute_reg_likelihood(c, rp), abs=1e-12)


def test_factored_joint_matches_brute_force():
    assert oracles.likelihood_deviation(np.random.default_rng(0), 200) <= 1e-9


# ---- forward --------------------------------------------------------------

def test_forward_matches_straight_line_reference(frozen):
    g = frozen["forward_golden"]
    model = CMR(ModelConfig.from_json(g["config"]), g["seed"])
    checksum = sum(np.abs(p.data).sum() for p in model.params.values())
    assert checksum == pytest.approx(g["param_checksum"], rel=1e-14)
    out = model.forward(np.array(g["x"]))
    np.testing.assert_allclose(out.concept_probs.data, g["concept_probs"], rtol=0, atol=1e-13)
    np.testing.assert_allclose(out.selector_probs, g["selector_probs"], rtol=0, atol=1e-13)
    np.testing.assert_allclose(out.role_probs.data, g["role_probs"], rtol=0, atol=1e-13)
    loss = model.objective(Batch(np.array(g["x"]), np.array(g["c_hat"]), np.array(g["y_hat"])))
    assert loss.item() == pytest.approx(g["loss"], abs=1e-12)


def test_forward_shapes_and_simplices():
    cfg = small_config(concept_groups=((0, 1, 2),))
    model = CMR(cfg, 3)
    out = model.forward(np.random.default_rng(0).normal(size=(9, 5)))
    assert out.concept_probs.shape == (9, 4)
    assert out.selector_log_probs.shape == (9, 2, 3)
    assert out.role_probs.shape == (2, 3, 4, 3)
    np.testing.assert_allclose(out.selector_probs.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.role_probs.data.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.concept_probs.data[:, :3].sum(-1), 1.0, atol=1e-12)
    assert np.all((out.concept_probs.data >= 0) & (out.concept_probs.data <= 1))


def test_forward_rejects_wrong_width():
    with pytest.raises(dc.ShapeError, match="width 5"):
        CMR(small_config(), 0).forward(np.zeros((2, 4)))


def test_role_probs_do_not_depend_on_input():
    model = CMR(small_config(), 1)
    rng = np.random.default_rng(2)
    a = model.forward(rng.normal(size=(3, 5))).role_probs.data
    b = model.forward(rng.normal(size=(7, 5)) * 100).role_probs.data
    assert a.tobytes() == b.tobytes()


def test_concept_selector_input_reads_substituted_concepts():
    model = CMR(small_config(selector_input="concept_probs"), 4)
    x = np.random.default_rng(0).normal(size=(2, 5))
    c = np.array([[1, 0, 0, 1], [0, 1, 1, 0]])
    own = model.forward(x).selector_probs
    swapped = model.forward(x, concepts=c)
    assert not np.allclose(own, swapped.selector_probs)
    np.testing.assert_array_equal(swapped.concept_probs.data, model.forward(x).concept_probs.data)


def test_determinism_bitwise():
    runs = []
    for _ in range(2):
        model = CMR(small_config(), 11)
        batch = random_batch(np.random.default_rng(12), model.config)
        loss = model.objective(batch)
        dc.backward(loss)
        runs.append((loss.data.tobytes(), [p.grad.tobytes() for p in model.params.values()]))
    assert runs[0] == runs[1]


def test_non_finite_input_is_reported_by_layer():
    model = CMR(small_config(), 0)
    with pytest.raises(dc.NumericError, match="trunk"):
        model.forward(np.full((1, 5), np.nan))


# ---- objective ------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(), dict(beta=0.1), dict(beta=0.0), dict(positive_weight=3.0),
                                dict(selector_input="concept_probs", concept_groups=((0, 1),))])
@pytest.mark.parametrize("teacher_force", [True, False])
def test_objective_matches_brute_force(kw, teacher_force):
    model = CMR(small_config(**kw), 5)
    batch = random_batch(np.random.default_rng(6), model.config)
    got = model.objective(batch, teacher_force=teacher_force).item()
    assert got == pytest.approx(oracles.brute_objective(model, batch, teacher_force=teacher_force), abs=1e-9)


@pytest.mark.parametrize("kw", [dict(), dict(beta=0.1, concept_groups=((0, 1, 2),)),
                                dict(selector_input="concept_probs")])
def test_objective_gradient_matches_finite_differences(kw):
    rng = np.random.default_rng(8)
    model = CMR(small_config(**kw), 9)
    batch = random_batch(rng, model.config)
    assert oracles.gradient_check(model, batch, n_coords=50, rng=rng) <= 1e-4


def test_concept_bce_examples():
    model = CMR(small_config(n_concepts=3), 0)
    batch = random_batch(np.random.default_rng(1), model.config, n=4)
    cp = model.forward(batch.x).concept_probs.data
    direct = np.mean(np.sum(np.where(batch.c_hat == 1, np.log(cp), np.log(1 - cp)), axis=1))
    assert model.concept_bce(batch) == pytest.approx(direct, abs=1e-12)
    model.params["concepts.W"].data[:] = 0.0
    model.params["concepts.b"].data[:] = 0.0
    assert model.concept_bce(batch) == pytest.approx(-3 * np.log(2), abs=1e-12)


def test_objective_shape_mismatch():
    model = CMR(small_config(), 0)
    with pytest.raises(dc.ShapeError, match="objective"):
        model.objective(Batch(np.zeros((2, 5)), np.zeros((2, 3), int), np.zeros((2, 2), int)))


# ---- regularization optima -----------------------------------------------

@pytest.mark.parametrize("case", ["P", "N", "I"])
def test_regularization_optimum(case):
    probs = regularization_optimum(case, seed=1, steps=2000)
    assert probs["PNI".index(case)] >= 0.99


# ---- rule slots, decoding, persistence ------------------------------------

def test_decode_follows_argmax_roles():
    model = CMR(small_config(), 2)
    book = model.decode()
    codes = model.role_probs().data.argmax(-1)
    for t in range(2):
        assert book.role_strings(t) == ["".join("PNI"[k] for k in row) for row in codes[t]]


def test_deactivated_slot_is_never_selected():
    model = CMR(small_config(), 3)
    model.deactivate(0, 1)
    assert model.rule_counts == [2, 3]
    x = np.random.default_rng(0).normal(size=(50, 5))
    assert np.all(model.forward(x).selector_probs[:, 0, 1] == 0.0)
    _, _, sel = model.predict(x)
    assert sel[:, 0].max() <= 1
    assert len(model.decode().rules[0]) == 2
    model.deactivate(0, 0)
    with pytest.raises(ValueError, match="last rule"):
        model.deactivate(0, 0)


def test_add_rule_slot_reuses_then_widens():
    model = CMR(small_config(), 3)
    model.deactivate(1, 0)
    emb = np.zeros(model.config.rule_emb_size)
    assert model.add_rule_slot(1, emb) == 0 and model.n_slots == 3
    assert model.add_rule_slot(0, emb) == 3 and model.n_slots == 4
    assert model.rule_counts == [4, 3]
    x = np.random.default_rng(0).normal(size=(4, 5))
    out = model.forward(x)
    assert out.selector_probs.shape == (4, 2, 4)
    assert np.all(out.selector_probs[:, 1, 3] == 0.0)
    assert model.decode().rules[0][3].provenance == "manual"


def test_checkpoint_roundtrip(tmp_path):
    model = CMR(small_config(concept_groups=((0, 1),)), 4)
    model.deactivate(0, 2)
    opt = dc.AdamW(model.params)
    batch = random_batch(np.random.default_rng(0), model.config)
    dc.backward(model.objective(batch))
    opt.step()
    save_checkpoint(tmp_path / "m.json", model, opt, step=1, seed=4, extra={"note": "x"})
    doc = load_checkpoint(tmp_path / "m.json")
    again = doc["model"]
    assert doc["step"] == 1 and doc["seed"] == 4 and doc["note"] == "x"
    assert again.rule_counts == model.rule_counts
    for k, p in model.params.items():
        assert p.data.tobytes() == again.params[k].data.tobytes()
    assert model.objective(batch).item() == again.objective(batch).item()
