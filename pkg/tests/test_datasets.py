import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmr import datasets as ds
from cmr.datasets import GeneratorSpec


def gen(kind="pairsum", **kw):
    return ds.generate(GeneratorSpec(kind=kind, **kw))


def test_pairsum_layout():
    d = gen(digits=4, n_examples=50, seed=1)
    assert d.n_inputs == 8 and len(d.concept_names) == 8 and len(d.task_names) == 7
    a, b = d.c[:, :4].argmax(1), d.c[:, 4:].argmax(1)
    np.testing.assert_array_equal(d.y.argmax(1), a + b)
    assert len(d.ground_truth.rules[3]) == 4


def test_pairsum_incomplete_layout():
    d = gen("pairsum_incomplete", digits=4, n_examples=200, seed=1, dropped_concepts=(0, 1))
    assert d.concept_names == ["c_0_2", "c_0_3", "c_1_2", "c_1_3"]
    full = gen(digits=4, n_examples=200, seed=1)
    np.testing.assert_array_equal(d.x, full.x)
    row = np.flatnonzero((full.c[:, 0] == 1) & (full.c[:, 7] == 1))[0]     # digits (0, 3)
    np.testing.assert_array_equal(d.c[row], [0, 0, 0, 1])
    with pytest.raises(ValueError, match="out of range"):
        gen("pairsum_incomplete", digits=4, dropped_concepts=(5,))


def test_unknown_kind_and_bad_parameters():
    with pytest.raises(ValueError, match="unknown dataset kind"):
        GeneratorSpec(kind="mnist")
    with pytest.raises(ValueError):
        GeneratorSpec(digits=1)
    with pytest.raises(ValueError):
        GeneratorSpec(noise_sigma=-1.0)


@pytest.mark.parametrize("kind, digits", [("pairsum", 4), ("pairsum", 10), ("paritycolor", 10),
                                          ("paritycolor", 4)])
def test_ground_truth_is_exact_on_its_data(kind, digits):
    d = gen(kind, digits=digits, n_examples=2000, seed=3)
    assert ds.truth_accuracy(d) == 1.0


def test_reproducible_bitwise():
    a, b = gen(n_examples=300, seed=9), gen(n_examples=300, seed=9)
    assert a.x.tobytes() == b.x.tobytes() and a.c.tobytes() == b.c.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert gen(n_examples=300, seed=10).x.tobytes() != a.x.tobytes()


def test_pairsum_tasks_are_exclusive_and_exhaustive():
    d = gen(digits=10, n_examples=5000, seed=2)
    assert np.all(d.y.sum(axis=1) == 1)


def test_pairsum_task_frequencies():
    D, n = 4, 20000
    d = gen(digits=D, n_examples=n, seed=5)
    expect = np.array([D - abs(k - (D - 1)) for k in range(2 * D - 1)]) / D ** 2
    np.testing.assert_allclose(d.y.mean(axis=0), expect, atol=0.02)


def test_color_is_independent_of_parity():
    d = gen("paritycolor", digits=10, n_examples=20000, seed=5)
    r = np.corrcoef(d.c[:, -2], d.y[:, 0])[0, 1]
    assert abs(r) < 0.03
    assert np.all(d.c[:, -2] + d.c[:, -1] == 1)


def test_noise_scale():
    d = gen(digits=4, n_examples=20000, seed=4, noise_sigma=0.3)
    assert np.std(d.x - d.c) == pytest.approx(0.3, rel=0.02)
    clean = gen(digits=4, n_examples=10, seed=4, noise_sigma=0.0)
    np.testing.assert_array_equal(clean.x, clean.c)


def test_bottleneck_ceiling_matches_counting_argument():
    # four of the sixteen digit pairs are fully observed; every other pattern
    # hides one or both digits and its majority sum is right half the time
    d = gen("pairsum_incomplete", digits=4, n_examples=10000, seed=1)
    assert ds.bottleneck_ceiling(d) == pytest.approx(10 / 16, abs=0.02)
    assert ds.bottleneck_ceiling(gen(digits=4, n_examples=2000, seed=1)) == 1.0


# ---- file format ----------------------------------------------------------

def test_save_load_roundtrip(tmp_path):
    d = gen("paritycolor", digits=4, n_examples=100, seed=2)
    d.save(tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    assert len(lines) == 101
    e = ds.Dataset.load(tmp_path / "d.jsonl")
    assert e.x.tobytes() == d.x.tobytes()
    np.testing.assert_array_equal(e.c, d.c)
    np.testing.assert_array_equal(e.y, d.y)
    assert e.ground_truth == d.ground_truth and e.spec == d.spec


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_float_roundtrip_is_exact(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(50, 1)) * 10.0 ** rng.integers(-300, 300, size=(50, 1))
    for xi in x.ravel():
        assert float(json.loads(json.dumps(float(xi)))) == xi


def test_thousand_doubles_survive_a_file(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_cauchy(size=(1000, 1))
    d = ds.Dataset(["c"], ["y"], x, np.zeros((1000, 1)), np.zeros((1000, 1)))
    d.save(tmp_path / "f.jsonl")
    assert ds.Dataset.load(tmp_path / "f.jsonl").x.tobytes() == d.x.tobytes()


def _write(tmp_path, rows):
    meta = {"concept_names": ["a", "b"], "task_names": ["y"], "n_inputs": 2}
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join([json.dumps(meta)] + [json.dumps(r) for r in rows]) + "\n")
    return path


def test_malformed_bit_names_the_line(tmp_path):
    ok = {"x": [0.1, 0.2], "c": [0, 1], "y": [1]}
    path = _write(tmp_path, [ok, ok, {"x": [0.1, 0.2], "c": [0, 2], "y": [1]}])
    with pytest.raises(ds.DatasetFormatError, match=r"bad\.jsonl:4: field 'c'"):
        ds.Dataset.load(path)


def test_wrong_width_and_garbage_rows(tmp_path):
    with pytest.raises(ds.DatasetFormatError, match=":2: expected widths"):
        ds.Dataset.load(_write(tmp_path, [{"x": [0.1], "c": [0, 1], "y": [1]}]))
    path = _write(tmp_path, [])
    path.write_text(path.read_text() + "{not json\n")
    with pytest.raises(ds.DatasetFormatError, match=":2: malformed"):
        ds.Dataset.load(path)
    with pytest.raises(ds.DatasetFormatError, match=":2: field 'y'"):
        ds.Dataset.load(_write(tmp_path, [{"x": [0.1, 0.3], "c": [0, 1], "y": [True]}]))
