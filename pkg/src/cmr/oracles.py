"""Reference computations that share no arithmetic with the model code.

* likelihoods by brute-force marginalization over every role assignment
  (``3 ** n_concepts`` per rule) instead of the factored product;
* gradients by central finite differences.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

_ASSIGNMENTS: dict[int, np.ndarray] = {}


def role_assignments(n: int) -> np.ndarray:
    """Every role vector over ``n`` concepts, shape (3**n, n), codes P=0 N=1 I=2."""
    if n not in _ASSIGNMENTS:
        _ASSIGNMENTS[n] = np.array(list(itertools.product(range(3), repeat=n)), dtype=np.int8).reshape(-1, n)
    return _ASSIGNMENTS[n]


def _fires(A: np.ndarray, c) -> np.ndarray:
    c = np.asarray(c)
    return ~(((A == 0) & (c == 0)) | ((A == 1) & (c == 1))).any(axis=1)


def _assignment_probs(A: np.ndarray, rp: np.ndarray) -> np.ndarray:
    return rp[np.arange(A.shape[1]), A].prod(axis=1)


def brute_task_likelihood(c, role_probs) -> float:
    """p(y=1|c,s): sum over all role assignments r of p(r|s) * [r evaluates true on c]."""
    rp = np.asarray(role_probs, dtype=np.float64)
    A = role_assignments(len(rp))
    return float(_assignment_probs(A, rp)[_fires(A, c)].sum())


def brute_reg_likelihood(c_hat, role_probs) -> float:
    """p_reg(r = c_hat | s): an irrelevant role matches either value with weight 1/2."""
    rp = np.asarray(role_probs, dtype=np.float64)
    total = 0.0
    for assignment in itertools.product(range(3), repeat=len(rp)):
        w = 1.0
        for i, role in enumerate(assignment):
            if role == 2:
                w *= 0.5 * rp[i, 2]
            elif (role == 0) == (c_hat[i] == 1):
                w *= rp[i, role]
            else:
                w = 0.0
                break
        total += w
    return total


def brute_joint(concept_probs, selector_probs, role_probs, c, y: int) -> float:
    """p(y, c | x) = sum_s sum_r p(c|x) p(s|x) p(r|s) p(y|c,r)."""
    cp = np.asarray(concept_probs, dtype=np.float64)
    p_c = 1.0
    for pi, ci in zip(cp, c):
        p_c *= pi if ci == 1 else 1.0 - pi
    A = role_assignments(len(cp))
    agree = _fires(A, c) == bool(y)
    total = 0.0
    for s, ps in enumerate(selector_probs):
        probs = _assignment_probs(A, np.asarray(role_probs[s], dtype=np.float64))
        total += p_c * ps * float(probs[agree].sum())
    return total


def factored_joint(concept_probs, selector_probs, role_probs, c, y: int) -> float:
    """The same joint through the closed-form per-rule product."""
    from .model import task_likelihood
    cp = np.asarray(concept_probs)
    c = np.asarray(c)
    p_c = float(np.prod(np.where(c == 1, cp, 1.0 - cp)))
    p1 = sum(ps * task_likelihood(c, role_probs[s]) for s, ps in enumerate(selector_probs))
    return p_c * (p1 if y == 1 else 1.0 - p1)


def random_simplex(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])


@dataclass
class JointCase:
    concept_probs: np.ndarray
    selector_probs: np.ndarray
    role_probs: np.ndarray
    c: np.ndarray
    y: int


def random_joint_case(rng: np.random.Generator, max_concepts: int = 8, max_rules: int = 4) -> JointCase:
    n_c = int(rng.integers(1, max_concepts + 1))
    n_r = int(rng.integers(1, max_rules + 1))
    return JointCase(rng.uniform(size=n_c), random_simplex(rng, (n_r,)) if n_r > 1 else np.ones(1),
                     random_simplex(rng, (n_r, n_c, 3)), rng.integers(0, 2, n_c), int(rng.integers(0, 2)))


def likelihood_deviation(rng: np.random.Generator, n_cases: int, **kw) -> float:
    """Largest |factored - brute force| joint over random instances."""
    worst = 0.0
    for _ in range(n_cases):
        case = random_joint_case(rng, **kw)
        args = (case.concept_probs, case.selector_probs, case.role_probs, case.c, case.y)
        worst = max(worst, abs(factored_joint(*args) - brute_joint(*args)))
    return worst


def brute_objective(model, batch, *, teacher_force: bool = True) -> float:
    """The model objective recomputed example by example from brute-force
    marginals, with plain floats and no log-space tricks beyond the clamp."""
    cfg = model.config
    out = model.forward(batch.x)
    cp = out.concept_probs.data
    sp = out.selector_probs
    rp = out.role_probs.data
    c_task = batch.c_hat if teacher_force else (cp >= 0.5).astype(int)
    clamp = lambda v: min(max(v, 1e-12), 1.0)  # noqa: E731
    total = 0.0
    for b in range(len(batch.x)):
        ll = 0.0
        for i in range(cfg.n_concepts):
            ll += np.log(clamp(cp[b, i] if batch.c_hat[b, i] == 1 else 1.0 - cp[b, i]))
        for t in range(cfg.n_tasks):
            y = int(batch.y_hat[b, t])
            mix = 0.0
            for s in range(rp.shape[1]):
                p1 = clamp(brute_task_likelihood(c_task[b], rp[t, s]))
                p0 = clamp(1.0 - np.exp(np.log(p1)))
                py = p1 if y == 1 else p0
                term = sp[b, t, s] * py ** cfg.beta
                if y == 1:
                    term *= clamp(brute_reg_likelihood(batch.c_hat[b], rp[t, s]))
                mix += term
            weight = cfg.positive_weight if y == 1 else 1.0
            ll += weight * np.log(mix)
        total += ll
    return -total / len(batch.x)


def _at_kink(f, p: np.ndarray, ix, h: float) -> bool:
    """True when the left and right difference quotients disagree, i.e. the
    coordinate sits on a non-differentiable point such as a ReLU hinge."""
    base = p[ix]
    f0 = f()
    p[ix] = base + h
    right = (f() - f0) / h
    p[ix] = base - h
    left = (f0 - f()) / h
    p[ix] = base
    return abs(right - left) > 1e-3 * max(1.0, abs(right), abs(left))


def gradient_check(model, batch, *, n_coords: int = 20, rng: np.random.Generator | None = None,
                   h: float = 1e-5, teacher_force: bool = True, max_draws: int | None = None) -> float:
    """Largest relative error between backprop and central differences over
    ``n_coords`` random parameter coordinates.

    Coordinates on a kink of the piecewise-linear network are redrawn: there
    the central difference averages two one-sided slopes and matches neither.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in model.params.values():
        p.grad = None
    dc.backward(model.objective(batch, teacher_force=teacher_force))
    f = lambda: model.objective(batch, teacher_force=teacher_force).item()  # noqa: E731
    names = list(model.params)
    sizes = np.array([model.params[k].data.size for k in names], dtype=float)
    worst, checked = 0.0, 0
    for _ in range(max_draws or 20 * n_coords):
        if checked == n_coords:
            break
        k = names[rng.choice(len(names), p=np.sqrt(sizes) / np.sqrt(sizes).sum())]
        p = model.params[k]
        ix = np.unravel_index(int(rng.integers(p.data.size)), p.data.shape)
        if _at_kink(f, p.data, ix, h):
            continue
        numeric = dc.numerical_grad(f, p.data, h=h, coords=[ix])[ix]
        worst = max(worst, float(dc.rel_error(p.grad[ix], numeric)))
        checked += 1
    if checked < n_coords:
        raise RuntimeError(f"only {checked} of {n_coords} coordinates were away from kinks")
    return worst
