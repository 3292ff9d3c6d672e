import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smba.problem import QCQPInstance, estimate_lipschitz, qcqp_as_problem
from smba.sets import NonnegativeOrthant

from conftest import random_psd


def test_one_d_example(one_d):
    assert one_d.objective.value(np.array([1.0])) == pytest.approx(-3.0)
    assert one_d.constraints.value(0, np.array([2.0])) == pytest.approx(1.5)
    assert one_d.constraints.gradient(0, np.array([2.0])) == pytest.approx([2.0])
    assert one_d.constraints.lipschitz(0) == pytest.approx(1.0, rel=1e-5)
    assert one_d.feasibility_sq(np.array([2.0])) == pytest.approx(2.25)
    assert one_d.feasibility_sq(np.array([0.5])) == 0.0


def test_json_round_trip(tmp_path, small_qcqp):
    inst, _, _ = small_qcqp
    path = tmp_path / "inst.json"
    inst.save(path)
    back = QCQPInstance.load(path)
    for a in ("Q_f", "q_f", "constraint_Q", "constraint_q", "constraint_b"):
        np.testing.assert_array_equal(getattr(back, a), getattr(inst, a))
    assert isinstance(back.simple_set, NonnegativeOrthant)
    x = np.linspace(0, 1, inst.n)
    assert back.objective_value(x) == inst.objective_value(x)


def test_container_count_mismatch(small_qcqp):
    d = small_qcqp[0].to_dict()
    d["m"] += 1
    with pytest.raises(ValueError):
        QCQPInstance.from_dict(json.loads(json.dumps(d)))


def test_check_rejects_asymmetric_and_indefinite():
    inst = QCQPInstance(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), np.eye(2)[None], np.zeros((1, 2)), [1.0])
    with pytest.raises(ValueError, match="symmetric"):
        inst.check()
    inst = QCQPInstance(np.diag([1.0, -1.0]), np.zeros(2), np.eye(2)[None], np.zeros((1, 2)), [1.0])
    with pytest.raises(ValueError, match="semidefinite"):
        inst.check()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        QCQPInstance(np.eye(3), np.zeros(2), np.eye(2)[None], np.zeros((1, 2)), [1.0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_lipschitz_against_eigvalsh(seed, n):
    rng = np.random.default_rng(seed)
    Q = random_psd(n, rng, rank=int(rng.integers(1, n + 1)))
    lam = np.linalg.eigvalsh(Q)[-1]
    est = estimate_lipschitz(Q)
    assert lam * (1 - 1e-12) <= est <= lam * (1 + 1e-6) * (1 + 1e-9)


def test_lipschitz_zero_matrix():
    assert estimate_lipschitz(np.zeros((3, 3))) == 0.0
    with pytest.raises(ValueError):
        estimate_lipschitz(np.array([[np.nan]]))


def test_quadratic_upper_bound(small_qcqp):
    inst, _, prob = small_qcqp
    rng = np.random.default_rng(0)
    cons = prob.constraints
    for _ in range(100):
        x, y = rng.standard_normal((2, inst.n))
        for i in rng.choice(inst.m, 5, replace=False):
            bound = cons.value(i, x) + cons.gradient(i, x) @ (y - x) + cons.lipschitz(i) / 2 * np.sum((y - x) ** 2)
            assert cons.value(i, y) <= bound + 1e-9 * max(1.0, abs(bound))


def test_values_vectorized(small_qcqp):
    inst, x0, prob = small_qcqp
    h = prob.constraints.values(x0)
    np.testing.assert_allclose(h, [prob.constraints.value(i, x0) for i in range(inst.m)], rtol=1e-12)
    np.testing.assert_allclose(h, inst.constraint_values(x0), rtol=1e-12)


def test_strong_convexity_detected():
    inst = QCQPInstance(np.diag([2.0, 3.0]), np.zeros(2), np.eye(2)[None], np.zeros((1, 2)), [1.0])
    assert qcqp_as_problem(inst).objective.strong_convexity_mu == pytest.approx(2.0)
    inst = QCQPInstance(np.diag([0.0, 3.0]), np.zeros(2), np.eye(2)[None], np.zeros((1, 2)), [1.0])
    assert qcqp_as_problem(inst).objective.strong_convexity_mu == 0.0
