import os
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from smba.ball import FeasibilityCase
from smba.problem import ConstrainedProblem, FunctionConstraints, FunctionObjective, QCQPInstance, qcqp_as_problem
from smba.sets import WholeSpace
from smba.solver import (SolverConfig, StepsizeSchedule, StoppingRule, checkpoint_grid,
                         deterministic_max_violation_step, fit_loglog_slope, fit_rate_slope, rate_metric, run,
                         run_repeated, smba_iterate)


def test_schedule_values():
    assert StepsizeSchedule.sqrt_log(1.0).value(0) == pytest.approx(1 / (np.sqrt(2) * np.log(2)))
    assert StepsizeSchedule.inv_sqrt(2.0).value(3) == pytest.approx(1.0)
    assert StepsizeSchedule.strongly_convex(0.5).value(1) == pytest.approx(2.0)
    assert StepsizeSchedule.constant(0.3).value(1000) == 0.3
    for bad in ("cubic",):
        with pytest.raises(ValueError):
            StepsizeSchedule(bad, 1.0)
    with pytest.raises(ValueError):
        StepsizeSchedule.sqrt_log(0.0)


@pytest.mark.parametrize("sched", [StepsizeSchedule.sqrt_log(1.0), StepsizeSchedule.inv_sqrt(1.0),
                                   StepsizeSchedule.strongly_convex(1.0)])
def test_schedules_decrease(sched):
    a = np.array([sched.value(k) for k in range(20000)])
    assert np.all(np.diff(a) < 0)
    assert np.all(a > 0)


def test_config_validation():
    s = StepsizeSchedule.sqrt_log(1.0)
    for kw in ({"beta": 0.0}, {"beta": 2.0}, {"averaging": "odd"}, {"max_iters": -1},
               {"probabilities": (0.5, 0.6)}, {"averaging": "strongly-convex"}):
        with pytest.raises(ValueError):
            SolverConfig(s, **kw)
    with pytest.raises(ValueError):
        StoppingRule(feas_tol=0.0)


def test_smba_iterate_example(one_d):
    cfg = SolverConfig(StepsizeSchedule.constant(0.25), beta=1.0)
    x1, rec = smba_iterate(np.array([2.0]), 0, one_d, cfg, index=0)
    # v = 2 - 0.25*(2*2 - 4) = 2, ball center 0, R = 1, full step lands on the ball boundary
    assert rec["v"] == pytest.approx([2.0])
    assert rec["case"] is FeasibilityCase.NONEMPTY_BALL
    assert x1 == pytest.approx([1.0])


def test_max_violation_matches_smba_when_m_is_one(one_d):
    cfg = SolverConfig(StepsizeSchedule.constant(0.1), beta=0.9)
    x = np.array([3.0])
    for k in range(20):
        a = deterministic_max_violation_step(x, k, one_d, cfg)
        b, _ = smba_iterate(x, k, one_d, cfg, index=0)
        np.testing.assert_array_equal(a, b)
        x = a


def test_max_violation_ignores_inactive_constraint():
    # h_0 = (x^2 - 1)/2 and h_1 = x - 100 is never violated along the trajectory
    inst = QCQPInstance(np.array([[2.0]]), np.array([-4.0]), np.array([[[1.0]], [[0.0]]]),
                        np.array([[0.0], [1.0]]), np.array([0.5, 100.0]), WholeSpace())
    prob = qcqp_as_problem(inst)
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=500, stopping=None)
    tr = run(prob, cfg, np.array([5.0]), method="max-violation")
    assert set(np.unique(tr.index)) <= {0}
    assert tr.x_final[0] == pytest.approx(1.0, abs=0.05)


def test_max_iters_zero(one_d):
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=0)
    tr = run(one_d, cfg, np.array([-2.0]))
    assert tr.iterations == 0 and tr.f.size == 0 and tr.stop_reason == "max_iters"
    np.testing.assert_array_equal(tr.x_final, [-2.0])


def test_dimension_mismatch(one_d):
    with pytest.raises(ValueError):
        run(one_d, SolverConfig(StepsizeSchedule.sqrt_log(0.5)), np.zeros(2))


@pytest.mark.parametrize("engine", ["compiled", "generic"])
def test_averaging_identity(small_qcqp, engine):
    inst, x0, prob = small_qcqp
    sched = StepsizeSchedule.sqrt_log(0.5)
    cfg = SolverConfig(sched, max_iters=300, stopping=None, store_iterates=True)
    tr = run(prob, cfg, x0, engine=engine)
    xs = tr.iterates[:-1]
    w = np.array([sched.value(t) for t in range(len(xs))])
    np.testing.assert_allclose(tr.x_avg, w @ xs / w.sum(), rtol=1e-10, atol=1e-12)


def test_strong_averaging_identity(small_qcqp):
    inst, x0, prob = small_qcqp
    cfg = SolverConfig(StepsizeSchedule.strongly_convex(1.0), averaging="strongly-convex", max_iters=200,
                       stopping=None, store_iterates=True)
    tr = run(prob, cfg, x0)
    xs = tr.iterates[:-1]
    w = (np.arange(len(xs)) + 1.0) ** 2
    np.testing.assert_allclose(tr.x_avg, w @ xs / w.sum(), rtol=1e-10, atol=1e-12)


def test_determinism_and_seed_dependence(small_qcqp):
    inst, x0, prob = small_qcqp
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=2000, stopping=None)
    a, b = run(prob, cfg, x0), run(prob, cfg, x0)
    np.testing.assert_array_equal(a.f, b.f)
    np.testing.assert_array_equal(a.x_final, b.x_final)
    c = run(prob, replace(cfg, seed=1), x0)
    assert not np.array_equal(a.index, c.index)


@pytest.mark.parametrize("method", ["smba", "max-violation"])
def test_compiled_matches_generic(small_qcqp, method):
    inst, x0, prob = small_qcqp
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(1.0), max_iters=1500, stopping=None)
    a = run(prob, cfg, x0 + 2.0, method=method, engine="compiled")
    b = run(prob, cfg, x0 + 2.0, method=method, engine="generic")
    if method == "smba":
        np.testing.assert_array_equal(a.index, b.index)
    np.testing.assert_array_equal(a.case, b.case)
    np.testing.assert_allclose(a.f, b.f, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(a.feas_sq, b.feas_sq, rtol=1e-7, atol=1e-14)
    np.testing.assert_allclose(a.x_avg, b.x_avg, rtol=1e-9, atol=1e-12)


def test_chunked_callback_sees_every_record(small_qcqp):
    inst, x0, prob = small_qcqp
    seen = []
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=2500, stopping=None)
    tr = run(prob, cfg, x0, on_chunk=lambda k0, f, *rest: seen.append((k0, len(f))))
    assert sum(n for _, n in seen) == tr.iterations == 2500
    assert all(n <= 1000 for _, n in seen)


def test_generic_oracles_match_quadratic(one_d):
    # the same 1-D problem through callables instead of arrays
    obj = FunctionObjective(lambda x: x @ x - 4 * x[0], lambda x: 2 * x - np.array([4.0]))
    cons = FunctionConstraints([lambda x: 0.5 * (x @ x - 1)], [lambda x: x.copy()], [1.0])
    prob = ConstrainedProblem(obj, cons, WholeSpace(), 1)
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=400, stopping=None)
    a = run(prob, cfg, np.array([3.0]))
    b = run(one_d, cfg, np.array([3.0]), engine="generic")
    np.testing.assert_allclose(a.f, b.f, rtol=1e-5)


def test_moves_toward_ball_center(small_qcqp):
    inst, x0, _ = small_qcqp
    # over the whole space the iterate is the ball step itself
    free = QCQPInstance(inst.Q_f, inst.q_f, inst.constraint_Q, inst.constraint_q, inst.constraint_b, WholeSpace())
    prob = qcqp_as_problem(free)
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(1.0), beta=0.96)
    rng = np.random.default_rng(0)
    cons = prob.constraints
    x = x0 + 1.0
    hits = 0
    for k in range(300):
        i = int(rng.integers(inst.m))
        x_next, rec = smba_iterate(x, k, prob, cfg, index=i)
        if rec["case"] is FeasibilityCase.NONEMPTY_BALL:
            v = rec["v"]
            c = v - cons.gradient(i, v) / cons.lipschitz(i)
            assert np.linalg.norm(x_next - c) <= np.linalg.norm(v - c) + 1e-12
            hits += 1
        x = x_next
    assert hits > 0


def test_checkpoint_grid():
    g = checkpoint_grid(100000, 200)
    assert g[0] == 1 and g[-1] == 100000
    assert np.all(np.diff(g) > 0)
    assert checkpoint_grid(0, 200).size == 0


def test_slope_fit_known_rates():
    k = np.arange(1, 10001)
    assert fit_loglog_slope(k, 3.0 / k) == pytest.approx(-1.0, abs=1e-9)
    assert fit_loglog_slope(k, 2.0 / np.sqrt(k)) == pytest.approx(-0.5, abs=1e-9)
    with pytest.raises(ValueError):
        fit_loglog_slope(k[:5], 1.0 / k[:5])
    with pytest.raises(ValueError):
        fit_loglog_slope(k, 1.0 / k, window=0.0)


def test_rate_metric_errors(one_d):
    tr = run(one_d, SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=50, stopping=None), np.array([3.0]))
    with pytest.raises(ValueError):
        rate_metric(tr, "opt_gap")
    with pytest.raises(ValueError):
        rate_metric(tr, "nonsense", 0.0)


def test_one_d_strongly_convex_rate(one_d):
    cfg = SolverConfig(StepsizeSchedule.strongly_convex(2.0), averaging="strongly-convex",
                       max_iters=100000, stopping=None)
    tr = run(one_d, cfg, np.array([0.0]))
    slope = fit_rate_slope(tr, "dist_sq", reference=np.array([1.0]))
    # with a single constraint there is no sampling noise, so the 1/k^2 term dominates (slope near -2)
    assert -2.6 <= slope <= -0.7


def test_one_d_converges_from_infeasible_start(one_d):
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=20000, stopping=None)
    tr = run(one_d, cfg, np.array([5.0]))
    assert tr.x_final[0] == pytest.approx(1.0, abs=1e-3)
    gap = np.abs(tr.avg_iterates[:, 0] - 1.0)
    assert gap[-1] < 0.15 * gap[0]


def test_run_repeated_deterministic_iters(small_qcqp):
    inst, x0, prob = small_qcqp
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=500, stopping=None)
    s = run_repeated(prob, cfg, x0, 3)
    assert s.std_iters == 0.0 and s.mean_iters == 500
    assert [t.seed for t in s.traces] == [0, 1, 2]
    t = run_repeated(prob, cfg, x0, 3, threads=3)
    for a, b in zip(s.traces, t.traces):
        np.testing.assert_array_equal(a.f, b.f)
    with pytest.raises(ValueError):
        run_repeated(prob, cfg, x0, 0)


def test_probabilities_respected(small_qcqp):
    inst, x0, prob = small_qcqp
    p = np.zeros(inst.m)
    p[[3, 7]] = 0.5
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(0.5), max_iters=300, stopping=None, probabilities=tuple(p))
    tr = run(prob, cfg, x0)
    assert set(np.unique(tr.index)) <= {3, 7}


def test_numpy_fallback_matches_compiled(tmp_path):
    script = (
        "import numpy as np, sys\n"
        "from smba import GenSpec, gen_instance, qcqp_as_problem, run, SolverConfig, StepsizeSchedule, BACKEND\n"
        "inst, x0, _ = gen_instance(GenSpec(20, 30, seed=4))\n"
        "tr = run(qcqp_as_problem(inst), SolverConfig(StepsizeSchedule.sqrt_log(1.0), max_iters=3000, stopping=None), x0 + 1)\n"
        "np.save(sys.argv[1], np.concatenate([tr.f, tr.feas_sq, tr.x_avg]))\n"
        "print(BACKEND)\n"
    )
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, SMBA_DISABLE_NUMBA=flag)
        path = tmp_path / f"r{flag}.npy"
        res = subprocess.run([sys.executable, "-c", script, str(path)], env=env, capture_output=True, text=True,
                             check=True)
        out[res.stdout.strip()] = np.load(path)
    assert set(out) == {"numba", "numpy"}
    np.testing.assert_allclose(out["numba"], out["numpy"], rtol=1e-10, atol=1e-14)
