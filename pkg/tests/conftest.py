import numpy as np
import pytest

from smba.cli import analytic_1d
from smba.generate import GenSpec, gen_instance
from smba.problem import qcqp_as_problem


def random_psd(n, rng, rank=None):
    A = rng.standard_normal((n, rank or n))
    return A @ A.T / n


def random_quadratic(n, rng):
    """``(Q, q, b, L)`` with ``h(x) = x'Qx/2 + q'x - b`` and exact ``L = lambda_max(Q)``."""
    Q = random_psd(n, rng, rank=rng.integers(1, n + 1))
    q = rng.standard_normal(n)
    b = rng.uniform(0.1, 2.0)
    return Q, q, b, float(np.linalg.eigvalsh(Q)[-1])


def violated_samples(count, rng, dims=(2, 20)):
    """Constraints and points with ``h(v) > 0``, as tuples ``(v, h, g, L)``."""
    out = []
    while len(out) < count:
        n = int(rng.integers(dims[0], dims[1] + 1))
        Q, q, b, L = random_quadratic(n, rng)
        v = rng.standard_normal(n) * rng.uniform(0.2, 3.0)
        h = 0.5 * v @ Q @ v + q @ v - b
        if h > 0:
            out.append((v, float(h), Q @ v + q, L))
    return out


@pytest.fixture(scope="session")
def one_d():
    inst, x0, ref = analytic_1d()
    prob = qcqp_as_problem(inst, reference_optimum=ref)
    return prob


@pytest.fixture(scope="session")
def small_qcqp():
    inst, x0, _ = gen_instance(GenSpec(20, 30, "convex", "feasible-x0", seed=3))
    return inst, x0, qcqp_as_problem(inst)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


def record_verdict(number, name, ok, detail=""):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
