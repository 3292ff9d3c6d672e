"""Objective/constraint oracles, QCQP instances and their JSON container."""
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .sets import SimpleSet, WholeSpace, set_from_dict

MU_THRESHOLD = 1e-10
LIPSCHITZ_FLOOR = 1e-12


class ObjectiveOracle:
    """Convex objective ``f`` with a subgradient and modulus ``mu >= 0``."""

    strong_convexity_mu: float = 0.0
    lipschitz_grad: Optional[float] = None

    def value(self, x):
        raise NotImplementedError

    def subgradient(self, x):
        raise NotImplementedError


class ConstraintFamily:
    """Finite family ``h(., i)``, ``i = 0..count-1``, each with Lipschitz gradient."""

    count: int = 0

    def value(self, index, x):
        raise NotImplementedError

    def gradient(self, index, x):
        raise NotImplementedError

    def lipschitz(self, index):
        raise NotImplementedError

    def values(self, x):
        return np.array([self.value(i, x) for i in range(self.count)])


class QuadraticObjective(ObjectiveOracle):
    def __init__(self, Q, q, mu=None, lipschitz_grad=None):
        self.Q = np.ascontiguousarray(Q, dtype=float)
        self.q = np.ascontiguousarray(q, dtype=float)
        if mu is None:
            lam_min = float(np.linalg.eigvalsh(self.Q)[0]) if self.Q.size else 0.0
            mu = lam_min if lam_min > MU_THRESHOLD else 0.0
        self.strong_convexity_mu = float(mu)
        self.lipschitz_grad = lipschitz_grad

    def value(self, x):
        return float(0.5 * x @ (self.Q @ x) + self.q @ x)

    def subgradient(self, x):
        return self.Q @ x + self.q


class FunctionObjective(ObjectiveOracle):
    def __init__(self, value: Callable, subgradient: Callable, mu=0.0, lipschitz_grad=None):
        self._value = value
        self._grad = subgradient
        self.strong_convexity_mu = float(mu)
        self.lipschitz_grad = lipschitz_grad

    def value(self, x):
        return float(self._value(x))

    def subgradient(self, x):
        return np.asarray(self._grad(x), dtype=float)


class QuadraticConstraints(ConstraintFamily):
    """``h_i(x) = x'Q_i x / 2 + q_i'x - b_i``."""

    def __init__(self, Qs, qs, bs, lipschitz):
        self.Qs = np.ascontiguousarray(Qs, dtype=float)
        self.qs = np.ascontiguousarray(qs, dtype=float)
        self.bs = np.ascontiguousarray(bs, dtype=float)
        self.L = np.ascontiguousarray(lipschitz, dtype=float)
        self.count = self.Qs.shape[0]

    def value(self, index, x):
        return float(0.5 * x @ (self.Qs[index] @ x) + self.qs[index] @ x - self.bs[index])

    def gradient(self, index, x):
        return self.Qs[index] @ x + self.qs[index]

    def lipschitz(self, index):
        return float(self.L[index])

    def values(self, x):
        if self.count == 0:
            return np.zeros(0)
        Qx = self.Qs @ x
        return 0.5 * Qx @ x + self.qs @ x - self.bs


class FunctionConstraints(ConstraintFamily):
    def __init__(self, values: Sequence[Callable], gradients: Sequence[Callable], lipschitz: Sequence[float]):
        if not len(values) == len(gradients) == len(lipschitz):
            raise ValueError("values, gradients and lipschitz must have equal length")
        self._h = list(values)
        self._g = list(gradients)
        self._L = [float(v) for v in lipschitz]
        self.count = len(self._h)

    def value(self, index, x):
        return float(self._h[index](x))

    def gradient(self, index, x):
        return np.asarray(self._g[index](x), dtype=float)

    def lipschitz(self, index):
        return self._L[index]


@dataclass
class ReferenceOptimum:
    value: float
    provenance: str  # "analytic", "long-run baseline" or "external"
    x: Optional[np.ndarray] = None


@dataclass
class ConstrainedProblem:
    objective: ObjectiveOracle
    constraints: ConstraintFamily
    simple_set: SimpleSet
    dim: int
    reference_optimum: Optional[ReferenceOptimum] = None
    qcqp: Optional["QCQPInstance"] = None  # set when built from a QCQP; enables the compiled path

    def feasibility_sq(self, x):
        h = self.constraints.values(x)
        return float(np.sum(np.maximum(h, 0.0) ** 2))


@dataclass(eq=False)
class QCQPInstance:
    Q_f: np.ndarray
    q_f: np.ndarray
    constraint_Q: np.ndarray  # (m, n, n)
    constraint_q: np.ndarray  # (m, n)
    constraint_b: np.ndarray  # (m,)
    simple_set: SimpleSet = field(default_factory=WholeSpace)

    def __post_init__(self):
        self.Q_f = np.ascontiguousarray(self.Q_f, dtype=float)
        self.q_f = np.ascontiguousarray(self.q_f, dtype=float).reshape(-1)
        n = self.q_f.shape[0]
        self.constraint_Q = np.ascontiguousarray(self.constraint_Q, dtype=float).reshape(-1, n, n)
        m = self.constraint_Q.shape[0]
        self.constraint_q = np.ascontiguousarray(self.constraint_q, dtype=float).reshape(m, n)
        self.constraint_b = np.ascontiguousarray(self.constraint_b, dtype=float).reshape(m)
        if self.Q_f.shape != (n, n):
            raise ValueError(f"Q_f has shape {self.Q_f.shape}, expected {(n, n)}")

    @property
    def n(self):
        return self.q_f.shape[0]

    @property
    def m(self):
        return self.constraint_Q.shape[0]

    def check(self, sym_tol=1e-12, psd_tol=1e-10):
        """Raise ValueError unless every matrix is symmetric and PSD up to roundoff."""
        for name, Q in [("Q_f", self.Q_f)] + [(f"Q_{i}", Q) for i, Q in enumerate(self.constraint_Q)]:
            if not np.all(np.isfinite(Q)):
                raise ValueError(f"{name} has non-finite entries")
            if np.max(np.abs(Q - Q.T), initial=0.0) > sym_tol:
                raise ValueError(f"{name} is not symmetric")
            if Q.size and np.linalg.eigvalsh(Q)[0] < -psd_tol:
                raise ValueError(f"{name} is not positive semidefinite")

    def objective_value(self, x):
        return float(0.5 * x @ (self.Q_f @ x) + self.q_f @ x)

    def constraint_values(self, x):
        if self.m == 0:
            return np.zeros(0)
        return 0.5 * (self.constraint_Q @ x) @ x + self.constraint_q @ x - self.constraint_b

    def feasibility_sq(self, x):
        return float(np.sum(np.maximum(self.constraint_values(x), 0.0) ** 2))

    # -- serialization -------------------------------------------------
    def to_dict(self):
        return {
            "n": self.n,
            "m": self.m,
            "Q_f": self.Q_f.ravel().tolist(),
            "q_f": self.q_f.tolist(),
            "constraints": [
                {"Q": Q.ravel().tolist(), "q": q.tolist(), "b": float(b)}
                for Q, q, b in zip(self.constraint_Q, self.constraint_q, self.constraint_b)
            ],
            "simple_set": self.simple_set.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        n, m = int(d["n"]), int(d["m"])
        cons = d["constraints"]
        if len(cons) != m:
            raise ValueError(f"container declares m={m} but lists {len(cons)} constraints")
        Qs = np.array([c["Q"] for c in cons], dtype=float).reshape(m, n, n)
        qs = np.array([c["q"] for c in cons], dtype=float).reshape(m, n)
        bs = np.array([c["b"] for c in cons], dtype=float)
        return cls(
            np.array(d["Q_f"], dtype=float).reshape(n, n),
            np.array(d["q_f"], dtype=float),
            Qs, qs, bs,
            set_from_dict(d.get("simple_set", {"tag": "whole-space"})),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def estimate_lipschitz(Q, tol=1e-6, seed=0, max_iter=20000):
    """Largest eigenvalue of a symmetric PSD matrix, inflated by ``1 + tol``.

    Power iteration from a seeded Gaussian start. The Rayleigh quotient never
    exceeds the true maximum, so the inflated value stays within ``1 + tol``
    of it; iteration continues until the quotient is within ``tol/10``
    (certified by a Cholesky factorization of ``lam*I - Q`` for moderate sizes).
    """
    Q = np.asarray(Q, dtype=float)
    if not np.all(np.isfinite(Q)):
        raise ValueError("matrix has non-finite entries")
    n = Q.shape[0]
    if n == 0 or not np.any(Q):
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    rho = 0.0
    certify = n <= 2000
    attempts = 0
    for it in range(max_iter):
        w = Q @ v
        rho_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart elsewhere
            v = rng.standard_normal(n)
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        converged = rho_new > 0 and (rho_new - rho) <= 1e-3 * tol * rho_new
        rho = max(rho, rho_new)
        if converged and it % 10 == 0:
            lam = rho * (1.0 + tol)
            if not certify:
                return lam
            try:
                np.linalg.cholesky(lam * np.eye(n) - Q + 0.0)
                return lam
            except np.linalg.LinAlgError:
                # clustered top eigenvalues stall power iteration; a dense solve is cheaper
                attempts += 1
                if attempts >= 3:
                    break
    lam_max = float(np.linalg.eigvalsh(Q)[-1])
    return max(lam_max, rho) * (1.0 + tol)


def qcqp_as_problem(instance: QCQPInstance, lipschitz_tol=1e-6, reference_optimum=None):
    """Wrap a QCQP as a ConstrainedProblem (oracles are views on the instance arrays)."""
    n = instance.n
    if instance.Q_f.shape != (n, n) or instance.constraint_Q.shape[1:] != (n, n):
        raise ValueError("dimension mismatch in QCQP instance")
    L = np.array(
        [max(estimate_lipschitz(Q, lipschitz_tol), LIPSCHITZ_FLOOR) for Q in instance.constraint_Q],
        dtype=float,
    )
    lf = estimate_lipschitz(instance.Q_f, lipschitz_tol) if n else 0.0
    objective = QuadraticObjective(instance.Q_f, instance.q_f, lipschitz_grad=lf if lf > 0 else None)
    constraints = QuadraticConstraints(instance.constraint_Q, instance.constraint_q, instance.constraint_b, L)
    return ConstrainedProblem(objective, constraints, instance.simple_set, n, reference_optimum, qcqp=instance)
