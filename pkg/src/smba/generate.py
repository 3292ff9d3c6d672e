"""Random convex QCQP instances over the nonnegative orthant."""
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .problem import QCQPInstance
from .sets import NonnegativeOrthant

REGIMES = ("convex", "strongly-convex")
B_SCHEMES = ("feasible-x0", "random-b")


@dataclass(frozen=True)
class GenSpec:
    n: int
    m: int
    objective_regime: str = "convex"
    b_scheme: str = "feasible-x0"
    seed: int = 0
    zero_fraction: float = 0.1
    # range of the objective's linear term; see README for why it is not (0, 1)
    q_f_low: float = -1.0
    q_f_high: float = 0.0

    def __post_init__(self):
        if self.objective_regime not in REGIMES:
            raise ValueError(f"objective_regime must be one of {REGIMES}")
        if self.b_scheme not in B_SCHEMES:
            raise ValueError(f"b_scheme must be one of {B_SCHEMES}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0 <= self.zero_fraction < 1:
            raise ValueError("zero_fraction must lie in [0, 1)")
        if self.zero_fraction > 0 and self.zero_count < 1:
            raise ValueError(
                f"n={self.n} with zero_fraction={self.zero_fraction} gives zero_count=0; "
                f"need n >= {math.ceil(1 / self.zero_fraction)}"
            )
        if not self.q_f_low < self.q_f_high:
            raise ValueError("q_f_low must be below q_f_high")

    @property
    def zero_count(self):
        return int(math.floor(self.n * self.zero_fraction + 1e-12))


def _open_unit(rng, size):
    return rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=size)


def random_orthogonal(n, rng):
    """Orthogonal factor of the QR decomposition of a Gaussian matrix, signs fixed so diag(R) >= 0."""
    Y, R = np.linalg.qr(rng.standard_normal((n, n)))
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Y * signs


def gen_psd(n, zero_count, rng):
    """``Y' diag(d) Y`` with ``zero_count`` zeros in ``d`` at random positions, the rest in (0, 1)."""
    if not 0 <= zero_count <= n:
        raise ValueError(f"zero_count must lie in [0, {n}], got {zero_count}")
    Y = random_orthogonal(n, rng)
    d = _open_unit(rng, n)
    d[rng.choice(n, size=zero_count, replace=False)] = 0.0
    Q = (Y.T * d) @ Y
    return 0.5 * (Q + Q.T)


def gen_instance(spec: GenSpec):
    """Return ``(instance, x0, x0_feasible)`` for ``spec``; bit-identical for equal specs."""
    rng = np.random.default_rng(spec.seed)
    n, m, zc = spec.n, spec.m, spec.zero_count
    Q_f = gen_psd(n, zc if spec.objective_regime == "convex" else 0, rng)
    q_f = rng.uniform(spec.q_f_low, spec.q_f_high, size=n)
    Qs = np.empty((m, n, n))
    qs = np.empty((m, n))
    for i in range(m):
        Qs[i] = gen_psd(n, zc, rng)
        qs[i] = _open_unit(rng, n)

    if spec.b_scheme == "feasible-x0":
        x0 = _open_unit(rng, n)
        bs = 0.5 * np.einsum("j,ijk,k->i", x0, Qs, x0) + qs @ x0 + 0.1
    else:
        bs = _open_unit(rng, m)
        x0 = 1.0 + _open_unit(rng, n)
        for _ in range(20):
            if np.any(0.5 * np.einsum("j,ijk,k->i", x0, Qs, x0) + qs @ x0 - bs > 0):
                break
            x0 = 2.0 * x0
    inst = QCQPInstance(Q_f, q_f, Qs, qs, bs, NonnegativeOrthant())
    x0_feasible = bool(np.all(inst.constraint_values(x0) <= 0.0))
    return inst, x0, x0_feasible


def write_instance(spec, inst, x0, x0_feasible, instance_path, sidecar_path):
    inst.save(instance_path)
    with open(sidecar_path, "w") as fh:
        json.dump({"x0": x0.tolist(), "x0_feasible": x0_feasible, "spec": asdict(spec)}, fh)
