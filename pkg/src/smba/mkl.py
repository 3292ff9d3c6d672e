"""Multiple-kernel SVM as a convex QCQP over ``x = [alpha; d]``.

Each kernel matrix is built on the full data set (train and test rows) and
divided by its trace, so ``R_i = 1`` and ``R = m``. The QCQP is

    min  |alpha|^2 / (2C) - e'alpha + R d
    s.t. alpha' G_i alpha / 2 - R_i d <= 0,   alpha >= 0,  y'alpha = 0,

with ``G_i = diag(y) K_i,tr diag(y)``.
"""
import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import kernels as K
from .problem import (ConstrainedProblem, QCQPInstance, QuadraticConstraints, QuadraticObjective,
                      estimate_lipschitz, qcqp_as_problem)
from .sets import HyperplaneOrthant
from .solver import RunTrace, SolverConfig, StepsizeSchedule, StoppingRule, run

FREE_TOL = 1e-8
SIGMA_RANGE = (1e-4, 1e4)


# ---------------------------------------------------------------- data

@dataclass(eq=False)
class Dataset:
    features: np.ndarray  # (N, n_d)
    labels: np.ndarray  # (N,) of +1/-1
    train: np.ndarray  # row indices
    test: np.ndarray
    feature_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        self.train = np.asarray(self.train, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (N, n_d) with one label per row")
        if not np.all(np.abs(self.labels) == 1.0):
            raise ValueError("labels must be +1/-1")
        both = np.concatenate([self.train, self.test])
        if np.unique(both).size != both.size or not np.array_equal(np.sort(both), np.arange(len(self.labels))):
            raise ValueError("train/test split must be disjoint and cover every row")

    @property
    def x_train(self):
        return self.features[self.train]

    @property
    def y_train(self):
        return self.labels[self.train]

    @property
    def x_test(self):
        return self.features[self.test]

    @property
    def y_test(self):
        return self.labels[self.test]


def split_indices(n, split_fraction=0.8, seed=0):
    if not 0 < split_fraction <= 1:
        raise ValueError("split_fraction must lie in (0, 1]")
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = int(round(split_fraction * n))
    return np.sort(perm[:n_tr]), np.sort(perm[n_tr:])


def _binary_labels(raw):
    values = sorted(set(raw))
    if len(values) != 2:
        raise ValueError(f"label column must be binary, found {len(values)} distinct values")
    try:
        nums = sorted(float(v) for v in values)
        if nums == [-1.0, 1.0]:
            return np.array([float(v) for v in raw])
    except ValueError:
        pass
    neg = values[0]
    return np.array([-1.0 if v == neg else 1.0 for v in raw])


def load_csv_dataset(path, label_column, split_fraction=0.8, seed=0):
    """Read a headed CSV, map the binary label column to +1/-1, split and standardize.

    Standardization uses training rows only; columns constant on the training rows are dropped.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], [r for r in rows[1:] if any(c.strip() for c in r)]
    if label_column not in header:
        raise KeyError(f"label column {label_column!r} not in header")
    li = header.index(label_column)
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r + 2} has {len(row)} fields, expected {len(header)}")
    labels = _binary_labels([row[li].strip() for row in body])
    cols = [j for j in range(len(header)) if j != li]
    try:
        X = np.array([[float(row[j]) for j in cols] for row in body], dtype=float).reshape(len(body), len(cols))
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric feature value ({exc})") from None
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite feature value")
    names = [header[j] for j in cols]

    train, test = split_indices(len(body), split_fraction, seed)
    mean = X[train].mean(axis=0)
    std = X[train].std(axis=0)
    keep = std > 0
    if not np.all(keep):
        dropped = [n for n, k in zip(names, keep) if not k]
        warnings.warn(f"dropping constant columns: {', '.join(dropped)}")
    X = (X[:, keep] - mean[keep]) / std[keep]
    return Dataset(X, labels, train, test, [n for n, k in zip(names, keep) if k])


def separable_blobs(n=200, seed=0, separation=4.0, split_fraction=0.8):
    """Two Gaussian clouds in the plane, centered at +-separation/2 on the diagonal.

    Points falling closer than one unit to the separating line are redrawn, so
    the classes are linearly separable with margin.
    """
    rng = np.random.default_rng(seed)
    labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    u = np.array([1.0, 1.0]) / np.sqrt(2.0)
    pts = np.empty((n, 2))
    for j in range(n):
        while True:
            p = labels[j] * 0.5 * separation * u + rng.standard_normal(2)
            if labels[j] * (p @ u) >= 1.0:
                break
        pts[j] = p
    train, test = split_indices(n, split_fraction, seed)
    return Dataset(pts, labels, train, test, ["x1", "x2"])


# ---------------------------------------------------------------- kernels

@dataclass(frozen=True)
class KernelSpec:
    kind: str  # "linear", "polynomial" or "gaussian"
    param: Optional[float] = None  # degree r, or sigma^2

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "gaussian"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind != "linear" and not (self.param is not None and self.param > 0):
            raise ValueError(f"{self.kind} kernel needs a positive parameter")

    @classmethod
    def gaussian(cls, sigma_sq):
        return cls("gaussian", float(sigma_sq))

    def to_dict(self):
        return {"kind": self.kind, "param": self.param}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("param"))


def kernel_matrix(spec: KernelSpec, A, B):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if spec.kind == "linear":
        return A @ B.T
    if spec.kind == "polynomial":
        return (1.0 + A @ B.T) ** spec.param
    sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * (A @ B.T)
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * spec.param))


def kernel_value(spec: KernelSpec, a, b):
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(kernel_matrix(spec, a[None], b[None])[0, 0])


def gaussian_grid(m, low=SIGMA_RANGE[0], high=SIGMA_RANGE[1]):
    """``m`` Gaussian kernels with sigma^2 log-spaced over ``[low, high]``."""
    if m < 1:
        raise ValueError("need at least one kernel")
    return [KernelSpec.gaussian(s) for s in np.geomspace(low, high, m)]


# ---------------------------------------------------------------- QCQP assembly

@dataclass(eq=False)
class MKLProblem:
    kernels: List[KernelSpec]
    C: float
    traces: np.ndarray  # normalization constant of each kernel
    gram_train: np.ndarray  # (m, N_tr, N_tr), trace-normalized
    label_gram: np.ndarray  # G_i
    R: float
    R_i: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    instance: QCQPInstance

    @property
    def n_train(self):
        return self.y_train.shape[0]

    def as_problem(self, lipschitz_tol=1e-6) -> ConstrainedProblem:
        return qcqp_as_problem(self.instance, lipschitz_tol)


def assemble_mkl_qcqp(dataset: Dataset, kernels, C):
    if not C > 0:
        raise ValueError("C must be positive")
    y = dataset.y_train
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")
    kernels = list(kernels)
    m, N = len(kernels), y.shape[0]
    tr = dataset.train
    grams = np.empty((m, N, N))
    traces = np.empty(m)
    for i, spec in enumerate(kernels):
        Kfull = kernel_matrix(spec, dataset.features, dataset.features)
        traces[i] = np.trace(Kfull)
        if not traces[i] > 0:
            raise ValueError(f"kernel {i} has nonpositive trace")
        grams[i] = Kfull[np.ix_(tr, tr)] / traces[i]
    G = grams * np.outer(y, y)[None]
    G = 0.5 * (G + np.transpose(G, (0, 2, 1)))

    R_i = np.ones(m)
    R = float(m)
    n = N + 1
    Q_f = np.zeros((n, n))
    Q_f[:N, :N] = np.eye(N) / C
    q_f = np.concatenate([-np.ones(N), [R]])
    Qs = np.zeros((m, n, n))
    Qs[:, :N, :N] = G
    qs = np.zeros((m, n))
    qs[:, N] = -R_i
    inst = QCQPInstance(Q_f, q_f, Qs, qs, np.zeros(m), HyperplaneOrthant(y, np.inf, 1))
    return MKLProblem(kernels, float(C), traces, grams, G, R, R_i,
                      dataset.x_train.copy(), y.copy(), inst)


def project_simplex_like(alpha, labels, upper=np.inf):
    """Euclidean projection onto ``{a : 0 <= a <= upper, labels . a = 0}``.

    Exact: root of the piecewise-linear multiplier equation found from its
    sorted breakpoints. All-equal labels give the zero vector.
    """
    alpha = np.asarray(alpha, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if alpha.shape != labels.shape:
        raise ValueError("alpha and labels must have equal shape")
    if not np.all(np.abs(labels) == 1.0):
        raise ValueError("labels must be +1/-1")
    return K.project_hyperplane_box(alpha, labels, float(upper))


# ---------------------------------------------------------------- dual recovery

@dataclass
class DualEstimate:
    active_index: int
    lambda_value: float
    degenerate: bool
    residual: float  # norm of the reduced stationarity residual at lambda_value
    nu: float = 0.0  # multiplier of the hyperplane y'alpha = 0

    @property
    def multipliers(self) -> Dict[int, float]:
        return {self.active_index: self.lambda_value} if self.lambda_value > 0 else {}


def _free_gradients(problem: MKLProblem, x, index, tol):
    inst = problem.instance
    x = np.asarray(x, dtype=float)
    N = problem.n_train
    gf = inst.Q_f @ x + inst.q_f
    gh = inst.constraint_Q[index] @ x + inst.constraint_q[index]
    free = np.concatenate([x[:N] > tol, [True]])
    return gf[free], gh[free], problem.y_train[free[:N]]


def _drop_normal(g, yf):
    g = g.copy()
    k = yf.size
    if k:
        g[:k] -= yf * (yf @ g[:k]) / k
    return g


def reduced_gradients(problem: MKLProblem, x, index, tol=FREE_TOL):
    """Objective and constraint gradients on the free coordinates, with the label normal projected out.

    Free coordinates are ``alpha_j > tol`` and ``d``. The projection removes the
    component along ``y`` restricted to the free alphas, which the hyperplane
    multiplier absorbs.
    """
    gf, gh, yf = _free_gradients(problem, np.asarray(x, dtype=float), index, tol)
    return _drop_normal(gf, yf), _drop_normal(gh, yf)


def recover_dual(problem: MKLProblem, x_star, tol=FREE_TOL) -> DualEstimate:
    """Multiplier of the most violated (or least slack) constraint from a 1-D nonnegative least squares."""
    h = problem.instance.constraint_values(np.asarray(x_star, dtype=float))
    i = int(np.argmax(h))
    raw_f, raw_h, yf = _free_gradients(problem, np.asarray(x_star, dtype=float), i, tol)
    gf, gh = _drop_normal(raw_f, yf), _drop_normal(raw_h, yf)
    nh = float(gh @ gh)
    degenerate = nh == 0.0
    lam = 0.0 if degenerate else max(0.0, -float(gf @ gh) / nh)
    k = yf.size
    nu = -float(yf @ (raw_f[:k] + lam * raw_h[:k])) / k if k else 0.0
    return DualEstimate(i, lam, degenerate, float(np.linalg.norm(gf + lam * gh)), nu)


# ---------------------------------------------------------------- classifier

@dataclass(eq=False)
class TrainedClassifier:
    alpha: np.ndarray
    d: float  # bias term of the discriminant
    multipliers: Dict[int, float]
    kernels: List[KernelSpec]
    traces: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray

    def decision_function(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        coef = self.y_train * self.alpha
        score = np.full(A.shape[0], float(self.d))
        for i, lam in sorted(self.multipliers.items()):
            Kmat = kernel_matrix(self.kernels[i], self.x_train, A) / self.traces[i]
            score += lam * (coef @ Kmat)
        return score

    def predict(self, A):
        return np.where(self.decision_function(A) >= 0.0, 1.0, -1.0)

    def to_dict(self):
        return {
            "alpha": self.alpha.tolist(),
            "d": float(self.d),
            "lambda": [{"index": int(i), "value": float(v)} for i, v in sorted(self.multipliers.items())],
            "kernel_grid": [k.to_dict() for k in self.kernels],
            "normalization": self.traces.tolist(),
            "x_train": self.x_train.tolist(),
            "y_train": self.y_train.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["alpha"], dtype=float), float(d["d"]),
            {int(e["index"]): float(e["value"]) for e in d["lambda"]},
            [KernelSpec.from_dict(k) for k in d["kernel_grid"]],
            np.array(d["normalization"], dtype=float),
            np.array(d["x_train"], dtype=float).reshape(len(d["y_train"]), -1),
            np.array(d["y_train"], dtype=float),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def predict_tsa(classifier: TrainedClassifier, dataset: Dataset):
    """Fraction of test rows labeled correctly; ``sign(0)`` counts as +1."""
    if dataset.test.size == 0:
        raise ValueError("empty test split")
    return float(np.mean(classifier.predict(dataset.x_test) == dataset.y_test))


# ---------------------------------------------------------------- training

def default_mkl_config(problem: ConstrainedProblem, max_iters=100000, seed=0, beta=0.96):
    """Convex-case settings: sqrt-log steps scaled by ``1/L_f`` and the usual stopping rule."""
    lf = problem.objective.lipschitz_grad or 1.0
    return SolverConfig(StepsizeSchedule.sqrt_log(1.0 / lf), beta=beta, seed=seed, max_iters=max_iters,
                        stopping=StoppingRule(), averaging="convex")


def infeasible_start(problem: MKLProblem):
    """``alpha`` = projection of the all-ones vector, ``d = 0``; infeasible unless every G_i vanishes on it."""
    a = project_simplex_like(np.ones(problem.n_train), problem.y_train)
    return np.concatenate([a, [0.0]])


@dataclass
class MKLResult:
    classifier: TrainedClassifier
    problem: MKLProblem
    dual: DualEstimate
    trace: RunTrace
    x_star: np.ndarray


def train_mkl(dataset: Dataset, kernels, C, config: Optional[SolverConfig] = None, x0=None,
              use_average=False, bias="d") -> MKLResult:
    """Assemble, solve with SMBA, recover the active multiplier and build the classifier.

    The last iterate is used unless ``use_average`` is set. ``bias="d"`` puts the
    epigraph variable ``d*`` in the discriminant; ``bias="kkt"`` uses the
    hyperplane multiplier from the stationarity conditions instead, which is the
    bias of the equivalent single-kernel SVM.
    """
    if bias not in ("d", "kkt"):
        raise ValueError("bias must be 'd' or 'kkt'")
    mp = assemble_mkl_qcqp(dataset, kernels, C)
    prob = mp.as_problem()
    if config is None:
        config = default_mkl_config(prob)
    if x0 is None:
        x0 = infeasible_start(mp)
    trace = run(prob, config, x0)
    x = trace.x_avg if use_average else trace.x_final
    dual = recover_dual(mp, x)
    N = mp.n_train
    b = float(x[N]) if bias == "d" else dual.nu
    clf = TrainedClassifier(x[:N].copy(), b, dual.multipliers, mp.kernels, mp.traces,
                            mp.x_train, mp.y_train)
    return MKLResult(clf, mp, dual, trace, x)


# ---------------------------------------------------------------- single-kernel baseline

@dataclass
class SingleKernelResult:
    classifier: TrainedClassifier
    trace: RunTrace
    alpha: np.ndarray


def single_kernel_problem(dataset: Dataset, sigma_sq, C):
    """``min a'Ga/2 - e'a`` over ``{0 <= a <= C, y'a = 0}`` with an unnormalized Gaussian kernel."""
    if not C > 0:
        raise ValueError("C must be positive")
    y = dataset.y_train
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")
    spec = KernelSpec.gaussian(sigma_sq)
    G = kernel_matrix(spec, dataset.x_train, dataset.x_train) * np.outer(y, y)
    G = 0.5 * (G + G.T)
    N = y.shape[0]
    lf = estimate_lipschitz(G)
    inst = QCQPInstance(G, -np.ones(N), np.zeros((0, N, N)), np.zeros((0, N)), np.zeros(0),
                        HyperplaneOrthant(y, float(C), 0))
    obj = QuadraticObjective(G, -np.ones(N), lipschitz_grad=lf)
    cons = QuadraticConstraints(inst.constraint_Q, inst.constraint_q, inst.constraint_b, np.zeros(0))
    return ConstrainedProblem(obj, cons, inst.simple_set, N, qcqp=inst), spec


def svm_bias(G_alpha_y, alpha, y, C, tol=FREE_TOL):
    """Bias from the KKT conditions given ``f_j = sum_i y_i alpha_i K_ij``.

    Averages ``y_j - f_j`` over margin vectors; without any, takes the midpoint of
    the interval the bound constraints allow.
    """
    f = G_alpha_y
    r = y - f
    free = (alpha > tol * C) & (alpha < C * (1.0 - tol))
    if np.any(free):
        return float(np.mean(r[free]))
    low = (alpha <= tol * C)
    lower = np.concatenate([r[low & (y > 0)], r[~low & (y < 0)]])
    upper = np.concatenate([r[low & (y < 0)], r[~low & (y > 0)]])
    lo = lower.max() if lower.size else -np.inf
    hi = upper.min() if upper.size else np.inf
    if np.isfinite(lo) and np.isfinite(hi):
        return 0.5 * (lo + hi)
    return float(lo if np.isfinite(lo) else hi)


def single_kernel_qp(dataset: Dataset, sigma_sq=1.0, C=0.1, max_iters=20000, step_tol=1e-16):
    """Projected gradient with constant step ``1/L`` (no functional constraints)."""
    prob, spec = single_kernel_problem(dataset, sigma_sq, C)
    lf = prob.objective.lipschitz_grad
    config = SolverConfig(StepsizeSchedule.constant(1.0 / lf), beta=0.96, max_iters=max_iters,
                          stopping=StoppingRule(use_optimality=False, movement_tol=step_tol),
                          averaging="none", record_feasibility=False)
    trace = run(prob, config, np.zeros(prob.dim))
    alpha = trace.x_final
    y = dataset.y_train
    Kmat = kernel_matrix(spec, dataset.x_train, dataset.x_train)
    b = svm_bias(Kmat @ (y * alpha), alpha, y, C)
    clf = TrainedClassifier(alpha.copy(), b, {0: 1.0}, [spec], np.ones(1), dataset.x_train.copy(), y.copy())
    return SingleKernelResult(clf, trace, alpha)
