"""SMBA main loop, stepsize schedules, averaging, stopping and rate fitting.

A run over a QCQP-backed problem with a kernel-encodable simple set goes
through :func:`smba.kernels.run_chunk`; anything else uses the generic
oracle loop built on :mod:`smba.ball`. Both consume the same index stream
and produce the same records.

Record ``k`` describes iteration ``k`` *after* the update: ``f`` and
``feas_sq`` are evaluated at ``x_{k+1}`` and ``step_sq = |x_{k+1} - x_k|^2``,
so the last record of a stopped run certifies the rule that fired.
"""
import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import kernels as K
from .ball import DegenerateConstraintError, FeasibilityCase, build_ball, feasibility_step
from .problem import ConstrainedProblem

CHUNK = 1000
CASE_NAMES = {K.CASE_FEASIBLE: "feasible", K.CASE_NONEMPTY: "nonempty", K.CASE_EMPTY: "empty"}
STOP_NAMES = {K.STOP_FEAS_OPT: "feas+opt", K.STOP_MOVEMENT: "movement", K.STOP_NONE: "max_iters"}


@dataclass(frozen=True)
class StepsizeSchedule:
    """``sqrt-log``: a0/(sqrt(k+2) ln(k+2)); ``inv-sqrt``: a0/sqrt(k+1);
    ``strongly-convex``: 2/(mu (k+1)); ``constant``: a0."""

    variant: str
    param: float

    _KINDS = {
        "sqrt-log": K.SCHED_SQRTLOG,
        "inv-sqrt": K.SCHED_INVSQRT,
        "strongly-convex": K.SCHED_STRONG,
        "constant": K.SCHED_CONSTANT,
    }

    def __post_init__(self):
        if self.variant not in self._KINDS:
            raise ValueError(f"unknown schedule {self.variant!r}")
        if not self.param > 0:
            raise ValueError(f"schedule parameter must be positive, got {self.param}")

    @classmethod
    def sqrt_log(cls, alpha0):
        return cls("sqrt-log", float(alpha0))

    @classmethod
    def inv_sqrt(cls, alpha0):
        return cls("inv-sqrt", float(alpha0))

    @classmethod
    def strongly_convex(cls, mu):
        return cls("strongly-convex", float(mu))

    @classmethod
    def constant(cls, alpha):
        return cls("constant", float(alpha))

    @property
    def kind(self):
        return self._KINDS[self.variant]

    def value(self, k):
        return float(K.step_size(k, self.kind, self.param))


@dataclass(frozen=True)
class StoppingRule:
    feas_tol: float = 1e-2
    opt_tol: float = 1e-2
    movement_window: int = 10
    movement_tol: float = 1e-3
    use_optimality: bool = True
    use_movement: bool = True

    def __post_init__(self):
        if not (self.feas_tol > 0 and self.opt_tol > 0 and self.movement_tol > 0):
            raise ValueError("stopping tolerances must be positive")
        if self.movement_window < 1:
            raise ValueError("movement window must be >= 1")


AVERAGING = {"none": K.AVG_NONE, "convex": K.AVG_CONVEX, "strongly-convex": K.AVG_STRONG}


@dataclass(frozen=True)
class SolverConfig:
    schedule: StepsizeSchedule
    beta: float = 0.96
    probabilities: Optional[tuple] = None  # None = uniform over constraints
    seed: int = 0
    max_iters: int = 10_000
    stopping: Optional[StoppingRule] = field(default_factory=StoppingRule)
    averaging: str = "convex"
    record_feasibility: bool = True
    n_checkpoints: int = 200
    store_iterates: bool = False

    def __post_init__(self):
        if not 0 < self.beta < 2:
            raise ValueError(f"beta must lie in (0, 2), got {self.beta}")
        if self.averaging not in AVERAGING:
            raise ValueError(f"unknown averaging {self.averaging!r}")
        if self.averaging == "strongly-convex" and self.schedule.variant != "strongly-convex":
            raise ValueError("strongly-convex averaging requires the strongly-convex schedule")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.probabilities is not None:
            p = np.asarray(self.probabilities, dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError("sampling probabilities must be nonnegative and sum to 1")


class AverageAccumulator:
    """Running weighted average of iterates: weights ``alpha_t`` or ``(t+1)^2``."""

    def __init__(self, mode, dim):
        if mode not in AVERAGING:
            raise ValueError(f"unknown averaging {mode!r}")
        self.mode = mode
        self.total = np.zeros(dim)
        self.weight = 0.0

    def add(self, x, t, alpha):
        if self.mode == "convex":
            w = alpha
        elif self.mode == "strongly-convex":
            w = (t + 1.0) ** 2
        else:
            return
        self.total += w * x
        self.weight += w

    def value(self):
        """Current average, or None before the first weighted iterate (or with mode ``none``)."""
        if self.weight == 0.0:
            return None
        return self.total / self.weight


@dataclass
class RunTrace:
    f: np.ndarray
    feas_sq: np.ndarray
    step_sq: np.ndarray
    case: np.ndarray
    index: np.ndarray
    x_final: np.ndarray
    x_avg: np.ndarray
    iterations: int
    stop_reason: str
    wall_time: float
    checkpoints: np.ndarray  # iteration counts k at which x_avg was snapshotted
    avg_iterates: np.ndarray  # (len(checkpoints), n)
    avg_f: np.ndarray
    avg_feas_sq: np.ndarray
    iterates: Optional[np.ndarray] = None  # x_0..x_K when config.store_iterates
    seed: int = 0

    @property
    def k(self):
        return np.arange(self.iterations)

    def case_counts(self):
        return {name: int(np.sum(self.case == code)) for code, name in CASE_NAMES.items()}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            write_trace_rows(fh, 0, self.f, self.feas_sq, self.step_sq, self.case, header=True)

    def to_avg_csv(self, path):
        n = self.avg_iterates.shape[1] if self.avg_iterates.ndim == 2 else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "f", "feas_sq"] + [f"x_{j}" for j in range(n)])
            for k, f, fs, xa in zip(self.checkpoints, self.avg_f, self.avg_feas_sq, self.avg_iterates):
                w.writerow([int(k), repr(float(f)), repr(float(fs))] + [repr(float(v)) for v in xa])


def write_trace_rows(fh, k0, f, feas, step, case, header=False):
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(["k", "f", "feas_sq", "step_sq", "case"])
    for j in range(len(f)):
        w.writerow([k0 + j, repr(float(f[j])), repr(float(feas[j])), repr(float(step[j])),
                    CASE_NAMES.get(int(case[j]), str(int(case[j])))])


class _IndexStream:
    """Constraint indices drawn in fixed blocks so trajectories do not depend on chunking."""

    BLOCK = 4096

    def __init__(self, m, probabilities, seed):
        self.m = m
        self.p = None if probabilities is None else np.asarray(probabilities, dtype=float)
        self.rng = np.random.default_rng(seed)
        self.buf = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def _refill(self):
        if self.p is None:
            block = self.rng.integers(0, self.m, size=self.BLOCK)
        else:
            block = self.rng.choice(self.m, size=self.BLOCK, p=self.p)
        self.buf = np.concatenate((self.buf[self.pos:], block.astype(np.int64)))
        self.pos = 0

    def take(self, n):
        if self.m == 0:
            return np.full(n, -1, dtype=np.int64)
        while len(self.buf) - self.pos < n:
            self._refill()
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def checkpoint_grid(max_iters, n_points):
    if max_iters <= 0:
        return np.zeros(0, dtype=np.int64)
    geo = np.geomspace(1, max_iters, num=max(n_points, 2))
    lin = np.linspace(1, max_iters, num=max(n_points // 2, 2))
    return np.unique(np.concatenate((np.round(geo), np.round(lin))).astype(np.int64))


# ---------------------------------------------------------------- single steps

def _generic_step(x, k, problem: ConstrainedProblem, config: SolverConfig, index):
    """One iteration through the oracle interfaces. ``index=None`` selects the most violated constraint."""
    alpha = config.schedule.value(k)
    Y = problem.simple_set
    v = Y.project(x - alpha * problem.objective.subgradient(x))
    cons = problem.constraints
    case = FeasibilityCase.ALREADY_FEASIBLE
    z = v
    if cons.count > 0:
        if index is None:
            hv_all = cons.values(v)
            index = int(np.argmax(hv_all))
            hv = float(hv_all[index])
        else:
            hv = cons.value(index, v)
        if hv > 0.0:
            g = cons.gradient(index, v)
            ball = build_ball(v, hv, g, cons.lipschitz(index))
            z, case = feasibility_step(v, ball, g, config.beta, index=index)
    x_next = Y.project(z)
    return x_next, {"k": k, "alpha": alpha, "v": v, "index": -1 if index is None else index,
                    "case": case, "step_sq": float(np.sum((x_next - x) ** 2))}


def smba_iterate(x, k, problem, config, rng=None, index=None):
    """One SMBA iteration from ``x`` at counter ``k``; returns ``(x_next, record)``.

    The constraint is ``index`` when given, else drawn from ``rng`` according to
    ``config.probabilities`` (uniform by default).
    """
    m = problem.constraints.count
    if index is None and m > 0:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        if config.probabilities is None:
            index = int(rng.integers(0, m))
        else:
            index = int(rng.choice(m, p=np.asarray(config.probabilities)))
    return _generic_step(np.asarray(x, dtype=float), k, problem, config, index if m > 0 else -1)


def deterministic_max_violation_step(x, k, problem, config):
    """Baseline step: identical to SMBA but always uses the most violated constraint.

    This is a deterministic stand-in, not the moving-balls method with a full subproblem.
    """
    x_next, _ = _generic_step(np.asarray(x, dtype=float), k, problem, config, None)
    return x_next


# ---------------------------------------------------------------- full runs

def _validate(problem, config, x0):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != problem.dim:
        raise ValueError(f"x0 has dimension {x0.shape[0]}, problem has {problem.dim}")
    if config.probabilities is not None and len(config.probabilities) != problem.constraints.count:
        raise ValueError("sampling probabilities do not match the number of constraints")
    return x0


class _Collector:
    def __init__(self, problem, config, checkpoints, on_chunk):
        self.problem = problem
        self.config = config
        self.f, self.feas, self.step, self.case, self.index = [], [], [], [], []
        self.cp_k, self.cp_x, self.cp_f, self.cp_feas = [], [], [], []
        self.checkpoints = checkpoints
        self.on_chunk = on_chunk

    def add(self, k0, f, feas, step, case, index):
        f, feas, step, case, index = (np.array(a) for a in (f, feas, step, case, index))
        self.f.append(f)
        self.feas.append(feas)
        self.step.append(step)
        self.case.append(case)
        self.index.append(index)
        if self.on_chunk is not None:
            self.on_chunk(k0, f, feas, step, case)

    def snapshot(self, k, x_avg):
        if self.cp_k and self.cp_k[-1] == k:
            return
        self.cp_k.append(k)
        self.cp_x.append(np.array(x_avg))
        self.cp_f.append(self.problem.objective.value(x_avg))
        self.cp_feas.append(self.problem.feasibility_sq(x_avg))

    def finish(self, x, x_avg, iters, reason, wall, iterates, seed):
        cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dtype=dt)
        n = x.shape[0]
        return RunTrace(
            f=cat(self.f, float), feas_sq=cat(self.feas, float), step_sq=cat(self.step, float),
            case=cat(self.case, np.int8), index=cat(self.index, np.int64),
            x_final=x, x_avg=x_avg, iterations=iters, stop_reason=reason, wall_time=wall,
            checkpoints=np.array(self.cp_k, dtype=np.int64),
            avg_iterates=np.array(self.cp_x).reshape(-1, n),
            avg_f=np.array(self.cp_f, dtype=float), avg_feas_sq=np.array(self.cp_feas, dtype=float),
            iterates=None if iterates is None else np.array(iterates), seed=seed,
        )


def run(problem: ConstrainedProblem, config: SolverConfig, x0, method="smba", engine="auto",
        on_chunk: Optional[Callable] = None) -> RunTrace:
    """Run SMBA (or the ``max-violation`` baseline) from ``x0`` until a stopping rule fires.

    ``engine`` is ``auto``, ``compiled`` or ``generic``. ``on_chunk(k0, f, feas, step, case)``
    receives records in blocks of at most 1000 iterations as they are produced.
    """
    if method not in ("smba", "max-violation"):
        raise ValueError(f"unknown method {method!r}")
    x0 = _validate(problem, config, x0)
    spec = problem.simple_set.kernel_spec() if problem.qcqp is not None else None
    if engine == "compiled" and spec is None:
        raise ValueError("compiled engine needs a QCQP problem with a kernel-encodable simple set")
    use_kernel = spec is not None and engine != "generic"
    t0 = time.perf_counter()
    x = problem.simple_set.project(x0)
    cps = checkpoint_grid(config.max_iters, config.n_checkpoints)
    col = _Collector(problem, config, cps, on_chunk)
    if use_kernel:
        x, x_avg, iters, code, iterates = _run_compiled(problem, config, x, method, spec, col)
    else:
        x, x_avg, iters, code, iterates = _run_generic(problem, config, x, method, col)
    if iters > 0:
        col.snapshot(iters, x_avg)
    return col.finish(x, x_avg, iters, STOP_NAMES[code], time.perf_counter() - t0, iterates, config.seed)


def _stop_flags(problem, config):
    st = config.stopping
    ref = problem.reference_optimum
    stop_opt = st is not None and st.use_optimality and ref is not None
    stop_move = st is not None and st.use_movement
    fstar = ref.value if ref is not None else 0.0
    return st or StoppingRule(), stop_opt, stop_move, fstar


def _run_compiled(problem, config, x, method, spec, col):
    inst = problem.qcqp
    Qf, qf = inst.Q_f, inst.q_f
    Qs, qs, bs = inst.constraint_Q, inst.constraint_q, inst.constraint_b
    Ls = np.ascontiguousarray(problem.constraints.L, dtype=float)
    m, n = inst.m, inst.n
    set_kind, set_lo, set_hi, set_labels, set_ub, set_nhead = spec
    st, stop_opt, stop_move, fstar = _stop_flags(problem, config)
    greedy = method == "max-violation"

    x = np.ascontiguousarray(x, dtype=float)
    qfx = Qf @ x
    avg_kind = AVERAGING[config.averaging]
    avg_sum = np.zeros(n)
    avg_w = np.zeros(1)
    anc = np.zeros((m, n))
    anc_g = np.zeros((m, n))
    anc_h = np.zeros(m)
    anc_s = np.zeros(m)
    K.init_anchors(Qs, qs, bs, x, anc, anc_g, anc_h, anc_s)
    ring = np.full(st.movement_window, np.inf)
    ring_state = np.zeros(2, dtype=np.int64)
    stream = _IndexStream(m, config.probabilities, config.seed)
    iterates = [x.copy()] if config.store_iterates else None
    chunk = 1 if config.store_iterates else CHUNK

    buf_f = np.empty(chunk)
    buf_feas = np.empty(chunk)
    buf_step = np.empty(chunk)
    buf_case = np.empty(chunk, dtype=np.int64)
    buf_idx = np.empty(chunk, dtype=np.int64)

    def current_avg():
        if avg_kind == K.AVG_NONE or avg_w[0] == 0.0:
            return x.copy()
        return avg_sum / avg_w[0]

    k = 0
    code = K.STOP_NONE
    cp_iter = iter(col.checkpoints)
    next_cp = next(cp_iter, None)
    while k < config.max_iters:
        n_steps = min(chunk, config.max_iters - k)
        if next_cp is not None:
            n_steps = min(n_steps, next_cp - k)
        idx = stream.take(n_steps) if not greedy else np.zeros(n_steps, dtype=np.int64)
        done, code, bad = K.run_chunk(
            x, qfx, k, n_steps, idx, greedy,
            Qf, qf, Qs, qs, bs, Ls, float(config.beta),
            config.schedule.kind, float(config.schedule.param),
            set_kind, set_lo, set_hi, set_labels, float(set_ub), int(set_nhead),
            avg_kind, avg_sum, avg_w,
            anc, anc_g, anc_h, anc_s,
            stop_opt, float(fstar), float(st.opt_tol), float(st.feas_tol),
            stop_move, ring, ring_state, float(st.movement_tol),
            bool(config.record_feasibility), buf_f, buf_feas, buf_step, buf_case, buf_idx,
        )
        if code == K.STOP_DEGENERATE:
            raise DegenerateConstraintError(int(bad))
        col.add(k, buf_f[:done], buf_feas[:done], buf_step[:done], buf_case[:done], buf_idx[:done])
        k += done
        if iterates is not None:
            iterates.append(x.copy())
        if next_cp is not None and k == next_cp:
            col.snapshot(k, current_avg())
            next_cp = next(cp_iter, None)
        if code != K.STOP_NONE:
            break
    return x, current_avg(), k, code, iterates


def _run_generic(problem, config, x, method, col):
    st, stop_opt, stop_move, fstar = _stop_flags(problem, config)
    m = problem.constraints.count
    greedy = method == "max-violation"
    acc = AverageAccumulator(config.averaging, problem.dim)
    stream = _IndexStream(m, config.probabilities, config.seed)
    ring = np.full(st.movement_window, np.inf)
    filled = 0
    iterates = [x.copy()] if config.store_iterates else None
    code = K.STOP_NONE
    rows = ([], [], [], [], [])
    k0 = 0
    k = 0
    cp = set(int(c) for c in col.checkpoints)
    while k < config.max_iters:
        acc.add(x, k, config.schedule.value(k))
        index = None if greedy else (int(stream.take(1)[0]) if m > 0 else -1)
        x, rec = _generic_step(x, k, problem, config, index)
        f = problem.objective.value(x)
        feas = problem.feasibility_sq(x) if config.record_feasibility else math.nan
        code = K.STOP_NONE
        if stop_opt and abs(f - fstar) <= st.opt_tol:
            if math.isnan(feas):
                feas = problem.feasibility_sq(x)
            if feas <= st.feas_tol:
                code = K.STOP_FEAS_OPT
        if stop_move:
            ring[k % st.movement_window] = rec["step_sq"]
            filled = min(filled + 1, st.movement_window)
            if code == K.STOP_NONE and filled >= st.movement_window and ring.max() <= st.movement_tol:
                code = K.STOP_MOVEMENT
        for lst, val in zip(rows, (f, feas, rec["step_sq"], rec["case"].value, rec["index"])):
            lst.append(val)
        k += 1
        if iterates is not None:
            iterates.append(x.copy())
        if k in cp:
            avg = acc.value()
            col.snapshot(k, x if avg is None else avg)
        if len(rows[0]) == CHUNK or code != K.STOP_NONE:
            col.add(k0, *rows)
            rows = ([], [], [], [], [])
            k0 = k
        if code != K.STOP_NONE:
            break
    if rows[0]:
        col.add(k0, *rows)
    x_avg = acc.value()
    return x, x.copy() if x_avg is None else x_avg, k, code, iterates


@dataclass
class RepeatedSummary:
    traces: List[RunTrace]
    mean_time: float
    std_time: float
    mean_iters: float
    std_iters: float
    stop_reasons: List[str]

    def deterministic_dict(self):
        """Summary fields that do not depend on wall-clock timing."""
        return {
            "repetitions": len(self.traces),
            "seeds": [t.seed for t in self.traces],
            "mean_iters": self.mean_iters,
            "std_iters": self.std_iters,
            "iterations": [t.iterations for t in self.traces],
            "stop_reasons": self.stop_reasons,
            "final_f": [float(t.f[-1]) if t.iterations else None for t in self.traces],
            "final_feas_sq": [float(t.feas_sq[-1]) if t.iterations else None for t in self.traces],
        }

    def timing_dict(self):
        return {"mean_time": self.mean_time, "std_time": self.std_time,
                "times": [t.wall_time for t in self.traces]}


def _sample_std(values):
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def run_repeated(problem, config, x0, repetitions, method="smba", threads=None, engine="auto",
                 chunk_callback: Optional[Callable] = None):
    """Repeat :func:`run` with seeds ``seed, seed+1, ...``; ``SMBA_THREADS`` caps parallelism.

    ``chunk_callback(r)``, if given, returns the ``on_chunk`` hook for repetition ``r``.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if threads is None:
        threads = int(os.environ.get("SMBA_THREADS", "1") or 1)
    configs = [replace(config, seed=config.seed + r) for r in range(repetitions)]

    def job(r):
        hook = chunk_callback(r) if chunk_callback is not None else None
        return run(problem, configs[r], x0, method=method, engine=engine, on_chunk=hook)

    if threads > 1 and repetitions > 1:
        with ThreadPoolExecutor(max_workers=min(threads, repetitions)) as pool:
            traces = list(pool.map(job, range(repetitions)))
    else:
        traces = [job(r) for r in range(repetitions)]
    times = [t.wall_time for t in traces]
    iters = [t.iterations for t in traces]
    return RepeatedSummary(traces, float(np.mean(times)), _sample_std(times),
                           float(np.mean(iters)), _sample_std(iters), [t.stop_reason for t in traces])


# ---------------------------------------------------------------- rate fits

def fit_loglog_slope(ks, values, window=0.8, floor=1e-16, min_points=10):
    """Least-squares slope of ``log(value)`` against ``log(k)`` over the trailing ``window`` of ``k``."""
    if not 0 < window <= 1:
        raise ValueError("window must lie in (0, 1]")
    ks = np.asarray(ks, dtype=float)
    vals = np.asarray(values, dtype=float)
    keep = (ks > 0) & np.isfinite(vals)
    ks, vals = ks[keep], vals[keep]
    if ks.size == 0:
        raise ValueError("no points to fit")
    sel = ks >= (1.0 - window) * ks.max()
    if sel.sum() < min_points:
        raise ValueError(f"only {int(sel.sum())} points in the fit window, need {min_points}")
    lk = np.log(ks[sel])
    lv = np.log(np.maximum(vals[sel], floor))
    slope, _ = np.polyfit(lk, lv, 1)
    return float(slope)


def rate_metric(trace: RunTrace, metric, reference=None):
    """Metric at the averaged iterate for every checkpoint: ``opt_gap``, ``feas_sq`` or ``dist_sq``."""
    if metric == "opt_gap":
        if reference is None:
            raise ValueError("opt_gap needs a reference optimal value")
        return np.abs(trace.avg_f - float(reference))
    if metric == "feas_sq":
        return trace.avg_feas_sq
    if metric == "dist_sq":
        if reference is None:
            raise ValueError("dist_sq needs a reference point")
        ref = np.asarray(reference, dtype=float)
        return np.sum((trace.avg_iterates - ref) ** 2, axis=1)
    raise ValueError(f"unknown metric {metric!r}")


def fit_rate_slope(trace: RunTrace, metric, window=0.8, reference=None):
    return fit_loglog_slope(trace.checkpoints, rate_metric(trace, metric, reference), window)
