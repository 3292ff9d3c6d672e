"""Command-line front end: ``generate``, ``solve``, ``reference``, ``rates`` and ``svm``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""
import argparse
import csv
import json
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .ball import DegenerateConstraintError
from .generate import B_SCHEMES, REGIMES, GenSpec, gen_instance, write_instance
from .problem import QCQPInstance, ReferenceOptimum, qcqp_as_problem
from .sets import WholeSpace
from .solver import (SolverConfig, StepsizeSchedule, StoppingRule, fit_loglog_slope, rate_metric, run,
                     run_repeated, write_trace_rows)

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2

DEFAULT_BANDS = {
    "opt_gap": [-0.75, -0.30],
    "feas_sq": [None, -0.30],
    "dist_sq": [-1.6, -0.7],
}

_NUM = {"type": "number"}
_BAND = {"type": "array", "items": {"type": ["number", "null"]}, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["instance", "solver", "output"],
    "properties": {
        "instance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "sidecar": {"type": "string"},
                "builtin": {"enum": ["analytic-1d"]},
                "generate": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["n", "m"],
                    "properties": {
                        "n": {"type": "integer", "minimum": 1},
                        "m": {"type": "integer", "minimum": 1},
                        "regime": {"enum": list(REGIMES)},
                        "b_scheme": {"enum": list(B_SCHEMES)},
                        "seed": {"type": "integer"},
                        "zero_fraction": _NUM,
                        "q_f_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                    },
                },
                "x0": {"type": "array", "items": _NUM},
            },
            "oneOf": [{"required": ["path"]}, {"required": ["builtin"]}, {"required": ["generate"]}],
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "required": ["schedule"],
            "properties": {
                "method": {"enum": ["smba", "max-violation"]},
                "engine": {"enum": ["auto", "compiled", "generic"]},
                "beta": _NUM,
                "schedule": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["variant"],
                    "properties": {
                        "variant": {"enum": ["sqrt-log", "inv-sqrt", "strongly-convex", "constant"]},
                        "param": {"oneOf": [_NUM, {"const": "auto"}]},
                    },
                },
                "seed": {"type": "integer", "minimum": 0},
                "max_iters": {"type": "integer", "minimum": 0},
                "averaging": {"enum": ["none", "convex", "strongly-convex"]},
                "probabilities": {"type": "array", "items": _NUM},
                "record_feasibility": {"type": "boolean"},
                "stopping": {
                    "oneOf": [
                        {"type": "null"},
                        {
                            "type": "object",
                            "additionalProperties": False,
                            "properties": {
                                "feas_tol": _NUM, "opt_tol": _NUM, "movement_tol": _NUM,
                                "movement_window": {"type": "integer", "minimum": 1},
                                "use_optimality": {"type": "boolean"},
                                "use_movement": {"type": "boolean"},
                            },
                        },
                    ]
                },
            },
        },
        "reference": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "f_star": _NUM,
                "x_star": {"type": "array", "items": _NUM},
                "file": {"type": "string"},
                "long_run_iters": {"type": "integer", "minimum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dir"],
            "properties": {"dir": {"type": "string"}, "average_csv": {"type": "boolean"},
                           "timing": {"type": "boolean"}},
        },
        "repetitions": {"type": "integer", "minimum": 1},
        "rates": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "metrics": {"type": "array", "items": {"enum": list(DEFAULT_BANDS)}},
                "window": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "bands": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: _BAND for k in DEFAULT_BANDS},
                },
            },
        },
    },
}


class UsageError(Exception):
    pass


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _float_list(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


# ---------------------------------------------------------------- instances

def analytic_1d():
    """``f(x) = x^2 - 4x`` (``(x-2)^2`` up to a constant), ``h(x) = (x^2 - 1)/2``; ``x* = 1``, ``f* = -3``."""
    inst = QCQPInstance(np.array([[2.0]]), np.array([-4.0]), np.array([[[1.0]]]), np.array([[0.0]]),
                        np.array([0.5]), WholeSpace())
    return inst, np.zeros(1), ReferenceOptimum(-3.0, "analytic", np.array([1.0]))


def _sidecar_path(instance_path):
    p = Path(instance_path)
    return p.with_name(p.stem + ".sidecar.json")


def load_instance(section, base_dir):
    """Return ``(instance, x0, analytic_reference_or_None)`` for the config's instance section."""
    ref = None
    if "builtin" in section:
        inst, x0, ref = analytic_1d()
    elif "generate" in section:
        g = section["generate"]
        lo, hi = g.get("q_f_range", [GenSpec.q_f_low, GenSpec.q_f_high])
        spec = GenSpec(g["n"], g["m"], g.get("regime", "convex"), g.get("b_scheme", "feasible-x0"),
                       g.get("seed", 0), g.get("zero_fraction", 0.1), lo, hi)
        inst, x0, _ = gen_instance(spec)
    else:
        path = base_dir / section["path"]
        inst = QCQPInstance.load(path)
        side = base_dir / section["sidecar"] if "sidecar" in section else _sidecar_path(path)
        if side.exists():
            with open(side) as fh:
                x0 = np.array(json.load(fh)["x0"], dtype=float)
        else:
            x0 = np.zeros(inst.n)
    if "x0" in section:
        x0 = np.array(section["x0"], dtype=float)
    if x0.shape != (inst.n,):
        raise UsageError(f"x0 has length {x0.size}, instance has n = {inst.n}")
    return inst, x0, ref


def long_run_reference(problem, x0, iters, seed=0):
    """Deterministic max-violation run with sqrt-log steps; its last iterate serves as the reference."""
    lf = problem.objective.lipschitz_grad or 1.0
    cfg = SolverConfig(StepsizeSchedule.sqrt_log(1.0 / lf), beta=0.96, seed=seed, max_iters=iters,
                       stopping=None, averaging="none", record_feasibility=False, n_checkpoints=2)
    tr = run(problem, cfg, x0, method="max-violation")
    x = tr.x_final
    return ReferenceOptimum(problem.objective.value(x), "long-run baseline", x), tr


def _read_reference_file(path):
    with open(path) as fh:
        d = json.load(fh)
    x = d.get("x_star")
    return ReferenceOptimum(float(d["f_star"]), d.get("provenance", "external"),
                            None if x is None else np.array(x, dtype=float))


def _build_config(sec, problem):
    sched = sec["schedule"]
    variant = sched["variant"]
    param = sched.get("param", "auto")
    if param == "auto":
        if variant == "strongly-convex":
            param = problem.objective.strong_convexity_mu
            if not param > 0:
                raise UsageError("strongly-convex schedule needs mu > 0; the objective has mu = 0")
        else:
            param = 1.0 / (problem.objective.lipschitz_grad or 1.0)
    stopping = sec.get("stopping", {})
    stop = None if stopping is None else StoppingRule(**stopping)
    probs = sec.get("probabilities")
    averaging = sec.get("averaging", "strongly-convex" if variant == "strongly-convex" else "convex")
    return SolverConfig(
        StepsizeSchedule(variant, float(param)),
        beta=float(sec.get("beta", 0.96)),
        probabilities=None if probs is None else tuple(probs),
        seed=int(sec.get("seed", 0)),
        max_iters=int(sec.get("max_iters", 10000)),
        stopping=stop,
        averaging=averaging,
        record_feasibility=bool(sec.get("record_feasibility", True)),
    )


# ---------------------------------------------------------------- rates

def _band_ok(slope, band):
    lo, hi = band
    return (lo is None or slope >= lo) and (hi is None or slope <= hi)


def _band_text(band):
    lo, hi = band
    return f"[{'-inf' if lo is None else lo}, {'inf' if hi is None else hi}]"


def read_average_csv(path):
    """Read ``k, f, feas_sq, x_0..`` rows written for the averaged iterate."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: empty trace")
    header = rows[0]
    if header[:3] != ["k", "f", "feas_sq"]:
        raise ValueError(f"{path}: expected columns k,f,feas_sq,...")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return data[:, 0], data[:, 1], data[:, 2], data[:, 3:]


def metric_values(metric, f, feas, xs, reference):
    if metric == "opt_gap":
        if reference is None or reference.value is None:
            raise UsageError("opt_gap needs a reference value (--reference or --reference-file)")
        return np.abs(f - reference.value)
    if metric == "feas_sq":
        return feas
    if reference is None or reference.x is None:
        raise UsageError("dist_sq needs a reference point (--reference-file with x_star)")
    if xs.shape[1] != reference.x.size:
        raise UsageError("reference point dimension does not match the trace")
    return np.sum((xs - reference.x) ** 2, axis=1)


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    lo, hi = args.q_f_range
    spec = GenSpec(args.n, args.m, args.regime, args.b_scheme, args.seed, args.zero_fraction, lo, hi)
    inst, x0, feasible = gen_instance(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    side = _sidecar_path(out)
    write_instance(spec, inst, x0, feasible, out, side)
    lam_min = float(np.linalg.eigvalsh(inst.Q_f)[0])
    print(f"wrote {out} and {side}")
    print(f"n = {inst.n}  m = {inst.m}  lambda_min(Q_f) = {lam_min:.6g}  x0_feasible = {str(feasible).lower()}")
    return EXIT_OK


def cmd_reference(args):
    if args.builtin:
        inst, x0, _ = analytic_1d()
    else:
        path = Path(args.instance)
        inst = QCQPInstance.load(path)
        side = _sidecar_path(path)
        x0 = np.array(json.load(open(side))["x0"]) if side.exists() else np.zeros(inst.n)
    problem = qcqp_as_problem(inst)
    ref, tr = long_run_reference(problem, x0, args.iters)
    out = {"f_star": ref.value, "x_star": _float_list(ref.x), "provenance": ref.provenance,
           "iterations": tr.iterations, "feas_sq": inst.feasibility_sq(ref.x)}
    _dump(out, args.out)
    print(f"f* = {ref.value!r} after {tr.iterations} max-violation iterations, feas_sq = {out['feas_sq']:.3g}")
    return EXIT_OK


def cmd_solve(args):
    cfg_path = Path(args.config)
    try:
        with open(cfg_path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config: {exc}")
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config schema error at {where}: {exc.message}")
    base = cfg_path.parent
    try:
        inst, x0, ref = load_instance(doc["instance"], base)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load instance: {exc}")
    problem = qcqp_as_problem(inst)

    rsec = doc.get("reference", {})
    if "f_star" in rsec:
        x = rsec.get("x_star")
        ref = ReferenceOptimum(float(rsec["f_star"]), "external", None if x is None else np.array(x, dtype=float))
    elif "file" in rsec:
        ref = _read_reference_file(base / rsec["file"])
    elif "long_run_iters" in rsec:
        ref, _ = long_run_reference(problem, x0, rsec["long_run_iters"])
    problem.reference_optimum = ref

    try:
        config = _build_config(doc["solver"], problem)
    except ValueError as exc:
        raise UsageError(str(exc))
    method = doc["solver"].get("method", "smba")
    engine = doc["solver"].get("engine", "auto")
    reps = int(doc.get("repetitions", 1))
    out = base / doc["output"]["dir"]
    out.mkdir(parents=True, exist_ok=True)

    handles = {}

    def chunk_callback(r):
        fh = open(out / f"trace_rep{r}.csv", "w", newline="")
        handles[r] = fh
        fh.write("k,f,feas_sq,step_sq,case\n")

        def hook(k0, f, feas, step, case):
            write_trace_rows(fh, k0, f, feas, step, case)
            fh.flush()
        return hook

    try:
        summary = run_repeated(problem, config, x0, reps, method=method, engine=engine,
                               chunk_callback=chunk_callback)
    finally:
        for fh in handles.values():
            fh.close()

    if doc["output"].get("average_csv", True):
        for r, tr in enumerate(summary.traces):
            tr.to_avg_csv(out / f"average_rep{r}.csv")
    det = summary.deterministic_dict()
    det["method"] = method
    det["reference"] = None if ref is None else {"f_star": ref.value, "provenance": ref.provenance}
    det["final_x_avg"] = [_float_list(t.x_avg) for t in summary.traces]
    det["case_counts"] = [t.case_counts() for t in summary.traces]
    _dump(det, out / "summary.json")
    if doc["output"].get("timing", False):
        _dump(summary.timing_dict(), out / "timing.json")
    print(f"{reps} repetition(s): stop reasons {summary.stop_reasons}, mean iterations {summary.mean_iters:g}, "
          f"mean time {summary.mean_time:.3g}s (std {summary.std_time:.3g}s)")

    if "rates" in doc:
        report = _solve_rates(doc["rates"], summary.traces, ref)
        _dump(report, out / "rates.json")
    return EXIT_OK


def _solve_rates(sec, traces, ref):
    window = sec.get("window", 0.8)
    bands = dict(DEFAULT_BANDS)
    bands.update(sec.get("bands", {}))
    report = {}
    for metric in sec.get("metrics", ["opt_gap", "feas_sq"]):
        if metric == "opt_gap" and ref is None or metric == "dist_sq" and (ref is None or ref.x is None):
            raise UsageError(f"rate metric {metric} needs a reference")
        refv = None if metric == "feas_sq" else (ref.value if metric == "opt_gap" else ref.x)
        slopes = [fit_loglog_slope(t.checkpoints, rate_metric(t, metric, refv), window) for t in traces]
        med = float(np.median(slopes))
        ok = _band_ok(med, bands[metric])
        report[metric] = {"slopes": slopes, "median": med, "band": bands[metric], "pass": ok}
        print(f"{metric}: median slope {med:.4f} band {_band_text(bands[metric])} {'PASS' if ok else 'FAIL'}")
    return report


def cmd_rates(args):
    ref = None
    if args.reference_file:
        ref = _read_reference_file(args.reference_file)
    if args.reference is not None:
        ref = ReferenceOptimum(args.reference, "external", None if ref is None else ref.x)
    band = list(args.band) if args.band else DEFAULT_BANDS[args.metric]
    slopes = []
    for path in args.traces:
        try:
            ks, f, feas, xs = read_average_csv(path)
        except OSError as exc:
            raise UsageError(str(exc))
        vals = metric_values(args.metric, f, feas, xs, ref)
        s = fit_loglog_slope(ks, vals, args.window)
        slopes.append(s)
        print(f"{path}: {args.metric} slope {s:.6f}")
    med = float(np.median(slopes))
    ok = _band_ok(med, band)
    print(f"median {args.metric} slope {med:.6f} band {_band_text(band)} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK


def cmd_svm(args):
    from . import mkl

    if args.synthetic is not None:
        ds = mkl.separable_blobs(args.synthetic, seed=args.data_seed, split_fraction=args.split)
        source = f"synthetic separable blobs, {args.synthetic} points"
    else:
        if not args.data or not args.label_column:
            raise UsageError("--data and --label-column are required unless --synthetic is given")
        try:
            ds = mkl.load_csv_dataset(args.data, args.label_column, args.split, args.data_seed)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot load data: {exc}")
        source = args.data
    kernels = mkl.gaussian_grid(args.m)
    mp = mkl.assemble_mkl_qcqp(ds, kernels, args.C)
    prob = mp.as_problem()
    config = mkl.default_mkl_config(prob, args.max_iters, args.seed, args.beta)
    t0 = time.perf_counter()
    res = mkl.train_mkl(ds, kernels, args.C, config=config, bias=args.bias)
    train_time = time.perf_counter() - t0
    tsa = mkl.predict_tsa(res.classifier, ds)
    active = res.dual.active_index
    report = {
        "data": source,
        "n_train": int(ds.train.size),
        "n_test": int(ds.test.size),
        "m": args.m,
        "C": args.C,
        "iterations": res.trace.iterations,
        "stop_reason": res.trace.stop_reason,
        "nonzero_lambda": {str(k): v for k, v in res.classifier.multipliers.items()},
        "active_index": active,
        "active_sigma_sq": kernels[active].param,
        "dual_degenerate": res.dual.degenerate,
        "bias": args.bias,
        "TSA": tsa,
    }
    timing = {"train_time": train_time}
    line = (f"MKL: {res.trace.iterations} iterations ({res.trace.stop_reason}), time {train_time:.3g}s, "
            f"sigma^2 = {kernels[active].param:.4g}, lambda = {res.dual.lambda_value:.4f}, TSA = {100 * tsa:.2f}%")
    if args.single_kernel:
        t0 = time.perf_counter()
        sk = mkl.single_kernel_qp(ds, args.sigma_sq, args.C)
        timing["single_kernel_time"] = time.perf_counter() - t0
        tsa2 = mkl.predict_tsa(sk.classifier, ds)
        report["TSA2"] = tsa2
        report["single_kernel_sigma_sq"] = args.sigma_sq
        line += f", TSA2 = {100 * tsa2:.2f}%"
    print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        res.classifier.save(out / "classifier.json")
        _dump(report, out / "report.json")
        if args.timing:
            _dump(timing, out / "timing.json")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="smba", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a random QCQP instance and its x0 sidecar")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--regime", choices=REGIMES, default="convex")
    g.add_argument("--b-scheme", choices=B_SCHEMES, default="feasible-x0")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--zero-fraction", type=float, default=0.1)
    g.add_argument("--q-f-range", type=float, nargs=2, metavar=("LOW", "HIGH"),
                   default=(GenSpec.q_f_low, GenSpec.q_f_high))
    g.add_argument("--out", required=True, help="instance JSON path; the sidecar goes next to it")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reference", help="long deterministic max-violation run giving f* and x*")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--instance")
    src.add_argument("--builtin", choices=["analytic-1d"])
    r.add_argument("--iters", type=int, default=1_000_000)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reference)

    s = sub.add_parser("solve", help="run a JSON-configured experiment")
    s.add_argument("config")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("rates", help="fit log-log slopes on averaged-iterate traces")
    t.add_argument("traces", nargs="+")
    t.add_argument("--metric", choices=list(DEFAULT_BANDS), default="opt_gap")
    t.add_argument("--reference", type=float, help="reference optimal value f*")
    t.add_argument("--reference-file", help="JSON with f_star and optionally x_star")
    t.add_argument("--band", type=float, nargs=2, metavar=("LOW", "HIGH"))
    t.add_argument("--window", type=float, default=0.8)
    t.set_defaults(func=cmd_rates)

    v = sub.add_parser("svm", help="multiple-kernel SVM trained with SMBA")
    v.add_argument("--data")
    v.add_argument("--label-column")
    v.add_argument("--synthetic", type=int, metavar="N", help="use N separable 2-D points instead of a CSV")
    v.add_argument("--data-seed", type=int, default=0, help="seed of the train/test split")
    v.add_argument("--split", type=float, default=0.8)
    v.add_argument("--m", type=int, default=10)
    v.add_argument("--C", type=float, default=0.1)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--beta", type=float, default=0.96)
    v.add_argument("--max-iters", type=int, default=100_000)
    v.add_argument("--bias", choices=["d", "kkt"], default="d")
    v.add_argument("--single-kernel", action="store_true", help="also train the single Gaussian kernel baseline")
    v.add_argument("--sigma-sq", type=float, default=1.0)
    v.add_argument("--out", help="directory for classifier.json and report.json")
    v.add_argument("--timing", action="store_true", help="also write wall-clock times to timing.json")
    v.set_defaults(func=cmd_svm)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateConstraintError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
