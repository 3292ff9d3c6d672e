import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from smba.cli import CONFIG_SCHEMA, EXIT_OK, EXIT_USAGE, main


def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


def _write_config(path, **overrides):
    doc = {
        "instance": {"generate": {"n": 20, "m": 30, "seed": 1}},
        "solver": {"schedule": {"variant": "sqrt-log"}, "max_iters": 3000, "beta": 0.96, "seed": 0},
        "output": {"dir": "out"},
        "repetitions": 2,
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


def test_generate_writes_instance_and_sidecar(tmp_path, capsys):
    out = tmp_path / "inst.json"
    rc = main(["generate", "--n", "50", "--m", "100", "--regime", "strongly-convex", "--b-scheme",
               "feasible-x0", "--seed", "7", "--out", str(out)])
    assert rc == EXIT_OK
    assert "x0_feasible = true" in capsys.readouterr().out
    side = json.loads((tmp_path / "inst.sidecar.json").read_text())
    assert side["x0_feasible"] is True and len(side["x0"]) == 50
    first = out.read_bytes()
    main(["generate", "--n", "50", "--m", "100", "--regime", "strongly-convex", "--seed", "7", "--out", str(out)])
    assert out.read_bytes() == first


def test_generate_small_n_is_usage_error(tmp_path, capsys):
    rc = main(["generate", "--n", "5", "--m", "3", "--out", str(tmp_path / "x.json")])
    assert rc == EXIT_USAGE
    assert "zero_count" in capsys.readouterr().err


def test_solve_outputs(tmp_path):
    cfg = _write_config(tmp_path / "cfg.json", reference={"long_run_iters": 20000})
    assert main(["solve", str(cfg)]) == EXIT_OK
    out = tmp_path / "out"
    names = set(p.name for p in out.iterdir())
    assert names == {"trace_rep0.csv", "trace_rep1.csv", "average_rep0.csv", "average_rep1.csv", "summary.json"}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["repetitions"] == 2 and summary["seeds"] == [0, 1]
    assert all(r in ("feas+opt", "movement", "max_iters") for r in summary["stop_reasons"])
    with open(out / "trace_rep0.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "f", "feas_sq", "step_sq", "case"]
    assert len(rows) - 1 == summary["iterations"][0]
    assert [int(r[0]) for r in rows[1:]] == list(range(len(rows) - 1))


def test_solve_timing_opt_in(tmp_path):
    cfg = _write_config(tmp_path / "cfg.json", repetitions=1, output={"dir": "out", "timing": True})
    assert main(["solve", str(cfg)]) == EXIT_OK
    timing = json.loads((tmp_path / "out" / "timing.json").read_text())
    assert timing["std_time"] == 0.0 and len(timing["times"]) == 1


def test_solve_is_byte_identical(tmp_path):
    cfg = _write_config(tmp_path / "cfg.json", reference={"long_run_iters": 5000},
                        rates={"metrics": ["feas_sq"]})
    main(["solve", str(cfg)])
    first = _snapshot(tmp_path / "out")
    main(["solve", str(cfg)])
    assert _snapshot(tmp_path / "out") == first


@pytest.mark.parametrize("bad", [
    {"instance": {"generate": {"n": 20, "m": 30}}, "solver": {"schedule": {"variant": "sqrt-log"}},
     "output": {"dir": "o"}, "typo": 1},
    {"instance": {"generate": {"n": 20, "m": 30}}, "solver": {"schedule": {"variant": "cubic"}},
     "output": {"dir": "o"}},
    {"instance": {"path": "a.json", "builtin": "analytic-1d"}, "solver": {"schedule": {"variant": "sqrt-log"}},
     "output": {"dir": "o"}},
    {"instance": {"builtin": "analytic-1d"}, "solver": {"schedule": {"variant": "sqrt-log"}, "beta": 2.5},
     "output": {"dir": "o"}},
])
def test_solve_rejects_bad_config(tmp_path, bad):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(bad))
    assert main(["solve", str(cfg)]) == EXIT_USAGE


def test_solve_strongly_convex_auto_needs_mu(tmp_path):
    cfg = _write_config(tmp_path / "cfg.json", solver={"schedule": {"variant": "strongly-convex"}})
    assert main(["solve", str(cfg)]) == EXIT_USAGE


def test_schema_is_valid():
    import jsonschema
    jsonschema.Draft202012Validator.check_schema(CONFIG_SCHEMA)


def test_reference_builtin(tmp_path):
    out = tmp_path / "ref.json"
    assert main(["reference", "--builtin", "analytic-1d", "--iters", "20000", "--out", str(out)]) == EXIT_OK
    ref = json.loads(out.read_text())
    assert ref["x_star"][0] == pytest.approx(1.0, abs=1e-3)
    assert ref["f_star"] == pytest.approx(-3.0, abs=1e-2)
    assert ref["provenance"] == "long-run baseline"


def _synthetic_avg_csv(path, values):
    with open(path, "w") as fh:
        fh.write("k,f,feas_sq,x_0\n")
        for k, v in enumerate(values, start=1):
            fh.write(f"{k},{float(v)!r},{float(v)!r},0.0\n")


def test_rates_synthetic(tmp_path, capsys):
    path = tmp_path / "avg.csv"
    k = np.arange(1, 2001)
    _synthetic_avg_csv(path, list(3.0 / np.sqrt(k)))
    rc = main(["rates", str(path), "--metric", "feas_sq", "--band", "-0.65", "-0.35"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "-0.500000" in out and "PASS" in out
    main(["rates", str(path), "--metric", "feas_sq", "--band", "-2", "-1"])
    assert "FAIL" in capsys.readouterr().out


def test_rates_missing_reference(tmp_path):
    path = tmp_path / "avg.csv"
    _synthetic_avg_csv(path, [1.0 / k for k in range(1, 100)])
    assert main(["rates", str(path), "--metric", "opt_gap"]) == EXIT_USAGE


def test_rates_strongly_convex_1d(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "instance": {"builtin": "analytic-1d"},
        "solver": {"schedule": {"variant": "strongly-convex", "param": 2.0}, "max_iters": 100000,
                   "stopping": None},
        "output": {"dir": "out"},
    }))
    assert main(["solve", str(cfg)]) == EXIT_OK
    (tmp_path / "ref.json").write_text(json.dumps({"f_star": -3.0, "x_star": [1.0]}))
    capsys.readouterr()
    main(["rates", str(tmp_path / "out" / "average_rep0.csv"), "--metric", "dist_sq",
          "--reference-file", str(tmp_path / "ref.json"), "--band", "-2.6", "-0.7"])
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.endswith("PASS")


def test_svm_synthetic(tmp_path, capsys):
    out = tmp_path / "svm"
    rc = main(["svm", "--synthetic", "200", "--single-kernel", "--out", str(out)])
    assert rc == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["TSA"] == 1.0 and "TSA2" in report
    assert len(report["nonzero_lambda"]) == 1
    assert not (out / "timing.json").exists()
    first = _snapshot(out)
    main(["svm", "--synthetic", "200", "--single-kernel", "--out", str(out)])
    assert _snapshot(out) == first


def test_svm_csv_errors(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,label\n1,2,x\n3,4,y\n")
    assert main(["svm", "--data", str(path), "--label-column", "class"]) == EXIT_USAGE
    assert main(["svm", "--data", str(path)]) == EXIT_USAGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "smba", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "smba" in res.stdout
