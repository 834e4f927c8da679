"""Smoke test for the drsafe_py extension.

Build first with `cargo build --release -p drsafe-py`, then run
`python3 python/smoke_test.py`. The script copies the shared library next to
a temporary import path under the module name Python expects.
"""

import importlib
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

TAIL = """
[ambiguity]
support_lo = [-0.4330127018922193]
support_hi = [0.4330127018922193]
mean = [0.0]
mean_tol = [0.1]
second_moment = [[0.0625]]
scale = 1.0
"""


def load_module():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libdrsafe_py.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "drsafe_py.so")
            sys.path.insert(0, str(tmp))
            return importlib.import_module("drsafe_py")
    sys.exit("libdrsafe_py.so not found; run `cargo build --release -p drsafe-py` first")


def main():
    dr = load_module()

    model = dr.Model.tcl()
    assert model.horizon == 18
    assert model.is_safe([19.0]) and model.is_safe([22.0]) and not model.is_safe([22.01])
    x1 = model.step([20.0], [0.0], [0.0])[0]
    assert 20.0 < x1 < 20.3, x1

    amb = dr.AmbiguitySet(-0.5, 0.5, 0.0, 0.05, 0.04)
    assert amb.is_feasible()
    xs, ys = [-0.5, -0.1, 0.2, 0.5], [0.0, 1.0, 0.6, 1.0]
    primal = dr.primal(amb, xs, ys, atoms=1024)
    cert = dr.dual(amb, xs, ys)
    assert cert["converged"]
    assert cert["value"] <= primal + 1e-6, (cert["value"], primal)
    assert abs(cert["value"] - primal) < 1e-3, (cert["value"], primal)
    wider = amb.widened(0.1, 2.0)
    assert dr.dual(wider, xs, ys)["value"] <= cert["value"] + 1e-8

    cfg = dr.Config('[model]\npreset = "tcl"\nhorizon = 6\n' + TAIL)
    assert cfg.hash() == dr.Config("[model]\nhorizon=6\n" + TAIL).hash()
    sol = dr.solve(cfg, "robust")
    assert sol.horizon == 6
    nodes = sol.nodes()
    v0 = sol.values(0)
    assert len(v0) == len(nodes)
    assert all(0.0 <= v <= 1.0 for v in v0)
    assert all(v == 0.0 for v, x in zip(v0, nodes) if not 19.0 <= x[0] <= 22.0)
    v1 = sol.values(1)
    assert all(a <= b + 1e-8 for a, b in zip(v0, v1))
    print("S_0.95,0 =", sol.safe_intervals(0.95, 0))

    ctl = sol.controller()
    control, branch = ctl.act([21.0], 0)
    assert control in (0, 1) and branch in ("safe", "fallback")
    report = ctl.simulate(samples=500, seed=3)
    assert report["samples"] == 500
    assert report["probability"] == report["safe_count"] / 500
    assert report == ctl.simulate(samples=500, seed=3)
    print("robust closed-loop safety:", report["probability"])

    try:
        dr.Config("[ambiguity]\nmean_tol = [-1.0]\n")
    except ValueError as e:
        assert "mean_tol" in str(e)
    else:
        raise AssertionError("negative mean tolerance accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
