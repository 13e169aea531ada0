"""Smoke test for the coopeig Python module.

Build the extension first:

    cargo build --release -p coopeig-py --features extension-module

then run `python3 python/smoke_test.py`. The script loads the built library
from target/ (or from COOPEIG_PY_LIB) under the module name `coopeig`.
"""

import importlib.util
import json
import math
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def find_library():
    env = os.environ.get("COOPEIG_PY_LIB")
    if env:
        return pathlib.Path(env)
    found = [
        p
        for profile in ("release", "debug")
        for name in ("libcoopeig_py.so", "libcoopeig_py.dylib", "coopeig_py.dll")
        for p in [ROOT / "target" / profile / name]
        if p.exists()
    ]
    if found:
        return max(found, key=lambda p: p.stat().st_mtime)
    sys.exit("coopeig-py library not found; build it with cargo first")


def load():
    tmp = pathlib.Path(tempfile.mkdtemp())
    suffix = ".pyd" if sys.platform == "win32" else ".so"
    dst = tmp / ("coopeig" + suffix)
    shutil.copy(find_library(), dst)
    spec = importlib.util.spec_from_file_location("coopeig", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    ce = load()

    lap = ce.Problem(json.dumps({"dim": 1, "regimes": 1, "window": {"ball": 1.5}}))
    assert (lap.dim, lap.regimes) == (1, 1)
    assert lap.violations() == 0
    op = lap.operator(1.0, 0.01)
    pair = op.principal_eigenpair()
    lo, hi = pair.bracket
    assert lo <= pair.lambda_ <= hi
    assert abs(pair.lambda_ - math.pi ** 2 / 4) / (math.pi ** 2 / 4) < 1e-3, pair
    assert len(pair.psi) == op.rows == len(op.nodes())
    assert op.matrix_market().startswith("%%MatrixMarket")
    print("laplacian:", pair)

    free = ce.Problem(json.dumps({
        "dim": 1, "regimes": 2,
        "rates": [[None, 1], [1, None]],
        "window": {"ball": 20},
    }))
    lim = ce.lambda_star(free, [4, 8, 16], 0.05)
    assert all(b < a for a, b in zip(lim.lambdas, lim.lambdas[1:])), lim.lambdas
    assert abs(lim.lambda_star) < 2e-2
    print("free coupled lambdas:", lim.lambdas, "lambda* =", lim.lambda_star)

    ou = ce.Problem(json.dumps({"dim": 1, "regimes": 1, "drift": [["-x1"]], "window": {"ball": 20}}))
    reg, _ = ce.regularity(ou, [4, 8, 16], 0.05)
    rec, _ = ce.recurrence(ou, 1.0, [4, 8, 16], 0.05)
    assert (reg, rec) == ("regular", "recurrent"), (reg, rec)
    print("OU:", reg, rec)

    (m, se), ends = ce.simulate(ou, [0.0], 1, 1.0, dt=1e-2, n_paths=2000, seed=3)
    var = sum(x[0] ** 2 for x, _ in ends) / len(ends)
    assert abs(var - (1 - math.exp(-2))) < 0.1, var
    print("OU variance at t=1:", var)

    bad = pathlib.Path(tempfile.mkdtemp()) / "bad.json"
    bad.write_text(json.dumps({"problem": {"dim": 1, "window": {"ball": 1}}, "task": {"kind": "lambda-star"}}))
    assert ce.run_config(str(bad), out=str(bad.parent / "out")) == 2
    assert not (bad.parent / "out").exists()
    print("smoke test passed")


if __name__ == "__main__":
    main()
