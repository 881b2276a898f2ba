#!/usr/bin/env python3
"""Refinement study: value-construction error against the closed-form oracle.

The tangential-noise model has worst-case values equal to |x|, so both
constructions can be measured directly while (dt, h) are refined together.
"""

import argparse
import pathlib
import sys
import time

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

import aslyap as al  # noqa: E402

MODELS = pathlib.Path(__file__).resolve().parent.parent / "models"


def run(parsed, nodes, kind):
    model = parsed.model
    grid = al.Grid(model.domain_lower, model.domain_upper,
                   (nodes,) * model.dim_state)
    h = max(grid.spacing)
    r = np.linalg.norm(grid.nodes(), axis=1)
    t0 = time.monotonic()
    if kind == "sup":
        scheme = al.default_scheme(model, grid, cap=1.0, dt=h)
        res = al.worst_case_sup_value(model, grid, scheme)
        mask = r <= 0.8
    else:
        grid = al.Grid(model.domain_lower, model.domain_upper,
                       (nodes,) * model.dim_state, rho=4 * h)
        scheme = al.default_scheme(model, grid, cap=2.0, dt=h)
        res = al.worst_case_integral_value(model, grid, parsed.gauge, scheme)
        mask = (r > grid.rho) & (r <= 0.8)
    err = np.abs(res.field.flat - r)[mask].max()
    return h, scheme.dt, err, res.field.iterations, time.monotonic() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default=str(MODELS / "rotational.model"))
    ap.add_argument("--levels", type=int, default=3)
    args = ap.parse_args()
    parsed = al.parse_model(pathlib.Path(args.model).read_text())

    for kind in ("sup", "integral"):
        if kind == "integral" and parsed.gauge is None:
            continue
        print(f"== {kind}-cost value ==")
        print(f"{'nodes':>6} {'h':>9} {'dt':>9} {'max err':>11} {'sweeps':>7} {'time':>7}")
        nodes = 41
        prev = None
        for _ in range(args.levels):
            h, dt, err, iters, sec = run(parsed, nodes, kind)
            ratio = "" if prev is None or err == 0 else f"  (x{prev / err:.2f})"
            print(f"{nodes:>6} {h:>9.4f} {dt:>9.4f} {err:>11.3e} {iters:>7} "
                  f"{sec:>6.1f}s{ratio}")
            prev = err
            nodes = 2 * nodes - 1
        print()


if __name__ == "__main__":
    main()
