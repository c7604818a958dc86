#!/usr/bin/env python3
"""Refinement study for the rotation model's selected limit.

For each grid size the discounted solutions are swept to the smallest
discount and compared against the mean of the selection target; the table
shows how the plateau error shrinks with the velocity-lattice resolution.

Usage:  python scripts/grid_refinement_study.py [--sizes 32,64,128] [--lam-min 0.003]
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from torushj.grids import GridField, build_grid                 # noqa: E402
from torushj.matherlp import build_polytope                     # noqa: E402
from torushj.models import builtin_model, velocity_set          # noqa: E402
from torushj.solver import compute_bracket, default_dt, lambda_sweep  # noqa: E402

ALPHA = (np.sqrt(5.0) - 1.0) / 2.0


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="32,64,128")
    ap.add_argument("--m", type=int, default=49)
    ap.add_argument("--lam-min", type=float, default=0.003)
    args = ap.parse_args()
    sizes = [int(tok) for tok in args.sizes.split(",")]

    target = lambda x: np.sin(2 * np.pi * x[..., 0]) + 0.3
    lams = [lam for lam in (0.1, 0.03, 0.01, 0.003, 0.001) if lam >= args.lam_min]

    print(f"{'n':>5s} {'dt':>10s} {'c_lp':>12s} {'sup|u-0.3|':>12s} {'secs':>7s}")
    for n in sizes:
        grid = build_grid(1, n)
        vset = velocity_set(3.0, args.m)
        dt = default_dt(grid, vset)
        model = builtin_model("shifted_quadratic", alpha=ALPHA,
                              potential=lambda x: -target(x))
        poly = build_polytope(model, grid, vset, dt)
        model = model.with_c0(poly.c)
        bracket = compute_bracket(model, GridField.constant(grid, 0.0))
        t0 = time.time()
        entries = lambda_sweep(model, lams, grid, vset, dt=dt, tol=1e-8,
                               max_iter=400000, bracket=bracket)
        err = float(np.max(np.abs(entries[-1].field.values - 0.3)))
        print(f"{n:5d} {dt:10.5f} {poly.c:12.8f} {err:12.2e} {time.time() - t0:7.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
