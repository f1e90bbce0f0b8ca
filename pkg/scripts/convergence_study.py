#!/usr/bin/env python3
"""Grid-refinement study for the unit-drift example on (0, 1).

Closed forms: lambda = 1/2 + pi^2/2, psi ~ exp(x) sin(pi x), and both
optimal stationary drifts equal pi * cot(pi x).  Prints the eigenvalue
error, the max HJB residual inside a fixed margin, and the two
quadrature routes to lambda at each resolution, with observed orders.

Usage: python3 scripts/convergence_study.py [n1 n2 ...]
"""

import math
import sys

import numpy as np

from qsdlab.coefficients import make_model, make_weight
from qsdlab.eigen import solve_qsd
from qsdlab.estimate import lambda_quadrature_Y, lambda_quadrature_Z
from qsdlab.geometry import BoxDomain, build_grid
from qsdlab.hjb import hjb_residual_generator, log_transform, max_residual

LAM_EXACT = 0.5 + math.pi ** 2 / 2.0
MARGIN = 0.15


def main(argv):
    ns = [int(a) for a in argv] or [50, 100, 200, 400, 800]
    model = make_model("bm1d_drift", m=1.0)
    weight = make_weight("one", 1)
    domain = BoxDomain((0.0,), (1.0,))

    rows = []
    for n in ns:
        grid = build_grid(domain, (n,))
        qsd = solve_qsd(model, weight, grid)
        res = max_residual(
            hjb_residual_generator(log_transform(qsd.psi, grid), model, qsd.lam),
            grid, min_distance=MARGIN,
        )
        rows.append((n, abs(qsd.lam - LAM_EXACT), res,
                     abs(lambda_quadrature_Y(qsd) - qsd.lam) / qsd.lam,
                     abs(lambda_quadrature_Z(qsd) - qsd.lam) / qsd.lam))

    print(f"exact lambda = {LAM_EXACT:.12f}")
    print(f"{'n':>6} {'|lam err|':>12} {'order':>6} {'hjb res':>12} "
          f"{'order':>6} {'quad Y rel':>12} {'quad Z rel':>12}")
    prev = None
    for n, lam_err, res, qy, qz in rows:
        o1 = o2 = ""
        if prev is not None:
            ratio = math.log(n / prev[0])
            o1 = f"{math.log(prev[1] / lam_err) / ratio:6.2f}"
            o2 = f"{math.log(prev[2] / res) / ratio:6.2f}"
        print(f"{n:>6} {lam_err:12.4e} {o1:>6} {res:12.4e} {o2:>6} "
              f"{qy:12.4e} {qz:12.4e}")
        prev = (n, lam_err, res)


if __name__ == "__main__":
    main(sys.argv[1:])
