"""Shared closed forms and cached solves for the test suite.

The workhorse example is unit-drift Brownian motion killed at the ends of
(0, K): with b = -m and sigma = 1,

    lambda  = m^2/2 + pi^2/(2 K^2)
    psi(x)  ~ exp(m x)  sin(pi x / K)
    phi(x)  ~ exp(-m x) sin(pi x / K)

and both optimal stationary drifts equal (pi/K) cot(pi x / K) at m = 1,
K = 1.  Everything here is independent of the solver (direct formulas or
dense linear algebra), so it can serve as an oracle for it.
"""

import math
from functools import lru_cache

import numpy as np

from qsdlab.coefficients import make_model, make_weight
from qsdlab.eigen import solve_qsd
from qsdlab.geometry import BoxDomain, build_grid


def lam_exact(m: float = 1.0, K: float = 1.0) -> float:
    return 0.5 * m * m + math.pi ** 2 / (2.0 * K * K)


def psi_exact(x, m: float = 1.0, K: float = 1.0):
    return np.exp(m * np.asarray(x)) * np.sin(math.pi * np.asarray(x) / K)


def phi_exact(x, m: float = 1.0, K: float = 1.0):
    return np.exp(-m * np.asarray(x)) * np.sin(math.pi * np.asarray(x) / K)


def drift_exact(x, K: float = 1.0):
    """Common optimal drift of both controlled processes at m = 1."""
    x = np.asarray(x)
    return (math.pi / K) / np.tan(math.pi * x / K)


def lam_discrete(n: int, m: float = 1.0, K: float = 1.0) -> float:
    """Principal eigenvalue of the assembled tridiagonal matrix, closed form.

    The interior matrix for constant drift -m and unit diffusion is Toeplitz
    tridiagonal with off-diagonals 1/(2h^2) -+ m/(2h); its extreme eigenvalue
    follows from the standard similarity to the symmetric case.
    """
    h = K / n
    return (1.0 - math.sqrt(1.0 - (m * h) ** 2) * math.cos(math.pi * h / K)) / h ** 2


@lru_cache(maxsize=32)
def solve_bm1d(n: int = 200, m: float = 1.0, K: float = 1.0,
               weight_name: str = "one", weight_k: float = 1.0,
               tol: float = 1e-10):
    """Cached 1D solve of the workhorse example (tests share these)."""
    model = make_model("bm1d_drift", m=m)
    if weight_name == "exp_x":
        weight = make_weight("exp_x", 1, k=weight_k)
    else:
        weight = make_weight(weight_name, 1)
    grid = build_grid(BoxDomain((0.0,), (K,)), (n,))
    return solve_qsd(model, weight, grid, tol=tol)


@lru_cache(maxsize=8)
def solve_box2d(n: int = 64, tol: float = 1e-10):
    """Cached zero-drift unit-square solve; lambda = pi^2, psi = phi."""
    model = make_model("const2d", b1=0.0, b2=0.0, s=1.0)
    weight = make_weight("one", 2)
    grid = build_grid(BoxDomain((0.0, 0.0), (1.0, 1.0)), (n, n))
    return solve_qsd(model, weight, grid, tol=tol)
