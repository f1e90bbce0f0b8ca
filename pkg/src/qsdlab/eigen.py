"""Principal Dirichlet eigenpairs and the quasistationary solution bundle.

The principal pair of -A (A the discretized operator) is computed by inverse
power iteration with a zero shift: one sparse LU of -A, then repeated solves.
The iterate is renormalized in max norm each sweep and the eigenvalue read
off a quadrature-weighted Rayleigh quotient. For the operators assembled
here -A is an M-matrix at reasonable Peclet numbers, so the iteration
converges to a strictly positive vector; a sign check guards the rest.

solve_qsd pairs the forward solve (exit-rate field psi) with the
rho-weighted adjoint solve (phi_tilde, rescaled to the Lebesgue eigenfield
phi = rho phi_tilde), normalized so that sum W phi = 1 and
sum W psi phi = 1. nu = W phi is the discrete quasistationary law; mu is
the nodal density psi phi of the common invariant measure of the two
controlled processes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .coefficients import CoefficientModel, DensityWeight, coefficient_scale
from .discretize import DiscreteOperator, assemble_adjoint, assemble_generator
from .geometry import Grid

__all__ = ["EigenPair", "QSDSolution", "principal_eigenpair", "eigen_residual",
           "solve_qsd", "spectral_gap_guess", "lambda_agreement_allowance"]


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EigenPair:
    """Principal eigenvalue/vector of -A with solve diagnostics.

    vector is the interior-node eigenvector, strictly positive, max norm 1.
    residual_norm = ||A v + lam v||_inf / ||v||_inf.
    """

    lam: float
    vector: np.ndarray
    residual_norm: float
    iterations: int


def eigen_residual(op: DiscreteOperator, lam: float, vector: np.ndarray) -> float:
    v = np.asarray(vector, dtype=float)
    return float(np.abs(op.matrix @ v + lam * v).max() / np.abs(v).max())


def principal_eigenpair(op: DiscreteOperator, tol: float = 1e-10,
                        max_iter: int = 10000) -> EigenPair:
    """Inverse power iteration for the principal pair of -A.

    Stops when the eigenvalue increment and the residual norm both fall
    below tol. The residual cannot drop below roundoff in the matrix-vector
    product, which scales with ||A||_inf (entries grow like 1/h^2), so the
    residual test is floored at 2 eps ||A||_inf. Raises ConvergenceError on
    iteration exhaustion and ValueError if the converged vector has mixed
    signs.
    """
    A = op.matrix
    n = A.shape[0]
    w = op.grid.weights.ravel()[op.grid.interior_flat]
    lu = spla.splu((-A).tocsc())
    norm_a = float(np.abs(A).sum(axis=1).max())
    res_tol = max(tol, 2.0 * np.finfo(float).eps * norm_a)

    v = np.ones(n)
    lam_old = np.inf
    for it in range(1, max_iter + 1):
        y = lu.solve(v)
        y /= np.abs(y).max()
        lam = float((w * y) @ (-(A @ y)) / ((w * y) @ y))
        res = float(np.abs(A @ y + lam * y).max() / np.abs(y).max())
        v = y
        if abs(lam - lam_old) < tol and res < res_tol:
            break
        lam_old = lam
    else:
        raise ConvergenceError(
            f"inverse power iteration did not converge in {max_iter} iterations "
            f"(last increment {abs(lam - lam_old):.3g}, residual {res:.3g})"
        )

    if v.max() <= 0:
        v = -v
    if v.min() <= 0:
        nbad = int(np.sum(v <= 0))
        raise ValueError(
            f"principal eigenvector has {nbad} nonpositive entries; "
            f"the discretized operator is not positivity-preserving here "
            f"(cell Peclet {op.peclet:.3g})"
        )
    return EigenPair(lam=lam, vector=v, residual_norm=res, iterations=it)


def spectral_gap_guess(op: DiscreteOperator, pair: EigenPair, tol: float = 1e-4,
                       max_iter: int = 200) -> float:
    """Crude second-eigenvalue estimate by deflated inverse iteration.

    Only used to size transient windows for rate fits, so a loose tolerance
    is fine. Returns lam2 - lam1 (positive).
    """
    A = op.matrix
    w = op.grid.weights.ravel()[op.grid.interior_flat]
    lu = spla.splu((-A).tocsc())
    v1 = pair.vector
    norm1 = (w * v1) @ v1

    rng = np.random.default_rng(0)
    u = rng.standard_normal(A.shape[0])
    lam2_old = np.inf
    lam2 = pair.lam * 3.0
    for _ in range(max_iter):
        u = u - v1 * (((w * v1) @ u) / norm1)
        y = lu.solve(u)
        y = y - v1 * (((w * v1) @ y) / norm1)
        nrm = np.abs(y).max()
        if nrm == 0:
            break
        y /= nrm
        lam2 = float((w * y) @ (-(A @ y)) / ((w * y) @ y))
        u = y
        if abs(lam2 - lam2_old) < tol * max(1.0, abs(lam2)):
            break
        lam2_old = lam2
    gap = lam2 - pair.lam
    return float(max(gap, 0.1 * pair.lam))


def lambda_agreement_allowance(model: CoefficientModel, weight: DensityWeight,
                               grid: Grid, tol: float) -> float:
    """Allowance for the generator-vs-adjoint eigenvalue discrepancy.

    The two matrices discretize operators with the same continuum spectrum
    but are assembled independently, so they agree only to discretization
    order: 10 tol + 5 h^2 scale.
    """
    h2 = float(np.max(grid.h) ** 2)
    return 10.0 * tol + 5.0 * h2 * coefficient_scale(model, weight, grid)


@dataclass(frozen=True)
class QSDSolution:
    """Joint eigen solution on a grid.

    lam : principal eigenvalue (from the generator solve; the adjoint value
          is kept as lam_adjoint and agrees within `allowance`).
    psi, phi, phi_tilde : full grid fields, zero on the boundary; phi_tilde
          is the pointwise quotient phi / rho.
    nu : per-node masses W phi, summing to 1 (the quasistationary law).
    mu : nodal density psi phi whose quadrature mass is 1 (invariant measure
         of the controlled processes).
    """

    lam: float
    lam_adjoint: float
    allowance: float
    psi: np.ndarray
    phi: np.ndarray
    phi_tilde: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    grid: Grid
    model: CoefficientModel
    weight: DensityWeight
    generator_pair: EigenPair
    adjoint_pair: EigenPair
    op_generator: DiscreteOperator
    op_adjoint: DiscreteOperator

    @property
    def gap_guess(self) -> float:
        return spectral_gap_guess(self.op_generator, self.generator_pair)


def solve_qsd(model: CoefficientModel, weight: DensityWeight, grid: Grid,
              tol: float = 1e-10, max_iter: int = 10000) -> QSDSolution:
    """Solve both eigenproblems and package the normalized fields."""
    op_gen = assemble_generator(model, grid)
    op_adj = assemble_adjoint(model, weight, grid)
    pair_gen = principal_eigenpair(op_gen, tol=tol, max_iter=max_iter)
    pair_adj = principal_eigenpair(op_adj, tol=tol, max_iter=max_iter)

    allowance = lambda_agreement_allowance(model, weight, grid, tol)
    mismatch = abs(pair_gen.lam - pair_adj.lam)
    if mismatch > allowance:
        raise ValueError(
            f"principal eigenvalues disagree: generator {pair_gen.lam!r}, "
            f"adjoint {pair_adj.lam!r}, |diff| = {mismatch:.3g} > allowance {allowance:.3g}"
        )

    w_int = grid.weights.ravel()[grid.interior_flat]
    pts = grid.interior_coordinates()
    rho_int = np.asarray(weight.rho(pts), dtype=float)

    phi_int = rho_int * pair_adj.vector
    phi_int = phi_int / float(w_int @ phi_int)
    psi_int = pair_gen.vector / float(w_int @ (pair_gen.vector * phi_int))

    psi = grid.interior_to_full(psi_int)
    phi = grid.interior_to_full(phi_int)
    phi_tilde = grid.interior_to_full(phi_int / rho_int)

    nu = np.zeros(grid.shape)
    nu[grid.interior_mask] = w_int * phi_int

    mu = psi * phi
    mass = float(np.sum(grid.weights * mu))
    mu = mu / mass

    return QSDSolution(
        lam=pair_gen.lam, lam_adjoint=pair_adj.lam, allowance=allowance,
        psi=psi, phi=phi, phi_tilde=phi_tilde, nu=nu, mu=mu,
        grid=grid, model=model, weight=weight,
        generator_pair=pair_gen, adjoint_pair=pair_adj,
        op_generator=op_gen, op_adjoint=op_adj,
    )
