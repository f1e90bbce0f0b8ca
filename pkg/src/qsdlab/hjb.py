"""Log-transformed potentials, HJB residuals, and optimal drift fields.

The value functions of the two ergodic control problems are Psi = -log psi
and Phi_tilde = -log phi_tilde. Both blow up at the boundary, so gradients
are formed by differencing the potential itself (never the ratio of
differenced eigenfields, which loses accuracy exactly where psi vanishes):

  * one-sided O(h^2) stencils at nodes adjacent to a wall,
  * plain central differences one layer further in,
  * fourth-order central differences wherever five interior nodes fit.

The higher-order interior stencil matters: the potentials have a log
singularity at the walls, and a second-order gradient carries a relative
error of 1/(3 k^2) at the k-th node from the wall no matter how fine the
grid is. The fourth-order stencil drops that to 4/(5 k^4).

Residual fields are reported with the two node layers nearest the boundary
masked out (NaN); second derivatives are not formed there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import (
    CoefficientModel,
    DensityWeight,
    drift_beta,
    drift_beta_tilde,
    potential_c_tilde,
)
from .geometry import Grid

__all__ = [
    "PotentialField",
    "log_transform",
    "hjb_residual_generator",
    "hjb_residual_adjoint",
    "feedback_control",
    "optimal_drift_Y",
    "optimal_drift_Z",
    "nodal_drift_Y",
    "nodal_drift_Z",
    "gradient_of_eigenfield",
    "max_residual",
    "bilinear_interpolate",
]


def _axis_gradient(vals: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Differentiate a potential along one axis; NaN where no stencil fits.

    vals is a full grid array, NaN on the boundary.
    """
    v = np.moveaxis(vals, axis, 0)
    n = v.shape[0] - 1
    out = np.full_like(v, np.nan)
    if n >= 6:
        out[3:n - 2] = (-v[5:n] + 8 * v[4:n - 1] - 8 * v[2:n - 3] + v[1:n - 4]) / (12 * h)
        second_order = (2, n - 2)
    else:
        second_order = range(2, n - 1)
    for i in second_order:
        out[i] = (v[i + 1] - v[i - 1]) / (2 * h)
    out[1] = (-3 * v[1] + 4 * v[2] - v[3]) / (2 * h)
    out[n - 1] = (3 * v[n - 1] - 4 * v[n - 2] + v[n - 3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


def _axis_second(vals: np.ndarray, axis: int, h: float) -> np.ndarray:
    v = np.moveaxis(vals, axis, 0)
    n = v.shape[0] - 1
    out = np.full_like(v, np.nan)
    out[2:n - 1] = (v[3:n] - 2 * v[2:n - 1] + v[1:n - 2]) / (h * h)
    return np.moveaxis(out, 0, axis)


def _mixed_second(vals: np.ndarray, h0: float, h1: float) -> np.ndarray:
    out = np.full_like(vals, np.nan)
    out[2:-2, 2:-2] = (
        vals[3:-1, 3:-1] - vals[3:-1, 1:-3] - vals[1:-3, 3:-1] + vals[1:-3, 1:-3]
    ) / (4 * h0 * h1)
    return out


@dataclass(frozen=True)
class PotentialField:
    """A potential on the grid with its differenced gradient.

    values : full grid array, NaN on the boundary (the potential diverges).
    gradient : shape (dim,) + grid.shape; per-axis derivative, NaN at
        boundary nodes.
    """

    grid: Grid
    values: np.ndarray
    gradient: np.ndarray

    def interior_axes(self) -> list[np.ndarray]:
        return [ax[1:-1] for ax in self.grid.axes]

    def gradient_interior(self) -> np.ndarray:
        """Gradient restricted to the interior lattice, shape (dim,) + (n_i - 1)."""
        if self.grid.dim == 1:
            return self.gradient[:, 1:-1]
        return self.gradient[:, 1:-1, 1:-1]


def log_transform(field: np.ndarray, grid: Grid) -> PotentialField:
    """Build the potential -log(field) with its gradient.

    field is a full grid array, strictly positive on interior nodes
    (boundary values are ignored; the potential is NaN there).
    """
    field = np.asarray(field, dtype=float)
    if field.shape != grid.shape:
        raise ValueError(f"field shape {field.shape} does not match grid {grid.shape}")
    interior = field[grid.interior_mask]
    if np.any(interior <= 0.0):
        raise ValueError("log transform needs a strictly positive interior field")
    vals = np.full(grid.shape, np.nan)
    vals[grid.interior_mask] = -np.log(interior)
    grad = np.stack(
        [_axis_gradient(vals, ax, grid.h[ax]) for ax in range(grid.dim)], axis=0
    )
    # in 2D the axis stencils also produced values at boundary-parallel rows;
    # keep the gradient defined on interior nodes only
    grad[:, ~grid.interior_mask] = np.nan
    return PotentialField(grid=grid, values=vals, gradient=grad)


def _hessian(potential: PotentialField) -> np.ndarray:
    grid = potential.grid
    d = grid.dim
    hess = np.full((d, d) + grid.shape, np.nan)
    for i in range(d):
        hess[i, i] = _axis_second(potential.values, i, grid.h[i])
    if d == 2:
        hess[0, 1] = hess[1, 0] = _mixed_second(potential.values, grid.h[0], grid.h[1])
    return hess


def _mask_two_layers(field: np.ndarray, grid: Grid) -> np.ndarray:
    out = field.copy()
    out[grid.interior_depth() < 3] = np.nan
    return out


def hjb_residual_generator(potential: PotentialField, model: CoefficientModel,
                           lam: float) -> np.ndarray:
    """|b.DPsi + (1/2) tr[a D^2 Psi] - (1/2) DPsi.a DPsi - lam| pointwise.

    NaN on the two node layers nearest the boundary, where the second
    differences would reach into the wall.
    """
    grid = potential.grid
    pts = grid.node_coordinates().reshape(grid.shape + (grid.dim,))
    b = model.b(pts)
    a = model.a(pts)
    grad = np.moveaxis(potential.gradient, 0, -1)
    hess = np.moveaxis(_hessian(potential), (0, 1), (-2, -1))

    adv = np.einsum("...i,...i->...", b, grad)
    diff = 0.5 * np.einsum("...ij,...ij->...", a, hess)
    quad = 0.5 * np.einsum("...i,...ij,...j->...", grad, a, grad)
    res = np.abs(adv + diff - quad - lam)
    return _mask_two_layers(res, grid)


def hjb_residual_adjoint(potential: PotentialField, model: CoefficientModel,
                         weight: DensityWeight, lam: float) -> np.ndarray:
    """Adjoint-side residual |beta_t.DPhi + (1/2) tr[a D^2 Phi] - (1/2) DPhi.a DPhi + c_t - lam|."""
    grid = potential.grid
    pts = grid.node_coordinates().reshape(grid.shape + (grid.dim,))
    beta_t = drift_beta_tilde(model, weight, pts)
    c_t = potential_c_tilde(model, weight, pts)
    a = model.a(pts)
    grad = np.moveaxis(potential.gradient, 0, -1)
    hess = np.moveaxis(_hessian(potential), (0, 1), (-2, -1))

    adv = np.einsum("...i,...i->...", beta_t, grad)
    diff = 0.5 * np.einsum("...ij,...ij->...", a, hess)
    quad = 0.5 * np.einsum("...i,...ij,...j->...", grad, a, grad)
    res = np.abs(adv + diff - quad + c_t - lam)
    return _mask_two_layers(res, grid)


def max_residual(field: np.ndarray, grid: Grid, min_distance: float = 0.0) -> float:
    """Largest finite residual over nodes at boundary distance >= min_distance."""
    pts = grid.node_coordinates()
    lo = np.asarray(grid.domain.lower)
    up = np.asarray(grid.domain.upper)
    dist = np.minimum(pts - lo, up - pts).min(axis=-1).reshape(grid.shape)
    sel = (dist >= min_distance - 1e-12) & np.isfinite(field)
    if not np.any(sel):
        raise ValueError("no evaluable nodes at the requested distance")
    return float(field[sel].max())


# ---------------------------------------------------------------------------
# interpolation and drift fields


def bilinear_interpolate(axes: list[np.ndarray], values: np.ndarray, x: np.ndarray):
    """Multilinear interpolation on a tensor lattice, clamping to the hull.

    values has shape (k,) + lattice shape (leading component axis); x has
    shape (..., d). Returns (out of shape (..., k), clamped bool of shape
    (...,)). Points outside the lattice hull are evaluated at the clamped
    coordinate; downstream treats that as the flagged near-boundary case.
    """
    x = np.asarray(x, dtype=float)
    d = len(axes)
    pts = np.atleast_2d(x)
    k = values.shape[0]

    idx = []
    frac = []
    clamped = np.zeros(pts.shape[0], dtype=bool)
    for i in range(d):
        ax = axes[i]
        xi = pts[:, i]
        clamped |= (xi < ax[0]) | (xi > ax[-1])
        xi = np.clip(xi, ax[0], ax[-1])
        j = np.clip(np.searchsorted(ax, xi, side="right") - 1, 0, len(ax) - 2)
        idx.append(j)
        frac.append((xi - ax[j]) / (ax[j + 1] - ax[j]))

    if d == 1:
        j = idx[0]
        t = frac[0]
        out = values[:, j] * (1 - t) + values[:, j + 1] * t
    else:
        j0, j1 = idx
        t0, t1 = frac
        v00 = values[:, j0, j1]
        v10 = values[:, j0 + 1, j1]
        v01 = values[:, j0, j1 + 1]
        v11 = values[:, j0 + 1, j1 + 1]
        out = (v00 * (1 - t0) * (1 - t1) + v10 * t0 * (1 - t1)
               + v01 * (1 - t0) * t1 + v11 * t0 * t1)
    out = np.moveaxis(out, 0, -1)
    if x.ndim == 1:
        return out[0], bool(clamped[0])
    return out.reshape(x.shape[:-1] + (k,)), clamped.reshape(x.shape[:-1])


def _interp_gradient(potential: PotentialField, x):
    return bilinear_interpolate(
        potential.interior_axes(), potential.gradient_interior(), x
    )


def feedback_control(potential: PotentialField, model: CoefficientModel, x,
                     return_flags: bool = False):
    """Optimal feedback u(x) = -sigma(x)^T DPsi(x), gradient interpolated."""
    grad, clamped = _interp_gradient(potential, x)
    u = -np.einsum("...im,...i->...m", model.sigma(np.asarray(x, dtype=float)), grad)
    return (u, clamped) if return_flags else u


def optimal_drift_Y(potential: PotentialField, model: CoefficientModel, x,
                    return_flags: bool = False):
    """State drift of the conditioned process: b(x) - a(x) DPsi(x)."""
    x = np.asarray(x, dtype=float)
    grad, clamped = _interp_gradient(potential, x)
    drift = model.b(x) - np.einsum("...ij,...j->...i", model.a(x), grad)
    return (drift, clamped) if return_flags else drift


def optimal_drift_Z(qsd, x, route: str = "rho", return_flags: bool = False):
    """State drift of the reversed-time process, by either algebraic route.

    route="rho":      beta_tilde(x) - a(x) D(-log phi_tilde)(x)
    route="lebesgue": beta(x)       - a(x) D(-log phi)(x)

    The two coincide identically in exact arithmetic for any weight; the
    discrepancy here is pure differencing error on log(rho).
    """
    x = np.asarray(x, dtype=float)
    model, weight, grid = qsd.model, qsd.weight, qsd.grid
    if route == "rho":
        pot = log_transform(qsd.phi_tilde, grid)
        base = drift_beta_tilde(model, weight, x)
    elif route == "lebesgue":
        pot = log_transform(qsd.phi, grid)
        base = drift_beta(model, x)
    else:
        raise ValueError(f"unknown route '{route}'")
    grad, clamped = _interp_gradient(pot, x)
    drift = base - np.einsum("...ij,...j->...i", model.a(x), grad)
    return (drift, clamped) if return_flags else drift


def nodal_drift_Y(qsd) -> np.ndarray:
    """Y drift sampled at interior nodes, shape (dim,) + interior lattice."""
    grid = qsd.grid
    pot = log_transform(qsd.psi, grid)
    pts = grid.interior_coordinates()
    b = qsd.model.b(pts)
    a = qsd.model.a(pts)
    grad = pot.gradient_interior().reshape(grid.dim, -1).T
    drift = b - np.einsum("nij,nj->ni", a, grad)
    lat = tuple(s - 2 for s in grid.shape)
    return drift.T.reshape((grid.dim,) + lat)


def nodal_drift_Z(qsd, route: str = "rho") -> np.ndarray:
    """Z drift sampled at interior nodes, shape (dim,) + interior lattice."""
    grid = qsd.grid
    if route == "rho":
        pot = log_transform(qsd.phi_tilde, grid)
    elif route == "lebesgue":
        pot = log_transform(qsd.phi, grid)
    else:
        raise ValueError(f"unknown route '{route}'")
    pts = grid.interior_coordinates()
    if route == "rho":
        base = drift_beta_tilde(qsd.model, qsd.weight, pts)
    else:
        base = drift_beta(qsd.model, pts)
    a = qsd.model.a(pts)
    grad = pot.gradient_interior().reshape(grid.dim, -1).T
    drift = base - np.einsum("nij,nj->ni", a, grad)
    lat = tuple(s - 2 for s in grid.shape)
    return drift.T.reshape((grid.dim,) + lat)


def gradient_of_eigenfield(field: np.ndarray, grid: Grid) -> np.ndarray:
    """Central-difference gradient of a field vanishing on the boundary.

    Unlike the potentials, the eigenfields have known boundary values (zero),
    so second-order central differences apply at every interior node. Shape
    (dim,) + grid.shape, NaN at boundary nodes.
    """
    field = np.asarray(field, dtype=float)
    out = np.full((grid.dim,) + grid.shape, np.nan)
    for ax in range(grid.dim):
        v = np.moveaxis(field, ax, 0)
        g = np.full_like(v, np.nan)
        g[1:-1] = (v[2:] - v[:-2]) / (2 * grid.h[ax])
        out[ax] = np.moveaxis(g, 0, ax)
    out[:, ~grid.interior_mask] = np.nan
    return out
