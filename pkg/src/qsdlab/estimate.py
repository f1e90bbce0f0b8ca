"""Estimators that confront simulation output with the spectral predictions.

The survival-based estimators exploit that killing is a pure death process:
increments of the log survivor count over disjoint windows are independent,
so the exit rate is fit by weighted least squares on the increments (the
weights are the exact binomial-thinning variances).  That makes the quoted
standard error honest, unlike naive regression on the survival curve whose
points are strongly correlated.

The deterministic quadrature routes evaluate the two cost integrals for the
eigenvalue.  The integrands have finite nonzero limits on the boundary
(proportional to products of inward normal derivatives), so the trapezoid
sum must include boundary nodes: the gradient there is taken one-sided and
the 0/0 eigenfield ratios are replaced by their normal-derivative limits.
Dropping the boundary ring instead loses a full order of accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coefficients import potential_c_tilde
from .discretize import assemble_drift_diffusion, weighted_adjoint_matrix
from .geometry import Grid
from .hjb import gradient_of_eigenfield, nodal_drift_Y, nodal_drift_Z
from .simulate import Trajectory, TrajectoryEnsemble

__all__ = [
    "SurvivalCurve",
    "RateFit",
    "CostEstimate",
    "DualityReport",
    "survival_curve",
    "exit_rate_fit",
    "extrapolate_rate_sqrt",
    "psi_from_survival",
    "shape_correlation",
    "qsd_histogram",
    "ergodic_cost_Y",
    "ergodic_cost_Z",
    "stationarity_distance",
    "duality_check",
    "lambda_quadrature_Y",
    "lambda_quadrature_Z",
]

_ETA_FLOOR = 1e-12


@dataclass(frozen=True)
class SurvivalCurve:
    """Empirical P(tau > t) with binomial standard errors."""

    times: np.ndarray
    p_hat: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray
    n_paths: int


@dataclass(frozen=True)
class RateFit:
    lam: float
    stderr: float
    t0: float
    t1: float
    r_squared: float
    n_points: int


@dataclass(frozen=True)
class CostEstimate:
    value: float
    stderr: float
    burn_in: float
    n_batches: int


@dataclass(frozen=True)
class DualityReport:
    max_defect: float
    per_function: np.ndarray
    n_nodes: int
    n_excluded: int


def survival_curve(ensemble: TrajectoryEnsemble, times=None,
                   n_times: int = 201) -> SurvivalCurve:
    """Survivor fraction per output time from an ensemble's exit times."""
    if times is None:
        times = np.linspace(0.0, ensemble.t_max, n_times)
    times = np.asarray(times, dtype=float)
    counts = ensemble.survivor_counts(times)
    n = ensemble.n_paths
    p = counts / n
    se = np.sqrt(p * (1.0 - p) / n)
    return SurvivalCurve(times=times, p_hat=p, stderr=se, counts=counts,
                         n_paths=n)


def exit_rate_fit(curve: SurvivalCurve, window=None,
                  gap_guess: float | None = None,
                  min_tail_count: int = 100) -> RateFit:
    """Exit rate from the log survival curve.

    The fit is WLS on increments of log N between consecutive curve times
    inside the window; increment variances are 1/N_{k+1} - 1/N_k (binomial
    thinning), so zero-information increments get zero weight automatically.
    The window defaults to [2/gap_guess, last t with N >= min_tail_count]
    — below t0 the curve still carries the sub-principal modes, above t1 it
    is noise.  R^2 is reported for the plain line fit on the log curve over
    the same window.
    """
    if window is not None:
        t0, t1 = window
    else:
        t0 = 0.0 if gap_guess is None else 2.0 / gap_guess
        ok = curve.counts >= min_tail_count
        if not np.any(ok):
            raise ValueError("survival curve never reaches the tail-count floor")
        t1 = float(curve.times[np.nonzero(ok)[0][-1]])
    sel = (curve.times >= t0 - 1e-12) & (curve.times <= t1 + 1e-12) \
        & (curve.counts > 0)
    t = curve.times[sel]
    n_k = curve.counts[sel].astype(float)
    if t.size < 5:
        raise ValueError(
            f"exit-rate fit needs at least 5 usable points, got {t.size} "
            f"in window [{t0:g}, {t1:g}]"
        )
    dlog = np.diff(np.log(n_k))
    dt = np.diff(t)
    var = 1.0 / n_k[1:] - 1.0 / n_k[:-1]
    use = var > 0
    if use.sum() < 4:
        raise ValueError("too few strides with deaths inside the fit window")
    w = 1.0 / var[use]
    lam = -float(np.sum(w * dlog[use] * dt[use]) / np.sum(w * dt[use] ** 2))
    se = float(1.0 / math.sqrt(np.sum(w * dt[use] ** 2)))

    logp = np.log(n_k / curve.n_paths)
    alpha = float(np.mean(logp + lam * t))
    resid = logp - (alpha - lam * t)
    sstot = float(np.sum((logp - logp.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / sstot if sstot > 0 else 1.0
    return RateFit(lam=lam, stderr=se, t0=float(t[0]), t1=float(t[-1]),
                   r_squared=r2, n_points=int(t.size))


def extrapolate_rate_sqrt(fine: RateFit, coarse: RateFit,
                          dt_ratio: float) -> tuple[float, float]:
    """Remove the O(sqrt(dt)) exit-detection bias from two rate fits.

    Killed paths exit late by ~ 0.58 sigma sqrt(dt) per wall contact
    (missed intra-step crossings), which shifts the fitted rate by
    c sqrt(dt).  Fitting the same ensemble size at dt and dt/r and
    eliminating the sqrt term gives the returned (rate, stderr);
    the leftover bias is O(dt).
    """
    if dt_ratio <= 1.0:
        raise ValueError("dt_ratio must exceed 1")
    r = math.sqrt(dt_ratio)
    lam = (r * fine.lam - coarse.lam) / (r - 1.0)
    se = math.sqrt((r * fine.stderr) ** 2 + coarse.stderr**2) / (r - 1.0)
    return lam, se


def psi_from_survival(curves, lam_hat: float, t_eval: float) -> np.ndarray:
    """Pointwise e^{lam t} P_x(tau > t) across per-start survival curves."""
    out = np.empty(len(curves))
    for i, c in enumerate(curves):
        j = int(np.argmin(np.abs(c.times - t_eval)))
        if c.p_hat[j] <= 0.0:
            raise ValueError(
                f"no survivors at t={c.times[j]:g} for probe {i}; "
                "shorten t_eval or add paths"
            )
        out[i] = math.exp(lam_hat * c.times[j]) * c.p_hat[j]
    return out


def shape_correlation(a, b) -> float:
    """Pearson correlation; scale/offset invariant shape agreement."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    return float(np.corrcoef(a, b)[0, 1])


def qsd_histogram(ensemble: TrajectoryEnsemble, grid: Grid,
                  t_eval: float | None = None,
                  min_survivors: int = 500) -> np.ndarray:
    """Nodal density of survivor positions at the ensemble horizon.

    Survivors are the conditioned sample of the killed process; their
    histogram estimates the quasistationary density.  Positions are only
    retained at the horizon, so t_eval (if given) must equal it — pick the
    evaluation time when building the ensemble.
    """
    if t_eval is not None and not math.isclose(t_eval, ensemble.t_max,
                                               rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(
            f"positions are recorded at the horizon t={ensemble.t_max:g}; "
            f"rebuild the ensemble with t_max={t_eval:g} to evaluate there"
        )
    alive = ~ensemble.exited
    k = int(alive.sum())
    if k < min_survivors:
        need = int(math.ceil(ensemble.n_paths * min_survivors / max(k, 1)))
        raise ValueError(
            f"only {k} survivors at t={ensemble.t_max:g}; need at least "
            f"{min_survivors} — rerun with n_paths ~ {need} "
            f"(or an earlier evaluation time)"
        )
    pts = ensemble.final_states[alive]
    lower = np.asarray(grid.domain.lower)
    idx = np.rint((pts - lower) / grid.h).astype(np.int64)
    for ax, n in enumerate(grid.shape):
        np.clip(idx[:, ax], 0, n - 1, out=idx[:, ax])
    counts = np.zeros(grid.shape)
    np.add.at(counts, tuple(idx.T), 1.0)
    return counts / k / grid.weights


def _cost_average(traj: Trajectory, series: np.ndarray,
                  burn_in: float | None, n_batches: int) -> CostEstimate:
    horizon = float(traj.times[-1])
    if burn_in is None:
        burn_in = min(max(10.0, 0.05 * horizon), 0.5 * horizon)
    sel = traj.times >= burn_in
    if sel.sum() < n_batches + 1:
        raise ValueError("not enough recorded points past burn-in")
    t = traj.times[sel]
    c = series[sel]
    value = float((c[-1] - c[0]) / (t[-1] - t[0]))
    # batch means over equal time blocks
    edges = np.linspace(0, t.size - 1, n_batches + 1).astype(int)
    rates = np.array([
        (c[edges[i + 1]] - c[edges[i]]) / (t[edges[i + 1]] - t[edges[i]])
        for i in range(n_batches)
    ])
    se = float(rates.std(ddof=1) / math.sqrt(n_batches))
    return CostEstimate(value=value, stderr=se, burn_in=float(burn_in),
                        n_batches=n_batches)


def ergodic_cost_Y(traj: Trajectory, burn_in: float | None = None,
                   n_batches: int = 32) -> CostEstimate:
    """Time average of the quadratic control cost along a Y path."""
    if traj.cost_control is None:
        raise ValueError("trajectory carries no cost accumulators")
    return _cost_average(traj, traj.cost_control, burn_in, n_batches)


def ergodic_cost_Z(traj: Trajectory, burn_in: float | None = None,
                   n_batches: int = 32) -> CostEstimate:
    """Time average of quadratic cost plus potential along a Z path."""
    if traj.cost_control is None or traj.cost_potential is None:
        raise ValueError("trajectory carries no cost accumulators")
    return _cost_average(traj, traj.cost_control + traj.cost_potential,
                         burn_in, n_batches)


def stationarity_distance(density, reference, grid: Grid) -> float:
    """L1 distance between two nodal densities; 0 iff equal, 2 if disjoint."""
    d = np.asarray(density, dtype=float).reshape(grid.shape)
    r = np.asarray(reference, dtype=float).reshape(grid.shape)
    return float(np.sum(grid.weights * np.abs(d - r)))


# ---------------------------------------------------------------------------
# generator duality
# ---------------------------------------------------------------------------


def sine_gallery(grid: Grid, orders=(1, 2, 3)) -> list[np.ndarray]:
    """Products of sin(k pi (x - l)/(u - l)): smooth, zero on the walls."""
    lo = np.asarray(grid.domain.lower)
    wid = grid.domain.widths
    pts = grid.interior_coordinates()
    out = []
    for k in orders:
        f = np.ones(pts.shape[0])
        for ax in range(grid.dim):
            f *= np.sin(k * np.pi * (pts[:, ax] - lo[ax]) / wid[ax])
        out.append(f)
    return out


def duality_check(qsd, test_functions=None,
                  min_distance: float | None = None) -> DualityReport:
    """Max-norm defect of L_Z f - (1/eta) L_Y^*(eta f) on interior nodes.

    L_Y and L_Z are assembled from the discretized optimal drifts; the
    adjoint is the quadrature-weighted transpose, eta = psi phi.  The defect
    is O(h^2) at fixed distance from the wall; within a few spacings of it
    the log-singular drift sampling error takes over and grows like 1/h, so
    the evaluation region defaults to distance >= 0.15 * (smallest box
    width).  Nodes with eta below 1e-12 are excluded and counted.
    """
    grid: Grid = qsd.grid
    model = qsd.model
    if test_functions is None:
        test_functions = sine_gallery(grid)
    if min_distance is None:
        min_distance = 0.15 * float(np.min(grid.domain.widths))

    pts = grid.interior_coordinates()
    a = model.a(pts)
    drift_y = nodal_drift_Y(qsd).reshape(grid.dim, -1).T
    drift_z = nodal_drift_Z(qsd, route="lebesgue").reshape(grid.dim, -1).T
    op_y = assemble_drift_diffusion(grid, drift_y, a)
    op_z = assemble_drift_diffusion(grid, drift_z, a)
    adj_y = weighted_adjoint_matrix(op_y)

    eta = (qsd.psi * qsd.phi)[grid.interior_mask]
    ok_eta = eta > _ETA_FLOOR
    lo = np.asarray(grid.domain.lower)
    hi = np.asarray(grid.domain.upper)
    dist = np.minimum(pts - lo, hi - pts).min(axis=1)
    sel = ok_eta & (dist >= min_distance - 1e-12)
    if not np.any(sel):
        raise ValueError("no interior nodes at the requested distance")

    defects = np.empty(len(test_functions))
    for i, f in enumerate(test_functions):
        lhs = op_z.matrix @ f
        rhs = np.zeros_like(f)
        rhs[ok_eta] = (adj_y @ (eta * f))[ok_eta] / eta[ok_eta]
        defects[i] = float(np.max(np.abs(lhs - rhs)[sel]))
    return DualityReport(
        max_defect=float(defects.max()),
        per_function=defects,
        n_nodes=int(sel.sum()),
        n_excluded=int((~ok_eta).sum()),
    )


# ---------------------------------------------------------------------------
# deterministic quadrature of the cost identities
# ---------------------------------------------------------------------------


def _gradient_with_boundary(field: np.ndarray, grid: Grid) -> np.ndarray:
    """Gradient of an eigenfield on the full grid, boundary included.

    Interior: central differences (the field vanishes on the boundary, so
    every interior node has both neighbors).  Face nodes: one-sided
    second-order stencil along the inward normal; tangential components
    vanish because the field is identically zero along the face.
    """
    g = gradient_of_eigenfield(field, grid)
    g = np.nan_to_num(g, nan=0.0)
    for ax in range(grid.dim):
        v = np.moveaxis(np.asarray(field, dtype=float), ax, 0)
        gax = np.moveaxis(g[ax], ax, 0)
        h = grid.h[ax]
        gax[0] = (4.0 * v[1] - v[2]) / (2.0 * h)
        gax[-1] = -(4.0 * v[-2] - v[-3]) / (2.0 * h)
    return g


def _boundary_ratio(num: np.ndarray, den: np.ndarray, grid: Grid) -> np.ndarray:
    """num/den on the closed grid where both vanish on the boundary.

    Face values use the limit of the ratio along the inward normal
    (second-order one-sided differences; the leading zeros cancel).
    Corner nodes are set to 0 — the quadrature integrands carry an extra
    factor vanishing quadratically there.
    """
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(grid.shape)
    m = grid.interior_mask
    out[m] = num[m] / den[m]
    if grid.dim == 1:
        out[0] = (4.0 * num[1] - num[2]) / (4.0 * den[1] - den[2])
        out[-1] = (4.0 * num[-2] - num[-3]) / (4.0 * den[-2] - den[-3])
        return out
    for ax in range(grid.dim):
        nv = np.moveaxis(num, ax, 0)
        dv = np.moveaxis(den, ax, 0)
        ov = np.moveaxis(out, ax, 0)
        # true face nodes only: interior along the other axis (corners stay
        # 0, where the 0/0 columns would otherwise produce NaN)
        other = np.zeros(nv.shape[1:], dtype=bool)
        other[1:-1] = True
        with np.errstate(invalid="ignore", divide="ignore"):
            lo = (4.0 * nv[1] - nv[2]) / (4.0 * dv[1] - dv[2])
            hi = (4.0 * nv[-2] - nv[-3]) / (4.0 * dv[-2] - dv[-3])
        ov[0][other] = lo[other]
        ov[-1][other] = hi[other]
    return out


def lambda_quadrature_Y(qsd) -> float:
    """Deterministic quadrature of the Y cost integral.

    The integral of (1/2) DPsi . a DPsi d(mu) is evaluated in the
    equivalent singularity-free form (1/2)(Dpsi . a Dpsi)(phi/psi) dx,
    including the boundary nodes via their finite limits.
    """
    grid: Grid = qsd.grid
    pts = grid.node_coordinates()
    a = qsd.model.a(pts)
    g = _gradient_with_boundary(qsd.psi, grid).reshape(grid.dim, -1)
    quad = np.einsum("im,mij,jm->m", g, a, g).reshape(grid.shape)
    ratio = _boundary_ratio(qsd.phi, qsd.psi, grid)
    return 0.5 * float(np.sum(grid.weights * quad * ratio))


def lambda_quadrature_Z(qsd) -> float:
    """Deterministic quadrature of the Z cost integral.

    Integrates (1/2) DPhi~ . a DPhi~ d(mu) + c~ d(mu) in the form
    (1/2)(Dphi~ . a Dphi~)(psi rho / phi~) + c~ psi phi, boundary limits
    included.  rho-independence of the value is part of what the
    acceptance run checks.
    """
    grid: Grid = qsd.grid
    pts = grid.node_coordinates()
    a = qsd.model.a(pts)
    g = _gradient_with_boundary(qsd.phi_tilde, grid).reshape(grid.dim, -1)
    quad = np.einsum("im,mij,jm->m", g, a, g).reshape(grid.shape)
    ratio = _boundary_ratio(qsd.psi, qsd.phi_tilde, grid)
    rho_vals = np.asarray(qsd.weight.rho(pts), dtype=float).reshape(grid.shape)
    ct = np.asarray(
        potential_c_tilde(qsd.model, qsd.weight, pts), dtype=float
    ).reshape(grid.shape)
    integrand = 0.5 * quad * ratio * rho_vals + ct * qsd.psi * qsd.phi
    return float(np.sum(grid.weights * integrand))
