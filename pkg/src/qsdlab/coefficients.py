"""Diffusion coefficients, reweighting densities, and derived drift/potential terms.

A model supplies b, sigma and the analytic derivatives the adjoint operators
need. With a = sigma sigma^T, the formal Lebesgue adjoint of
L f = b.Df + (1/2) tr[a D^2 f] is

    L* f = beta.Df + (1/2) tr[a D^2 f] - c f,
    beta_i = -b_i + sum_j d(a_ij)/dx_j,
    c      = -(1/2) sum_ij d^2(a_ij)/dx_i dx_j + sum_i d(b_i)/dx_i,

and the rho-weighted adjoint (1/rho) L*(f rho) has the same shape with

    beta_tilde = beta + (1/rho) a Drho,
    c_tilde    = c - (1/rho) beta.Drho - (1/(2 rho)) tr[a D^2 rho].

All callables are vectorized over leading axes: x of shape (..., d).
Models must be evaluable at least one grid cell beyond the closed box so
finite-difference cross-checks of the analytic derivatives can straddle it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CoefficientModel",
    "DensityWeight",
    "drift_beta",
    "potential_c",
    "drift_beta_tilde",
    "potential_c_tilde",
    "ellipticity_check",
    "coefficient_scale",
    "make_model",
    "make_weight",
    "model_gallery",
    "weight_gallery",
    "check_model_derivatives",
]

Array = np.ndarray


@dataclass(frozen=True)
class CoefficientModel:
    """Drift b, diffusion sigma, and analytic derivatives.

    b(x): (..., d); Db(x): (..., d, d) with Db[..., i, j] = db_i/dx_j;
    sigma(x): (..., d, m); a(x): (..., d, d);
    Da(x): (..., d, d, d) with Da[..., i, j, k] = d(a_ij)/dx_k;
    D2a(x): (..., d, d, d, d) with D2a[..., i, j, k, l] = d^2(a_ij)/dx_k dx_l.
    """

    dim: int
    noise_dim: int
    b: Callable[[Array], Array]
    Db: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    a: Callable[[Array], Array]
    Da: Callable[[Array], Array]
    D2a: Callable[[Array], Array]
    name: str = "custom"
    params: dict = field(default_factory=dict)
    derivatives: str = "analytic"


@dataclass(frozen=True)
class DensityWeight:
    """Strictly positive reweighting density rho with Drho (..., d) and D2rho (..., d, d)."""

    dim: int
    rho: Callable[[Array], Array]
    Drho: Callable[[Array], Array]
    D2rho: Callable[[Array], Array]
    name: str = "custom"

    def is_unit(self) -> bool:
        return self.name == "one"


def drift_beta(model: CoefficientModel, x) -> Array:
    """beta = -b + row divergence of a."""
    x = np.asarray(x, dtype=float)
    diva = np.einsum("...ijj->...i", model.Da(x))
    return -model.b(x) + diva


def potential_c(model: CoefficientModel, x) -> Array:
    """c = -(1/2) sum_ij (a_ij)_{x_i x_j} + div b."""
    x = np.asarray(x, dtype=float)
    term_a = np.einsum("...ijij->...", model.D2a(x))
    term_b = np.einsum("...ii->...", model.Db(x))
    return -0.5 * term_a + term_b


def drift_beta_tilde(model: CoefficientModel, weight: DensityWeight, x) -> Array:
    """beta_tilde = beta + (1/rho) a Drho."""
    x = np.asarray(x, dtype=float)
    beta = drift_beta(model, x)
    if weight.is_unit():
        return beta
    rho = weight.rho(x)
    adrho = np.einsum("...ij,...j->...i", model.a(x), weight.Drho(x))
    return beta + adrho / rho[..., None]


def potential_c_tilde(model: CoefficientModel, weight: DensityWeight, x) -> Array:
    """c_tilde = c - (1/rho) beta.Drho - (1/(2 rho)) tr[a D2rho]."""
    x = np.asarray(x, dtype=float)
    c = potential_c(model, x)
    if weight.is_unit():
        return c
    rho = weight.rho(x)
    beta = drift_beta(model, x)
    bd = np.einsum("...i,...i->...", beta, weight.Drho(x))
    tr = np.einsum("...ij,...ij->...", model.a(x), weight.D2rho(x))
    return c - bd / rho - 0.5 * tr / rho


def ellipticity_check(model: CoefficientModel, grid) -> float:
    """Smallest eigenvalue of a(x) over all grid nodes.

    Raises ValueError naming the offending node if it is not strictly positive.
    """
    pts = grid.node_coordinates()
    a = model.a(pts)
    if model.dim == 1:
        eigmin = a.reshape(len(pts))
    else:
        # closed form for symmetric 2x2
        tr = a[..., 0, 0] + a[..., 1, 1]
        det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
        disc = np.sqrt(np.maximum((0.5 * tr) ** 2 - det, 0.0))
        eigmin = 0.5 * tr - disc
    k = int(np.argmin(eigmin))
    val = float(eigmin[k])
    if val <= 0.0:
        raise ValueError(
            f"model '{model.name}' is not uniformly elliptic: "
            f"min eig(a) = {val:.6g} at node {pts[k].tolist()}"
        )
    return val


def coefficient_scale(model: CoefficientModel, weight: DensityWeight, grid) -> float:
    """max over grid nodes of |b|, |a|, |beta_tilde|, |c_tilde| entries, floored at 1.

    Used to scale O(h^2) agreement allowances.
    """
    pts = grid.node_coordinates()
    vals = [
        np.abs(model.b(pts)).max(),
        np.abs(model.a(pts)).max(),
        np.abs(drift_beta_tilde(model, weight, pts)).max(),
        np.abs(potential_c_tilde(model, weight, pts)).max(),
    ]
    return float(max(1.0, *vals))


# ---------------------------------------------------------------------------
# gallery


def _const(val):
    val = np.asarray(val, dtype=float)

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(val, x.shape[:-1] + val.shape).copy()

    return f


def make_model(name: str, **params) -> CoefficientModel:
    """Build a gallery model by name.

    bm1d_drift : d=1, b = -m, sigma = 1           (param m, default 1.0)
    ou1d       : d=1, b = -x, sigma = 1
    const2d    : d=2, b = (b1, b2), sigma = s*I   (params b1, b2, s)
    vardiff1d  : d=1, b = 0, a(x) = x^2 + 1
    """
    if name == "bm1d_drift":
        m = float(params.get("m", 1.0))
        return CoefficientModel(
            dim=1, noise_dim=1,
            b=_const([-m]), Db=_const([[0.0]]),
            sigma=_const([[1.0]]), a=_const([[1.0]]),
            Da=_const(np.zeros((1, 1, 1))), D2a=_const(np.zeros((1, 1, 1, 1))),
            name=name, params={"m": m},
        )
    if name == "ou1d":
        def b(x):
            return -np.asarray(x, dtype=float)

        return CoefficientModel(
            dim=1, noise_dim=1,
            b=b, Db=_const([[-1.0]]),
            sigma=_const([[1.0]]), a=_const([[1.0]]),
            Da=_const(np.zeros((1, 1, 1))), D2a=_const(np.zeros((1, 1, 1, 1))),
            name=name, params={},
        )
    if name == "const2d":
        b1 = float(params.get("b1", 1.0))
        b2 = float(params.get("b2", 0.0))
        s = float(params.get("s", 1.0))
        return CoefficientModel(
            dim=2, noise_dim=2,
            b=_const([b1, b2]), Db=_const(np.zeros((2, 2))),
            sigma=_const(s * np.eye(2)), a=_const(s * s * np.eye(2)),
            Da=_const(np.zeros((2, 2, 2))), D2a=_const(np.zeros((2, 2, 2, 2))),
            name=name, params={"b1": b1, "b2": b2, "s": s},
        )
    if name == "vardiff1d":
        def a(x):
            x = np.asarray(x, dtype=float)
            return (x[..., 0] ** 2 + 1.0)[..., None, None]

        def sigma(x):
            x = np.asarray(x, dtype=float)
            return np.sqrt(x[..., 0] ** 2 + 1.0)[..., None, None]

        def Da(x):
            x = np.asarray(x, dtype=float)
            return (2.0 * x[..., 0])[..., None, None, None]

        return CoefficientModel(
            dim=1, noise_dim=1,
            b=_const([0.0]), Db=_const([[0.0]]),
            sigma=sigma, a=a, Da=Da, D2a=_const(2.0 * np.ones((1, 1, 1, 1))),
            name=name, params={},
        )
    raise ValueError(f"unknown model '{name}' (gallery: bm1d_drift, ou1d, const2d, vardiff1d)")


def make_weight(name: str, dim: int, **params) -> DensityWeight:
    """Build a gallery reweighting density by name.

    one         : rho = 1
    exp_x       : rho = exp(k x_1)                 (param k, default 1.0)
    one_plus_sq : rho = 1 + |x|^2
    """
    if name == "one":
        return DensityWeight(
            dim=dim,
            rho=lambda x: np.ones(np.asarray(x).shape[:-1]),
            Drho=_const(np.zeros(dim)),
            D2rho=_const(np.zeros((dim, dim))),
            name="one",
        )
    if name == "exp_x":
        k = float(params.get("k", 1.0))

        def rho(x):
            return np.exp(k * np.asarray(x, dtype=float)[..., 0])

        def Drho(x):
            x = np.asarray(x, dtype=float)
            out = np.zeros(x.shape)
            out[..., 0] = k * np.exp(k * x[..., 0])
            return out

        def D2rho(x):
            x = np.asarray(x, dtype=float)
            out = np.zeros(x.shape + (dim,))
            out[..., 0, 0] = k * k * np.exp(k * x[..., 0])
            return out

        return DensityWeight(dim=dim, rho=rho, Drho=Drho, D2rho=D2rho, name="exp_x")
    if name == "one_plus_sq":
        def rho(x):
            x = np.asarray(x, dtype=float)
            return 1.0 + np.sum(x * x, axis=-1)

        def Drho(x):
            return 2.0 * np.asarray(x, dtype=float)

        def D2rho(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(2.0 * np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

        return DensityWeight(dim=dim, rho=rho, Drho=Drho, D2rho=D2rho, name="one_plus_sq")
    raise ValueError(f"unknown weight '{name}' (gallery: one, exp_x, one_plus_sq)")


def model_gallery() -> list[str]:
    return ["bm1d_drift", "ou1d", "const2d", "vardiff1d"]


def weight_gallery() -> list[str]:
    return ["one", "exp_x", "one_plus_sq"]


# ---------------------------------------------------------------------------
# derivative cross-check

def check_model_derivatives(model: CoefficientModel, grid, h_rel: float = 1e-4) -> float:
    """Compare analytic Db/Da against central differences of b/a on grid nodes.

    Returns the worst absolute discrepancy; the caller tests it against
    10 h^2 scale. Steps straddle the box by at most one cell, which models
    must tolerate.
    """
    pts = grid.node_coordinates()
    d = model.dim
    h = h_rel * float(np.min(grid.domain.widths))
    worst = 0.0
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        db_fd = (model.b(pts + e) - model.b(pts - e)) / (2 * h)
        worst = max(worst, float(np.abs(db_fd - model.Db(pts)[..., :, k]).max()))
        da_fd = (model.a(pts + e) - model.a(pts - e)) / (2 * h)
        worst = max(worst, float(np.abs(da_fd - model.Da(pts)[..., k]).max()))
    return worst
