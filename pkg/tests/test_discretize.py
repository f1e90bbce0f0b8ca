"""Stencil-level checks of the assembled operators.

The dense small-matrix assertions here (row entries, sign structure,
inverse positivity) are the ground truth the eigen and HJB layers build
on, so they are pinned exactly rather than through convergence rates.
"""

import numpy as np
import pytest

from qsdlab.coefficients import CoefficientModel, make_model, make_weight
from qsdlab.discretize import (
    PECLET_GUARD,
    apply,
    assemble_adjoint,
    assemble_drift_diffusion,
    assemble_generator,
    weighted_adjoint_matrix,
)
from qsdlab.geometry import BoxDomain, build_grid


def _const(val):
    val = np.asarray(val, dtype=float)

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(val, x.shape[:-1] + val.shape).copy()

    return f


DOM1 = BoxDomain((0.0,), (1.0,))


def test_pure_diffusion_row():
    # (1/2) f'' discretizes to (1/h^2) [1/2, -1, 1/2]
    grid = build_grid(DOM1, (8,))
    op = assemble_generator(make_model("bm1d_drift", m=0.0), grid)
    A = op.matrix.toarray()
    h2 = grid.h[0] ** 2
    k = 3  # a row away from the boundary
    assert A[k, k - 1] == pytest.approx(0.5 / h2)
    assert A[k, k] == pytest.approx(-1.0 / h2)
    assert A[k, k + 1] == pytest.approx(0.5 / h2)


def test_drift_tilts_offdiagonals():
    m = 2.0
    grid = build_grid(DOM1, (8,))
    op = assemble_generator(make_model("bm1d_drift", m=m), grid)
    A = op.matrix.toarray()
    h = grid.h[0]
    k = 3
    assert A[k, k + 1] == pytest.approx(0.5 / h ** 2 - m / (2 * h))
    assert A[k, k - 1] == pytest.approx(0.5 / h ** 2 + m / (2 * h))


def test_boundary_row_sums():
    # With Dirichlet legs dropped, A 1 = 0 except in the wall-adjacent rows,
    # where exactly one diffusive leg (1/(2h^2) -+ m/(2h)) is missing.
    m = 1.0
    grid = build_grid(DOM1, (10,))
    op = assemble_generator(make_model("bm1d_drift", m=m), grid)
    ones = np.ones(grid.n_interior)
    row_sums = op.matrix @ ones
    h = grid.h[0]
    interiorish = row_sums[1:-1]
    assert np.allclose(interiorish, 0.0, atol=1e-10)
    assert row_sums[0] == pytest.approx(-(0.5 / h ** 2 + m / (2 * h)))
    assert row_sums[-1] == pytest.approx(-(0.5 / h ** 2 - m / (2 * h)))


def test_exact_on_quadratics_vanishing_at_walls():
    # central stencils are exact on quadratics; f = x(1-x) has zero
    # boundary data so the dropped legs cost nothing
    grid = build_grid(DOM1, (16,))
    model = make_model("bm1d_drift", m=1.0)
    op = assemble_generator(model, grid)
    x = grid.interior_coordinates()[:, 0]
    f = x * (1 - x)
    exact = -(1 - 2 * x) + 0.5 * (-2.0)  # b f' + (1/2) a f''
    assert np.allclose(apply(op, f), exact, atol=1e-11 / grid.h[0] ** 2)


def test_mixed_second_derivative_2d():
    # constant correlated diffusion: L f for f = x y (+ x^2) is reproduced
    # exactly at nodes whose full 9-point stencil stays interior
    a = np.array([[1.0, 0.4], [0.4, 1.0]])
    model = CoefficientModel(
        dim=2, noise_dim=2,
        b=_const([0.5, -0.25]), Db=_const(np.zeros((2, 2))),
        sigma=_const(np.linalg.cholesky(a)), a=_const(a),
        Da=_const(np.zeros((2, 2, 2))), D2a=_const(np.zeros((2, 2, 2, 2))),
        name="corr2d",
    )
    grid = build_grid(BoxDomain((0.0, 0.0), (1.0, 1.0)), (10, 10))
    op = assemble_generator(model, grid)
    pts = grid.interior_coordinates()
    x, y = pts[:, 0], pts[:, 1]
    f = x * y + x ** 2
    exact = 0.5 * (y + 2 * x) - 0.25 * x + 0.5 * (2.0 + 2 * 0.4 * 1.0)
    got = apply(op, f)
    deep = grid.interior_depth()[grid.interior_mask] >= 2
    assert np.allclose(got[deep], exact[deep], atol=1e-9)


@pytest.mark.parametrize("wname,k", [("one", None), ("exp_x", 0.8)])
def test_generator_adjoint_duality(wname, k):
    """<L f, g rho> = <f, L*_rho g rho> + O(h^2) for f, g vanishing at walls."""
    n = 64
    grid = build_grid(DOM1, (n,))
    model = make_model("bm1d_drift", m=1.0)
    weight = make_weight(wname, 1, **({"k": k} if k is not None else {}))
    gen = assemble_generator(model, grid)
    adj = assemble_adjoint(model, weight, grid)

    x = grid.interior_coordinates()[:, 0]
    f = np.sin(np.pi * x)
    g = np.sin(2 * np.pi * x) * (1 + x)
    w = grid.weights.ravel()[grid.interior_flat]
    rho = weight.rho(grid.interior_coordinates())

    lhs = np.sum(w * (gen.matrix @ f) * g * rho)
    rhs = np.sum(w * f * (adj.matrix @ g) * rho)
    scale = max(abs(lhs), abs(rhs), 1.0)
    # measured defect at n = 64 is ~8e-4 for both weights; second order in h
    assert abs(lhs - rhs) / scale < 30 * grid.h[0] ** 2


def test_weighted_adjoint_matrix_identity():
    grid = build_grid(DOM1, (12,))
    op = assemble_generator(make_model("bm1d_drift", m=1.0), grid)
    at = weighted_adjoint_matrix(op)
    w = grid.weights.ravel()[grid.interior_flat]
    lhs = (np.diag(w) @ at.toarray())
    rhs = op.matrix.toarray().T @ np.diag(w)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_inverse_positivity_below_unit_peclet():
    # n = 16, m = 12: cell Peclet 0.75; -A is then an M-matrix and its
    # inverse is entrywise positive
    grid = build_grid(DOM1, (16,))
    op = assemble_generator(make_model("bm1d_drift", m=12.0), grid)
    assert op.peclet == pytest.approx(0.75)
    inv = np.linalg.inv(-op.matrix.toarray())
    assert inv.min() > 0.0


def test_inverse_positivity_fails_above_unit_peclet():
    # at Peclet 1.5 an off-diagonal entry of A changes sign and the inverse
    # of -A picks up negative entries: the sign guarantee is sharp at 1,
    # not at the warning guard
    grid = build_grid(DOM1, (16,))
    op = assemble_generator(make_model("bm1d_drift", m=24.0), grid)
    assert op.peclet == pytest.approx(1.5)
    assert op.peclet < PECLET_GUARD  # no warning yet at this resolution
    inv = np.linalg.inv(-op.matrix.toarray())
    assert inv.min() < 0.0


def test_peclet_warning_fires():
    grid = build_grid(DOM1, (16,))
    with pytest.warns(RuntimeWarning, match="Peclet"):
        op = assemble_generator(make_model("bm1d_drift", m=40.0), grid)
    assert op.peclet_warning
    assert op.peclet == pytest.approx(2.5)


def test_adjoint_constant_coefficient_rows():
    # with rho = exp(2x) the weighted adjoint of the m = 1 model has
    # constant drift 3 and potential -4; check the assembled row directly
    grid = build_grid(DOM1, (10,))
    model = make_model("bm1d_drift", m=1.0)
    weight = make_weight("exp_x", 1, k=2.0)
    op = assemble_adjoint(model, weight, grid)
    A = op.matrix.toarray()
    h = grid.h[0]
    k = 4
    assert A[k, k + 1] == pytest.approx(0.5 / h ** 2 + 3.0 / (2 * h))
    assert A[k, k - 1] == pytest.approx(0.5 / h ** 2 - 3.0 / (2 * h))
    assert A[k, k] == pytest.approx(-1.0 / h ** 2 + 4.0)


def test_drift_diffusion_assembly_matches_generator():
    grid = build_grid(DOM1, (12,))
    model = make_model("bm1d_drift", m=1.0)
    pts = grid.interior_coordinates()
    op1 = assemble_generator(model, grid)
    op2 = assemble_drift_diffusion(grid, model.b(pts), model.a(pts))
    assert (op1.matrix != op2.matrix).nnz == 0


def test_apply_rejects_bad_shape():
    grid = build_grid(DOM1, (8,))
    op = assemble_generator(make_model("bm1d_drift"), grid)
    with pytest.raises(ValueError):
        apply(op, np.ones(3))
