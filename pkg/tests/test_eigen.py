import math

import numpy as np
import pytest
import scipy.linalg

from qsdlab.coefficients import make_model, make_weight
from qsdlab.discretize import assemble_generator
from qsdlab.eigen import (
    lambda_agreement_allowance,
    principal_eigenpair,
    solve_qsd,
)
from qsdlab.geometry import BoxDomain, build_grid

from util import lam_discrete, lam_exact, solve_bm1d, solve_box2d

DOM1 = BoxDomain((0.0,), (1.0,))


def test_matches_dense_eigensolver():
    grid = build_grid(DOM1, (64,))
    op = assemble_generator(make_model("bm1d_drift", m=1.0), grid)
    pair = principal_eigenpair(op)

    evals, evecs = scipy.linalg.eig(-op.matrix.toarray())
    k = int(np.argmin(evals.real))
    lam_dense = float(evals[k].real)
    v_dense = evecs[:, k].real
    v_dense /= v_dense[np.argmax(np.abs(v_dense))]

    # iteration stops at tol 1e-10, so agreement with the dense solve is
    # bounded by that, not by machine precision
    assert pair.lam == pytest.approx(lam_dense, abs=5e-9)
    assert np.allclose(pair.vector, v_dense, atol=1e-7)


def test_matches_tridiagonal_closed_form():
    # the assembled matrix is Toeplitz tridiagonal for constant drift, so
    # its principal eigenvalue has a closed form independent of any solver
    for n in (50, 200):
        pair = principal_eigenpair(
            assemble_generator(make_model("bm1d_drift", m=1.0),
                               build_grid(DOM1, (n,)))
        )
        assert pair.lam == pytest.approx(lam_discrete(n), abs=5e-9)


def test_vector_positive_max_normalized():
    pair = principal_eigenpair(
        assemble_generator(make_model("bm1d_drift", m=1.0),
                           build_grid(DOM1, (32,)))
    )
    assert pair.vector.min() > 0.0
    assert pair.vector.max() == pytest.approx(1.0)
    assert pair.residual_norm <= 1e-9
    assert pair.iterations >= 1


def test_second_order_convergence_to_continuum():
    errs = [abs(lam_discrete(n) - lam_exact()) for n in (100, 200, 400)]
    for e0, e1 in zip(errs, errs[1:]):
        assert 3.0 < e0 / e1 < 5.0
    qsd = solve_bm1d(n=400)
    assert qsd.lam == pytest.approx(lam_discrete(400), abs=5e-8)


def test_generator_and_adjoint_agree_within_allowance():
    for wname, kw in (("one", {}), ("exp_x", {"weight_k": 1.0}),
                      ("one_plus_sq", {})):
        qsd = solve_bm1d(n=100, weight_name=wname, **kw)
        assert abs(qsd.lam - qsd.lam_adjoint) <= qsd.allowance


def test_allowance_scales_with_h_squared():
    model = make_model("bm1d_drift", m=1.0)
    weight = make_weight("one", 1)
    a1 = lambda_agreement_allowance(model, weight, build_grid(DOM1, (50,)), 1e-10)
    a2 = lambda_agreement_allowance(model, weight, build_grid(DOM1, (100,)), 1e-10)
    assert a1 == pytest.approx(4 * a2 - 3 * 1e-9, rel=1e-6)


def test_normalizations():
    qsd = solve_bm1d(n=150, weight_name="exp_x", weight_k=0.7)
    w = qsd.grid.weights
    assert np.sum(w * qsd.phi) == pytest.approx(1.0, abs=1e-12)
    assert np.sum(w * qsd.psi * qsd.phi) == pytest.approx(1.0, abs=1e-12)
    assert np.sum(w * qsd.mu) == pytest.approx(1.0, abs=1e-12)
    assert np.sum(qsd.nu) == pytest.approx(1.0, abs=1e-12)
    # mu is the pointwise product of the two normalized eigenfields
    assert np.allclose(qsd.mu, qsd.psi * qsd.phi, atol=1e-13)
    # phi_tilde is phi / rho
    rho = qsd.weight.rho(qsd.grid.node_coordinates()).reshape(qsd.grid.shape)
    assert np.allclose(qsd.phi_tilde, qsd.phi / rho, atol=1e-13)


def test_fields_vanish_on_boundary_positive_inside():
    qsd = solve_bm1d(n=64)
    m = qsd.grid.interior_mask
    for fld in (qsd.psi, qsd.phi, qsd.phi_tilde, qsd.mu):
        assert np.all(fld[~m] == 0.0)
        assert np.all(fld[m] > 0.0)
    assert np.all(qsd.nu[~m] == 0.0)


def test_weight_does_not_move_the_spectrum():
    # the weighted adjoint is a similarity transform of the plain one, so
    # lambda must be weight-independent up to the discretization allowance
    lam0 = solve_bm1d(n=200).lam_adjoint
    lam1 = solve_bm1d(n=200, weight_name="exp_x", weight_k=1.0).lam_adjoint
    lam2 = solve_bm1d(n=200, weight_name="one_plus_sq").lam_adjoint
    allowance = solve_bm1d(n=200, weight_name="exp_x", weight_k=1.0).allowance
    assert abs(lam1 - lam0) <= 2 * allowance
    assert abs(lam2 - lam0) <= 2 * allowance


def test_zero_drift_self_adjoint_symmetry():
    qsd = solve_bm1d(n=80, m=0.0)
    psi = qsd.psi / qsd.psi.max()
    phi = qsd.phi / qsd.phi.max()
    assert np.allclose(psi, phi, atol=1e-10)


def test_gap_guess_near_known_gap():
    qsd = solve_bm1d(n=100)
    # lam2 - lam1 = (4 pi^2 - pi^2)/2 for this model
    gap = 1.5 * math.pi ** 2
    assert qsd.gap_guess == pytest.approx(gap, rel=0.2)


def test_2d_grid_eigenpair():
    qsd = solve_box2d(n=24)
    # product structure: lambda = pi^2, fields are separable sines
    assert qsd.lam == pytest.approx(math.pi ** 2, rel=5e-3)
    x = qsd.grid.axes[0]
    ref = np.outer(np.sin(math.pi * x), np.sin(math.pi * x))
    assert np.allclose(qsd.psi / qsd.psi.max(), ref, atol=5e-3)
