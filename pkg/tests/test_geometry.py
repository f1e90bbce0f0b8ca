import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsdlab.geometry import BoxDomain, build_grid, distance_to_boundary


def test_domain_basics():
    dom = BoxDomain((0.0, -1.0), (2.0, 3.0))
    assert dom.dim == 2
    assert np.allclose(dom.widths, [2.0, 4.0])
    assert dom.volume == pytest.approx(8.0)


@pytest.mark.parametrize("lower,upper", [
    ((0.0,), (0.0,)),          # empty interval
    ((1.0,), (0.0,)),          # reversed
    ((0.0, 0.0), (1.0,)),      # length mismatch
    ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),  # 3d unsupported
    ((np.nan,), (1.0,)),
])
def test_domain_rejects(lower, upper):
    with pytest.raises(ValueError):
        BoxDomain(lower, upper)


def test_contains_open_vs_closed():
    dom = BoxDomain((0.0,), (1.0,))
    pts = np.array([[0.0], [0.5], [1.0], [1.1]])
    assert np.array_equal(dom.contains(pts), [True, True, True, False])
    assert np.array_equal(dom.contains(pts, closed=False),
                          [False, True, False, False])


def test_grid_counts_and_weights():
    dom = BoxDomain((0.0, 0.0), (1.0, 2.0))
    g = build_grid(dom, (8, 10))
    assert g.shape == (9, 11)
    assert g.n_nodes == 99
    assert g.n_interior == 7 * 9
    assert np.all(g.weights > 0)
    # trapezoid weights integrate constants exactly
    assert np.sum(g.weights) == pytest.approx(dom.volume, rel=1e-14)
    # and cubics to second order: x^2 on [0,1] to O(h^2)
    pts = g.node_coordinates()[:, 0].reshape(g.shape)
    approx = float(np.sum(g.weights * pts ** 2))
    assert approx == pytest.approx(2.0 / 3.0, abs=2 * g.h[0] ** 2)


def test_grid_rejects_tiny_and_mismatched():
    dom = BoxDomain((0.0,), (1.0,))
    with pytest.raises(ValueError):
        build_grid(dom, (3,))
    with pytest.raises(ValueError):
        build_grid(dom, (8, 8))


def test_scalar_n_broadcasts_in_2d():
    g = build_grid(BoxDomain((0.0, 0.0), (1.0, 1.0)), 16)
    assert g.n == (16, 16)


def test_interior_mask_matches_depth():
    g = build_grid(BoxDomain((0.0, 0.0), (1.0, 1.0)), (5, 7))
    depth = g.interior_depth()
    assert np.array_equal(depth > 0, g.interior_mask)
    assert depth.max() == min(5, 7) // 2


def test_node_coordinates_c_order():
    g = build_grid(BoxDomain((0.0, 0.0), (1.0, 1.0)), (4, 4))
    pts = g.node_coordinates().reshape(g.shape + (2,))
    # first axis varies x0, second varies x1
    assert np.allclose(pts[:, 0, 0], g.axes[0])
    assert np.allclose(pts[0, :, 1], g.axes[1])


@given(st.integers(4, 12), st.integers(4, 12), st.randoms(use_true_random=False))
@settings(max_examples=25, deadline=None)
def test_scatter_gather_roundtrip(n0, n1, rnd):
    g = build_grid(BoxDomain((0.0, 0.0), (1.0, 1.0)), (n0, n1))
    v = np.array([rnd.uniform(-1, 1) for _ in range(g.n_interior)])
    full = g.interior_to_full(v, fill=-7.0)
    assert full.shape == g.shape
    assert np.all(full[~g.interior_mask] == -7.0)
    assert np.array_equal(g.full_to_interior(full), v)


def test_scatter_leading_axes():
    g = build_grid(BoxDomain((0.0,), (1.0,)), (8,))
    v = np.arange(2 * g.n_interior, dtype=float).reshape(2, -1)
    full = g.interior_to_full(v)
    assert full.shape == (2,) + g.shape
    assert np.array_equal(g.full_to_interior(full), v)


def test_distance_to_boundary_values():
    dom = BoxDomain((0.0, 0.0), (1.0, 2.0))
    assert distance_to_boundary(dom, np.array([0.5, 1.0])) == pytest.approx(0.5)
    assert distance_to_boundary(dom, np.array([0.2, 1.9])) == pytest.approx(0.1)
    assert distance_to_boundary(dom, np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ValueError):
        distance_to_boundary(dom, np.array([-0.1, 1.0]))


def test_distance_vectorized_matches_scalar():
    dom = BoxDomain((0.0,), (1.0,))
    pts = np.linspace(0, 1, 11)[:, None]
    d = distance_to_boundary(dom, pts)
    assert np.allclose(d, np.minimum(pts[:, 0], 1 - pts[:, 0]))
