"""Box domains and uniform tensor grids with trapezoid quadrature.

Everything downstream (assembly, eigen solves, histograms) works on the node
set produced here, so the index conventions are fixed once and for all:
nodes are laid out in C order over the tensor product of per-axis coordinate
arrays, a node is a boundary node iff any of its per-axis indices is 0 or n,
and quadrature weights are the tensor product of 1D trapezoid weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["BoxDomain", "Grid", "build_grid", "distance_to_boundary"]


@dataclass(frozen=True)
class BoxDomain:
    """Open axis-aligned box (lower_i, upper_i), dimension 1 or 2."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if len(lower) != len(upper):
            raise ValueError("lower and upper must have the same length")
        if len(lower) not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {len(lower)}")
        for i, (lo, up) in enumerate(zip(lower, upper)):
            if not np.isfinite(lo) or not np.isfinite(up) or not lo < up:
                raise ValueError(f"axis {i}: need finite lower < upper, got ({lo}, {up})")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, x, closed: bool = True) -> np.ndarray:
        """Elementwise membership test for points of shape (..., dim)."""
        x = np.asarray(x, dtype=float)
        lo = np.asarray(self.lower)
        up = np.asarray(self.upper)
        if closed:
            ok = (x >= lo) & (x <= up)
        else:
            ok = (x > lo) & (x < up)
        return np.all(ok, axis=-1)


class Grid:
    """Uniform tensor grid on a box with (n_i + 1) nodes per axis.

    Attributes
    ----------
    domain : BoxDomain
    n : tuple of int
        Cells per axis; node count per axis is n_i + 1.
    h : ndarray
        Mesh widths per axis.
    shape : tuple
        Node-array shape, (n_1+1, ..., n_d+1).
    axes : list of ndarray
        Per-axis node coordinates.
    interior_mask : ndarray of bool, shape `shape`
        True at interior nodes (no per-axis index equal to 0 or n_i).
    weights : ndarray, shape `shape`
        Trapezoid quadrature weights; positive, sum to the box volume.
    """

    def __init__(self, domain: BoxDomain, n):
        n = tuple(int(v) for v in np.atleast_1d(n))
        if len(n) == 1 and domain.dim == 2:
            n = n * 2
        if len(n) != domain.dim:
            raise ValueError(f"n has {len(n)} entries for a {domain.dim}-d domain")
        for v in n:
            if v < 4:
                raise ValueError(f"need at least 4 cells per axis, got {v}")
        self.domain = domain
        self.n = n
        self.h = domain.widths / np.asarray(n, dtype=float)
        self.axes = [
            np.linspace(domain.lower[i], domain.upper[i], n[i] + 1)
            for i in range(domain.dim)
        ]
        self.shape = tuple(v + 1 for v in n)

        masks = []
        for i in range(domain.dim):
            m = np.ones(self.shape[i], dtype=bool)
            m[0] = m[-1] = False
            masks.append(m)
        if domain.dim == 1:
            self.interior_mask = masks[0]
        else:
            self.interior_mask = masks[0][:, None] & masks[1][None, :]

        w1d = []
        for i in range(domain.dim):
            w = np.full(self.shape[i], self.h[i])
            w[0] = w[-1] = 0.5 * self.h[i]
            w1d.append(w)
        if domain.dim == 1:
            self.weights = w1d[0]
        else:
            self.weights = w1d[0][:, None] * w1d[1][None, :]

        self.interior_flat = np.flatnonzero(self.interior_mask.ravel())
        # full-grid flat index -> interior index, -1 at boundary
        self._to_interior = np.full(int(np.prod(self.shape)), -1, dtype=np.int64)
        self._to_interior[self.interior_flat] = np.arange(self.interior_flat.size)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_interior(self) -> int:
        return int(self.interior_flat.size)

    def node_coordinates(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, dim), C order."""
        if self.dim == 1:
            return self.axes[0][:, None]
        X, Y = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    def interior_coordinates(self) -> np.ndarray:
        return self.node_coordinates()[self.interior_flat]

    def interior_to_full(self, v: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter an interior vector into a full grid-shaped array."""
        v = np.asarray(v)
        if v.shape[-1] != self.n_interior:
            raise ValueError(f"expected interior vector of length {self.n_interior}")
        full = np.full(v.shape[:-1] + (self.n_nodes,), fill, dtype=float)
        full[..., self.interior_flat] = v
        return full.reshape(v.shape[:-1] + self.shape)

    def full_to_interior(self, field: np.ndarray) -> np.ndarray:
        field = np.asarray(field)
        if field.shape[-self.dim:] != self.shape:
            raise ValueError(f"expected grid field of shape {self.shape}")
        flat = field.reshape(field.shape[: -self.dim] + (self.n_nodes,))
        return flat[..., self.interior_flat]

    def interior_depth(self) -> np.ndarray:
        """Node depth in index units: min over axes of distance to the wall
        in node counts. Shape `shape`; boundary nodes have depth 0."""
        idx = [np.minimum(np.arange(s), s - 1 - np.arange(s)) for s in self.shape]
        if self.dim == 1:
            return idx[0]
        return np.minimum(idx[0][:, None], idx[1][None, :])


def build_grid(domain: BoxDomain, n_per_axis) -> Grid:
    """Build a uniform grid; n_per_axis is the cell count per axis (int or tuple)."""
    return Grid(domain, n_per_axis)


def distance_to_boundary(domain: BoxDomain, x) -> np.ndarray:
    """min_i min(x_i - lower_i, upper_i - x_i) for x in the closed box.

    Zero exactly on the boundary. Raises for points outside the closed box.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[-1] != domain.dim:
        raise ValueError(f"points have dim {pts.shape[-1]}, domain has {domain.dim}")
    lo = np.asarray(domain.lower)
    up = np.asarray(domain.upper)
    if np.any(pts < lo) or np.any(pts > up):
        raise ValueError("point outside the closed box")
    d = np.minimum(pts - lo, up - pts).min(axis=-1)
    return float(d[0]) if squeeze else d
