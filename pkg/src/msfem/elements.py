"""Reference simplex Lagrange elements (degrees 1 and 2) and quadrature.

Quadrature rules are built by collapsing tensor Gauss/Gauss-Jacobi rules onto
the simplex, which makes them exact to the requested degree by construction
instead of relying on hard-coded point tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = [
    "ReferenceElement",
    "QuadratureRule",
    "AffineMap",
    "reference_element",
    "reference_basis",
    "quadrature_rule",
    "affine_map",
    "push_gradients",
]

MAX_QUADRATURE_DEGREE = 30

_EDGES = {2: [(0, 1), (0, 2), (1, 2)], 3: [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]}


@dataclass(frozen=True)
class ReferenceElement:
    """Nodal Lagrange basis on the reference simplex.

    ``vertex_weights`` expresses each node as an integer combination of the
    cell vertices: node barycentric coords = vertex_weights / degree.  This is
    what lets global node coordinates stay on an exact integer lattice.
    """

    dim: int
    degree: int
    node_count: int
    nodes_bary: np.ndarray      # (nloc, d+1)
    vertex_weights: np.ndarray  # (nloc, d+1) int

    def tabulate(self, points_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Basis values and reference-coordinate gradients at the given points.

        Returns (values (npts, nloc), gradients (npts, nloc, dim)).
        """
        pts = np.atleast_2d(np.asarray(points_ref, dtype=float))
        lam, dlam = _barycentric(self.dim, pts)
        npts = pts.shape[0]
        vals = np.empty((npts, self.node_count))
        grads = np.empty((npts, self.node_count, self.dim))
        if self.degree == 1:
            for i in range(self.dim + 1):
                vals[:, i] = lam[:, i]
                grads[:, i, :] = dlam[i]
        else:
            nv = self.dim + 1
            for i in range(nv):
                vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
                grads[:, i, :] = (4.0 * lam[:, i] - 1.0)[:, None] * dlam[i]
            for e, (a, b) in enumerate(_EDGES[self.dim]):
                j = nv + e
                vals[:, j] = 4.0 * lam[:, a] * lam[:, b]
                grads[:, j, :] = 4.0 * (
                    lam[:, b][:, None] * dlam[a] + lam[:, a][:, None] * dlam[b]
                )
        return vals, grads


def _barycentric(dim: int, pts: np.ndarray):
    """Barycentric coords and their (constant) reference gradients."""
    lam = np.empty((pts.shape[0], dim + 1))
    lam[:, 0] = 1.0 - pts.sum(axis=1)
    lam[:, 1:] = pts
    dlam = [np.full(dim, -1.0)] + [np.eye(dim)[i] for i in range(dim)]
    return lam, dlam


def reference_element(dim: int, degree: int) -> ReferenceElement:
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if degree not in (1, 2):
        raise ValueError(f"element degree must be 1 or 2, got {degree}")
    nv = dim + 1
    if degree == 1:
        weights = np.eye(nv, dtype=int)
    else:
        rows = [2 * np.eye(nv, dtype=int)[i] for i in range(nv)]
        for a, b in _EDGES[dim]:
            w = np.zeros(nv, dtype=int)
            w[a] = w[b] = 1
            rows.append(w)
        weights = np.array(rows)
    return ReferenceElement(
        dim=dim,
        degree=degree,
        node_count=weights.shape[0],
        nodes_bary=weights / float(degree),
        vertex_weights=weights,
    )


def reference_basis(dim: int, degree: int, point_bary) -> tuple[np.ndarray, np.ndarray]:
    """Values and reference gradients of all nodal basis functions at one
    barycentric point."""
    elem = reference_element(dim, degree)
    bary = np.asarray(point_bary, dtype=float)
    vals, grads = elem.tabulate(bary[1:][None, :])
    return vals[0], grads[0]


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference simplex, exact for total degree <= degree."""

    dim: int
    degree: int
    points_ref: np.ndarray   # (npts, d)
    weights: np.ndarray      # (npts,), sum = 1/d!

    @property
    def points_bary(self) -> np.ndarray:
        lam0 = 1.0 - self.points_ref.sum(axis=1)
        return np.column_stack([lam0, self.points_ref])


def _gauss01(n: int):
    x, w = roots_legendre(n)
    return (x + 1.0) / 2.0, w / 2.0


def _jacobi01(n: int, alpha: int):
    # weight (1-x)^alpha on [0,1]
    x, w = roots_jacobi(n, alpha, 0.0)
    return (x + 1.0) / 2.0, w / 2.0 ** (alpha + 1)


def quadrature_rule(dim: int, degree: int) -> QuadratureRule:
    """Collapsed Gauss-Jacobi rule on the reference triangle/tetrahedron."""
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if not 0 <= degree <= MAX_QUADRATURE_DEGREE:
        raise ValueError(
            f"quadrature degree {degree} unsupported (max {MAX_QUADRATURE_DEGREE})"
        )
    n = max(1, math.ceil((degree + 1) / 2))
    if dim == 2:
        u, wu = _gauss01(n)
        v, wv = _jacobi01(n, 1)
        U, V = np.meshgrid(u, v, indexing="ij")
        W = np.outer(wu, wv)
        x = U * (1.0 - V)
        pts = np.column_stack([x.ravel(), V.ravel()])
    else:
        u, wu = _gauss01(n)
        v, wv = _jacobi01(n, 1)
        w, ww = _jacobi01(n, 2)
        U, V, Wc = np.meshgrid(u, v, w, indexing="ij")
        Wt = wu[:, None, None] * wv[None, :, None] * ww[None, None, :]
        x = U * (1.0 - V) * (1.0 - Wc)
        y = V * (1.0 - Wc)
        pts = np.column_stack([x.ravel(), y.ravel(), Wc.ravel()])
        W = Wt
    return QuadratureRule(dim=dim, degree=degree, points_ref=pts, weights=W.ravel())


@dataclass(frozen=True)
class AffineMap:
    """Reference-to-physical affine map of one simplex."""

    vertices: np.ndarray   # (d+1, d)
    jacobian: np.ndarray   # (d, d)
    det: float
    inv_transpose: np.ndarray

    def to_physical(self, points_ref: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points_ref)
        return self.vertices[0] + pts @ self.jacobian.T


def affine_map(vertex_coords: np.ndarray) -> AffineMap:
    verts = np.asarray(vertex_coords, dtype=float)
    J = (verts[1:] - verts[0]).T
    det = float(np.linalg.det(J))
    if abs(det) < 1e-14:
        raise ValueError("degenerate cell: |det J| < 1e-14")
    return AffineMap(
        vertices=verts, jacobian=J, det=det, inv_transpose=np.linalg.inv(J).T
    )


def push_gradients(amap: AffineMap, ref_gradients: np.ndarray) -> np.ndarray:
    """Map reference gradients to physical ones: grad_x = J^{-T} grad_ref."""
    return np.asarray(ref_gradients) @ amap.inv_transpose.T
