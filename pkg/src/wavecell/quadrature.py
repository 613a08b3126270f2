"""Element quadrature rules, including octree-composed rules for cut cells.

Rules live on the reference element [-1, 1]^3.  Every point carries an
indicator factor ``alpha_fcm``: 1 inside the physical domain and the small
stabilization parameter ``alpha`` in the fictitious part.  The indicator
multiplies every integrand (mass, stiffness, load), which is what makes the
fictitious extension both stable and consistent.

Cut elements are partitioned by an octree; inside/outside leaves receive a
tensor Gauss-Legendre rule with a constant indicator, while leaves still cut
at the maximum depth classify each quadrature point individually.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import Rule1D, gl_rule
from .geometry import Box, ElementClass, ImmersedGeometry, octree_partition


@dataclass
class ElementRule:
    """Quadrature points on the reference element.

    Attributes
    ----------
    xi : ndarray, shape (n, 3)
        Reference coordinates in [-1, 1]^3.
    w : ndarray, shape (n,)
        Weights in the reference measure (an uncut rule sums to 8).
    alpha_fcm : ndarray, shape (n,)
        Indicator factor per point.
    """

    xi: np.ndarray
    w: np.ndarray
    alpha_fcm: np.ndarray

    def __len__(self):
        return self.w.shape[0]


def tensor_rule(rule: Rule1D, alpha_fcm: float = 1.0) -> ElementRule:
    """Tensor-product rule on [-1, 1]^3 with a constant indicator."""
    x = rule.nodes
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    xi = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    w = np.einsum("i,j,k->ijk", rule.weights, rule.weights, rule.weights).ravel()
    return ElementRule(xi=xi, w=w, alpha_fcm=np.full(w.shape, float(alpha_fcm)))


def map_to_subcell(rule: Rule1D, a: float, b: float):
    """1D rule nodes/weights mapped from [-1, 1] onto [a, b]."""
    nodes = a + (b - a) * (rule.nodes + 1.0) / 2.0
    weights = rule.weights * (b - a) / 2.0
    return nodes, weights


def cut_cell_rule(geom: ImmersedGeometry, element: Box, q: int, max_depth: int,
                  alpha: float) -> ElementRule:
    """Octree-composed rule for a cut element.

    Parameters
    ----------
    geom : ImmersedGeometry
        The immersed domain the element is cut by.
    element : Box
        The element in global coordinates.
    q : int
        Gauss-Legendre points per direction in every leaf.
    max_depth : int
        Octree subdivision depth (0 keeps the element as a single leaf).
    alpha : float
        Indicator value in the fictitious part, in (0, 1].
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    leaves = octree_partition(geom, element, max_depth)
    g = gl_rule(q)
    size = element.hi - element.lo

    xi_parts, w_parts, a_parts = [], [], []
    for i in range(len(leaves)):
        # Leaf bounds in reference coordinates of the element.
        A = 2.0 * (leaves.lo[i] - element.lo) / size - 1.0
        B = 2.0 * (leaves.hi[i] - element.lo) / size - 1.0
        nx, wx = map_to_subcell(g, A[0], B[0])
        ny, wy = map_to_subcell(g, A[1], B[1])
        nz, wz = map_to_subcell(g, A[2], B[2])
        X, Y, Z = np.meshgrid(nx, ny, nz, indexing="ij")
        xi = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
        w = np.einsum("i,j,k->ijk", wx, wy, wz).ravel()
        c = ElementClass(int(leaves.cls[i]))
        if c == ElementClass.INSIDE:
            a_pt = np.ones(w.shape)
        elif c == ElementClass.OUTSIDE:
            a_pt = np.full(w.shape, alpha)
        else:
            # Leaf still cut at max depth: classify each point.
            x_global = element.lo + (xi + 1.0) / 2.0 * size
            a_pt = np.where(geom.contains(x_global), 1.0, alpha)
        xi_parts.append(xi)
        w_parts.append(w)
        a_parts.append(a_pt)
    return ElementRule(
        xi=np.concatenate(xi_parts),
        w=np.concatenate(w_parts),
        alpha_fcm=np.concatenate(a_parts),
    )


def indicator_volume(rule: ElementRule) -> float:
    """Indicator-weighted reference volume, sum(w * alpha_fcm).

    An uncut inside rule gives 8; a cut rule gives a value between
    8 * alpha and 8 that approximates the covered reference volume.
    """
    return float(np.dot(rule.w, rule.alpha_fcm))
