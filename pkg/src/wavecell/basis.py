"""One-dimensional quadrature rules and shape function evaluation.

Two basis families are supported on tensor-product grids:

* ``"lagrange"``: Lagrange polynomials on Gauss-Lobatto-Legendre (GLL)
  points.  Evaluating the mass matrix with the GLL rule of the same order
  makes it diagonal (nodal quadrature); the stiffness matrix uses a
  Gauss-Legendre rule, which is exact for its integrand.
* ``"bspline"``: B-splines of maximal smoothness on open uniform knot
  vectors, C^(p-1) across element interfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Rule1D:
    """A 1D quadrature rule on the reference interval [-1, 1]."""

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.nodes.shape[0]


def gl_rule(q: int) -> Rule1D:
    """Gauss-Legendre rule with ``q`` points (exact through degree 2q-1)."""
    if q < 1:
        raise ValueError("need at least one quadrature point")
    x, w = np.polynomial.legendre.leggauss(q)
    return Rule1D(nodes=x, weights=w)


def _legendre_and_deriv(p, x):
    """Legendre polynomial P_p and its derivative at points x (recurrence)."""
    x = np.asarray(x, dtype=float)
    P_prev = np.ones_like(x)
    P = x.copy()
    for n in range(1, p):
        P_prev, P = P, ((2 * n + 1) * x * P - n * P_prev) / (n + 1)
    denom = x * x - 1.0
    at_end = denom == 0.0
    dP = np.where(at_end,
                  np.sign(x) ** (p - 1) * (0.5 * p * (p + 1)),
                  p * (x * P - P_prev) / np.where(at_end, 1.0, denom))
    return P, dP


def gll_rule(p: int) -> Rule1D:
    """Gauss-Lobatto-Legendre rule with p+1 points (endpoints included).

    Interior nodes are the roots of P_p', found by Newton iteration from
    Chebyshev-Lobatto initial guesses; weights are 2 / (p (p+1) P_p(x)^2).
    Closed forms are used for p <= 2.
    """
    if p < 1:
        raise ValueError("GLL rule needs polynomial degree >= 1")
    if p == 1:
        return Rule1D(nodes=np.array([-1.0, 1.0]), weights=np.array([1.0, 1.0]))
    if p == 2:
        return Rule1D(nodes=np.array([-1.0, 0.0, 1.0]),
                      weights=np.array([1.0, 4.0, 1.0]) / 3.0)
    x = -np.cos(np.pi * np.arange(1, p) / p)
    for _ in range(100):
        P, dP = _legendre_and_deriv(p, x)
        # Newton on f = (1-x^2) P_p'; Legendre's ODE gives f' = -p(p+1) P_p.
        dx = -(1.0 - x * x) * dP / (p * (p + 1) * P)
        x = x - dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    nodes = np.concatenate(([-1.0], x, [1.0]))
    P, _ = _legendre_and_deriv(p, nodes)
    weights = 2.0 / (p * (p + 1) * P * P)
    return Rule1D(nodes=nodes, weights=weights)


def lagrange_eval(nodes, x):
    """Values and first derivatives of the Lagrange basis on ``nodes``.

    Parameters
    ----------
    nodes : array_like, shape (n,)
        Distinct interpolation nodes.
    x : array_like, shape (m,)
        Evaluation points.

    Returns
    -------
    V, D : ndarray, shape (m, n)
        ``V[i, j] = L_j(x_i)`` and ``D[i, j] = L_j'(x_i)``.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = nodes.shape[0]
    diff = x[:, None] - nodes[None, :]          # (m, n)
    denom = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(denom, 1.0)
    scale = np.prod(denom, axis=1)              # prod_{m != j} (x_j - x_m)
    V = np.empty((x.shape[0], n))
    D = np.zeros((x.shape[0], n))
    for j in range(n):
        others = [m for m in range(n) if m != j]
        num = np.ones_like(x)
        for m in others:
            num = num * diff[:, m]
        V[:, j] = num / scale[j]
        for k in others:
            term = np.ones_like(x)
            for m in others:
                if m != k:
                    term = term * diff[:, m]
            D[:, j] += term
        D[:, j] /= scale[j]
    return V, D


def open_uniform_knots(n_e: int, p: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Open uniform knot vector with ``n_e`` spans on [a, b], degree ``p``.

    End knots repeat p+1 times; interior knots are simple, giving C^(p-1)
    continuity and ``n_e + p`` basis functions.
    """
    if n_e < 1 or p < 1:
        raise ValueError("need n_e >= 1 and p >= 1")
    if not b > a:
        raise ValueError("need b > a")
    interior = a + (b - a) * np.arange(1, n_e) / n_e
    return np.concatenate((np.full(p + 1, a), interior, np.full(p + 1, b)))


def find_span(knots, p, x):
    """Index of the knot span containing x (clamped to valid spans)."""
    n = knots.shape[0] - p - 1          # number of basis functions
    x = np.asarray(x, dtype=float)
    span = np.searchsorted(knots, x, side="right") - 1
    return np.clip(span, p, n - 1)


def bspline_eval(knots, p, x):
    """Nonzero B-spline basis values and derivatives at points ``x``.

    Uses the Cox-de Boor recursion on the ``p+1`` functions supported on
    each point's knot span.

    Returns
    -------
    span : ndarray, shape (m,)
        Knot span index per point; the nonzero functions are
        ``span - p, ..., span``.
    V, D : ndarray, shape (m, p+1)
        Values and first derivatives of those functions.
    """
    knots = np.asarray(knots, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    span = find_span(knots, p, x)
    m = x.shape[0]
    N = np.zeros((m, p + 1))
    N[:, 0] = 1.0
    left = np.empty((m, p + 1))
    right = np.empty((m, p + 1))
    for j in range(1, p + 1):
        left[:, j] = x - knots[span + 1 - j]
        right[:, j] = knots[span + j] - x
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = N[:, r] / denom
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
        if j == p - 1:
            N_low = N[:, :p].copy()     # degree p-1 basis, for derivatives
    if p == 1:
        N_low = np.ones((m, 1))
    D = np.zeros((m, p + 1))
    for r in range(p + 1):
        if r > 0:
            denom = knots[span + r] - knots[span + r - p]
            D[:, r] += np.where(denom > 0, p * N_low[:, r - 1] / np.where(denom > 0, denom, 1.0), 0.0)
        if r < p:
            denom = knots[span + r + 1] - knots[span + r + 1 - p]
            D[:, r] -= np.where(denom > 0, p * N_low[:, r] / np.where(denom > 0, denom, 1.0), 0.0)
    return span, N, D


@dataclass(frozen=True)
class BasisSpec:
    """Discretization choice: basis family, degree, elements per direction."""

    family: str
    p: int
    n_e: int

    def __post_init__(self):
        if self.family not in ("lagrange", "bspline"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.p < 1:
            raise ValueError("polynomial degree must be >= 1")
        if self.n_e < 1:
            raise ValueError("need at least one element per direction")

    @property
    def n_funcs_1d(self) -> int:
        """Global basis functions per direction."""
        if self.family == "lagrange":
            return self.n_e * self.p + 1
        return self.n_e + self.p

    @property
    def funcs_per_element(self) -> int:
        """Nonzero functions per element per direction (always p+1)."""
        return self.p + 1

    def element_funcs_1d(self, e: int) -> np.ndarray:
        """Global indices of the functions supported on element ``e``."""
        if self.family == "lagrange":
            return np.arange(e * self.p, e * self.p + self.p + 1)
        return np.arange(e, e + self.p + 1)

    def eval_element(self, e: int, xi, knots=None):
        """Basis values/derivatives on element ``e`` at reference coords xi.

        ``xi`` lives on [-1, 1]; derivatives are with respect to xi.  For
        B-splines the caller passes the direction's knot vector.
        """
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        if self.family == "lagrange":
            return lagrange_eval(gll_rule(self.p).nodes, xi)
        if knots is None:
            raise ValueError("bspline evaluation needs the knot vector")
        a = knots[self.p + e]
        b = knots[self.p + e + 1]
        x = a + (b - a) * (xi + 1.0) / 2.0
        # Clamp to the span so points at +-1 do not bleed into a neighbor.
        x = np.clip(x, a, np.nextafter(b, a))
        span, V, D = bspline_eval(knots, self.p, x)
        if not np.all(span == self.p + e):
            raise RuntimeError("evaluation points left the requested span")
        return V, D * (b - a) / 2.0
