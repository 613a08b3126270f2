"""Cartesian grid discretization and global operator assembly.

The extended domain is divided into ``n_e^3`` congruent cube elements.
Elements fully outside the physical domain are discarded; the remaining
(inside and cut) elements carry tensor-product shape functions.  Global
mass and stiffness matrices come from summing element matrices:

* uncut elements separate into products of 1D integrals.  For the
  Lagrange family the mass matrix uses the GLL rule of the basis order and
  is diagonal by construction; stiffness always uses an exact
  Gauss-Legendre rule.
* cut elements are integrated on an octree partition.  Leaves that are
  fully inside or outside keep the tensor structure with a constant
  indicator; leaves still cut at maximum depth classify every quadrature
  point individually.  The physical and fictitious contributions are kept
  separate, so any indicator value alpha (and any eigenvalue
  stabilization) can be applied afterwards without re-integrating.

Degrees of freedom are numbered lexicographically over the tensor function
grid and compacted to the functions supported on kept elements.  DOFs
touching at least one cut element form the ``c`` set (implicitly
integrated by the IMEX scheme); the rest form the ``d`` set, whose mass
rows are exactly diagonal for the Lagrange family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import geometry
from .basis import BasisSpec, gl_rule, gll_rule, lagrange_eval, open_uniform_knots
from .geometry import Box, ElementClass, ImmersedGeometry, octree_partition
from .quadrature import cut_cell_rule, tensor_rule
from .stabilization import StabilizationParams, evs_stabilize, hrz_lump, row_sum_lump

DEFAULT_OCTREE_DEPTH = 4


def ricker(t, f_e):
    """Ricker wavelet with center frequency ``f_e``, shifted so it starts
    near zero at t = 0."""
    t = np.asarray(t, dtype=float)
    t_s = 2.0 * np.sqrt(6.0) / (np.pi * f_e)
    q = np.pi * f_e * (t - t_s)
    return (1.0 - 2.0 * q * q) * np.exp(-q * q)


@dataclass(frozen=True)
class SourceSpec:
    """Spatial Gaussian source, defined in local (cube-centered) coordinates."""

    x_local: tuple
    sigma: float

    def evaluate(self, x_local):
        """exp(-d^2 / 2) with d the distance to the center in units of sigma."""
        x_local = np.asarray(x_local, dtype=float)
        d2 = np.sum((x_local - np.asarray(self.x_local)) ** 2, axis=-1)
        return np.exp(-0.5 * d2 / self.sigma**2)


def benchmark_source(l_p: float) -> SourceSpec:
    """The benchmark source: Gaussian of width 0.01 centered on a face."""
    return SourceSpec(x_local=(-l_p / 2.0, 0.0, 0.0), sigma=0.01)


@dataclass
class DofMap:
    """Lexicographic tensor numbering compacted to kept functions."""

    n1: int
    compact_of_lex: np.ndarray   # (n1^3,), -1 where discarded
    lex_of_compact: np.ndarray   # (n_dof,)
    c_idx: np.ndarray            # compact DOFs supported on a cut element
    d_idx: np.ndarray            # the complement

    @property
    def n_dof(self) -> int:
        return self.lex_of_compact.shape[0]

    def element_dofs(self, fx, fy, fz) -> np.ndarray:
        """Compact DOF ids of a function range triple, z fastest."""
        lex = (fx[:, None, None] * self.n1 + fy[None, :, None]) * self.n1 \
            + fz[None, None, :]
        return self.compact_of_lex[lex.ravel()]


@dataclass
class Grid:
    """Classified Cartesian element grid over the discretization domain.

    In immersed mode the grid covers the extended domain and elements are
    classified against the rotated cube (with tiny slivers below
    ``min_volume_fraction`` discarded).  In boundary-fitted mode the grid
    covers the physical cube itself in local coordinates and every element
    is inside.
    """

    geom: ImmersedGeometry
    spec: BasisSpec
    boundary_fitted: bool
    origin: np.ndarray
    h: float
    classes: np.ndarray          # (n_e, n_e, n_e) ElementClass values
    kept: np.ndarray             # (n_kept, 3) element indices, lexicographic

    @classmethod
    def build(cls, geom: ImmersedGeometry, spec: BasisSpec,
              boundary_fitted: bool = False,
              min_volume_fraction: float = geometry.MIN_VOLUME_FRACTION) -> "Grid":
        n_e = spec.n_e
        if boundary_fitted:
            origin = np.full(3, -geom.l_p / 2.0)
            h = geom.l_p / n_e
            classes = np.full((n_e,) * 3, ElementClass.INSIDE, dtype=np.int8)
        else:
            origin = np.zeros(3)
            h = geom.l_e / n_e
            idx = np.arange(n_e)
            I, J, K = np.meshgrid(idx, idx, idx, indexing="ij")
            lo = np.stack([I, J, K], axis=-1).reshape(-1, 3) * h + origin
            classes = geom.classify_boxes(lo, lo + h).reshape((n_e,) * 3)
            _discard_slivers(geom, classes, origin, h, min_volume_fraction)
        kept = np.argwhere(classes != ElementClass.OUTSIDE)
        return cls(geom=geom, spec=spec, boundary_fitted=boundary_fitted,
                   origin=origin, h=float(h), classes=classes, kept=kept)

    def element_box(self, ijk) -> Box:
        lo = self.origin + np.asarray(ijk, dtype=float) * self.h
        return Box(lo, lo + self.h)

    def to_local(self, x_global):
        """Physical-frame coordinates of grid-frame points."""
        if self.boundary_fitted:
            return np.asarray(x_global, dtype=float)
        return self.geom.to_local(x_global)

    def point_alpha_mask(self, x_grid):
        """Whether grid-frame points lie in the physical domain."""
        if self.boundary_fitted:
            return np.ones(np.asarray(x_grid).shape[:-1], dtype=bool)
        return self.geom.contains(x_grid)

    @property
    def n_kept(self) -> int:
        return self.kept.shape[0]

    @cached_property
    def knots(self) -> np.ndarray | None:
        """Knot vector shared by all directions (B-spline family only)."""
        if self.spec.family != "bspline":
            return None
        return open_uniform_knots(self.spec.n_e, self.spec.p, 0.0, 1.0)

    @cached_property
    def dofmap(self) -> DofMap:
        spec = self.spec
        n1 = spec.n_funcs_1d
        kept_mask = np.zeros((n1,) * 3, dtype=bool)
        c_mask = np.zeros((n1,) * 3, dtype=bool)
        m = spec.p + 1
        for i, j, k in self.kept:
            fx = spec.element_funcs_1d(i)[0]
            fy = spec.element_funcs_1d(j)[0]
            fz = spec.element_funcs_1d(k)[0]
            kept_mask[fx:fx + m, fy:fy + m, fz:fz + m] = True
            if self.classes[i, j, k] == ElementClass.CUT:
                c_mask[fx:fx + m, fy:fy + m, fz:fz + m] = True
        lex_of_compact = np.flatnonzero(kept_mask.ravel())
        compact_of_lex = np.full(n1**3, -1, dtype=np.int64)
        compact_of_lex[lex_of_compact] = np.arange(lex_of_compact.shape[0])
        c_idx = np.sort(compact_of_lex[np.flatnonzero(c_mask.ravel())])
        all_idx = np.arange(lex_of_compact.shape[0])
        d_idx = np.setdiff1d(all_idx, c_idx, assume_unique=True)
        return DofMap(n1=n1, compact_of_lex=compact_of_lex,
                      lex_of_compact=lex_of_compact, c_idx=c_idx, d_idx=d_idx)

    @property
    def n_dof(self) -> int:
        return self.dofmap.n_dof


def _discard_slivers(geom, classes, origin, h, min_volume_fraction):
    """Demote cut elements with negligible physical volume to outside.

    A cheap interior-sample bound skips the exact volume computation for
    all but the thinnest candidates: a sample point at least ``h/8`` from
    the element faces and with margin ``m`` inside the cube certifies a
    volume fraction of at least (4 pi / 3) (m/h)^3 / 8.
    """
    if min_volume_fraction <= 0.0:
        return
    cut = np.argwhere(classes == ElementClass.CUT)
    if cut.shape[0] == 0:
        return
    t = (2.0 * np.arange(4) + 1.0) / 8.0
    P = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3) * h
    margin_needed = 0.01 * h
    lo = origin + cut * h
    pts = lo[:, None, :] + P[None, :, :]
    loc = geom.to_local(pts.reshape(-1, 3)).reshape(cut.shape[0], -1, 3)
    margin = geom.l_p / 2.0 - np.max(np.abs(loc), axis=-1)
    suspicious = np.flatnonzero(np.max(margin, axis=1) < margin_needed)
    for s in suspicious:
        box = Box(lo[s], lo[s] + h)
        if geom.volume_fraction(box) < min_volume_fraction:
            classes[tuple(cut[s])] = ElementClass.OUTSIDE


@dataclass
class ElementIntegrals:
    """Reference-element integrals split into physical and fictitious parts.

    All matrices are (p+1)^3 square on the reference element; the physical
    scaling (rho, c, element size) is applied when combining.  ``K`` blocks
    already sum the three gradient directions with reference derivatives.
    """

    M_in: np.ndarray
    M_out: np.ndarray
    K_in: np.ndarray
    K_out: np.ndarray


class ElementIntegralCache:
    """Alpha-independent element integrals for one grid.

    Cut-element integrals are stored per element; uncut integrals are shared
    per boundary signature (a single entry for the Lagrange family).
    Building the cache is the expensive geometric step; assembling a system
    for given stabilization parameters afterwards is cheap, which is what
    makes parameter sweeps affordable.
    """

    def __init__(self, grid: Grid, octree_depth: int = DEFAULT_OCTREE_DEPTH,
                 q: int | None = None):
        self.grid = grid
        self.octree_depth = int(octree_depth)
        self.q = int(q) if q is not None else grid.spec.p + 1
        if self.octree_depth < 0:
            raise ValueError("octree depth must be >= 0")
        self._uncut: dict = {}
        self._cut: dict = {}
        self._build()

    # -- 1D ingredients ------------------------------------------------

    def _eval_1d(self, e: int, x):
        """Basis values/derivatives on element ``e`` at reference coords."""
        return basis_eval_1d(self.grid, e, x)

    def _signature(self, e: int):
        """Key identifying the 1D basis pattern of element ``e``."""
        spec = self.grid.spec
        if spec.family == "lagrange":
            return 0
        return (min(e, spec.p), min(spec.n_e - 1 - e, spec.p))

    def _uncut_1d(self, e: int):
        """Exact 1D mass/stiffness on the reference element (GL rule)."""
        key = ("1d", self._signature(e))
        if key not in self._uncut:
            g = gl_rule(self.q)
            V, D = self._eval_1d(e, g.nodes)
            m1 = (V * g.weights[:, None]).T @ V
            k1 = (D * g.weights[:, None]).T @ D
            self._uncut[key] = (m1, k1)
        return self._uncut[key]

    def uncut_element(self, ijk):
        """Shared reference matrices of an uncut element.

        Returns ``(M_repr, K)`` where ``M_repr`` is ``("diag", vector)`` for
        the Lagrange family (nodal GLL quadrature) and ``("dense", matrix)``
        for B-splines.
        """
        spec = self.grid.spec
        key = ("elem", tuple(self._signature(int(e)) for e in ijk))
        if key in self._uncut:
            return self._uncut[key]
        ones = [self._uncut_1d(int(e)) for e in ijk]
        (m1x, k1x), (m1y, k1y), (m1z, k1z) = ones
        K = (_kron3(k1x, m1y, m1z) + _kron3(m1x, k1y, m1z)
             + _kron3(m1x, m1y, k1z))
        if spec.family == "lagrange":
            w = gll_rule(spec.p).weights
            M_repr = ("diag", np.einsum("i,j,k->ijk", w, w, w).ravel())
        else:
            M_repr = ("dense", _kron3(m1x, m1y, m1z))
        self._uncut[key] = (M_repr, K)
        return self._uncut[key]

    # -- cut elements ---------------------------------------------------

    def cut_element(self, ijk) -> ElementIntegrals:
        return self._cut[tuple(int(v) for v in ijk)]

    def _build(self):
        grid = self.grid
        for ijk in grid.kept:
            if grid.classes[tuple(ijk)] == ElementClass.CUT:
                self._cut[tuple(int(v) for v in ijk)] = self._integrate_cut(ijk)
            else:
                self.uncut_element(ijk)

    def _dyadic_tables(self, e: int):
        """Per-interval 1D tables on the dyadic subdivision of [-1, 1].

        Interval ``(depth, i)`` maps to a flat id; tables hold mapped GL
        nodes, basis values/derivatives, and the 1D partial mass/stiffness
        of each interval.
        """
        D = self.octree_depth
        q = self.q
        g = gl_rule(q)
        starts, lengths, offsets = _dyadic_intervals(D)
        xi = starts[:, None] + (g.nodes[None, :] + 1.0) / 2.0 * lengths[:, None]
        V, Dv = self._eval_1d(e, xi.ravel())
        n = self.grid.spec.p + 1
        V = V.reshape(-1, q, n)
        Dv = Dv.reshape(-1, q, n)
        w = g.weights[None, :] * (lengths[:, None] / 2.0)
        m1 = np.einsum("lqa,lq,lqb->lab", V, w, V)
        k1 = np.einsum("lqa,lq,lqb->lab", Dv, w, Dv)
        return {"xi": xi, "w": w, "V": V, "D": Dv, "m1": m1, "k1": k1,
                "offsets": offsets}

    def _integrate_cut(self, ijk) -> ElementIntegrals:
        grid = self.grid
        n = grid.spec.p + 1
        n3 = n**3
        q = self.q
        box = grid.element_box(ijk)
        leaves = octree_partition(grid.geom, box, self.octree_depth)
        tabs = [self._dyadic_tables(int(e)) for e in ijk]

        # Flat interval ids per leaf and direction.
        A = 2.0 * (leaves.lo - box.lo) / (box.hi - box.lo) - 1.0
        pos = np.rint((A + 1.0) / 2.0 * (2.0 ** leaves.depth[:, None])).astype(int)
        offsets = tabs[0]["offsets"]
        ids = offsets[leaves.depth][:, None] + pos

        M_in = np.zeros((n3, n3))
        M_out = np.zeros((n3, n3))
        K_in = np.zeros((n3, n3))
        K_out = np.zeros((n3, n3))

        # Inside / outside leaves keep the tensor-product structure.
        for klass, M_acc, K_acc in ((ElementClass.INSIDE, M_in, K_in),
                                    (ElementClass.OUTSIDE, M_out, K_out)):
            sel = np.flatnonzero(leaves.cls == klass)
            if sel.shape[0] == 0:
                continue
            mx = tabs[0]["m1"][ids[sel, 0]]
            my = tabs[1]["m1"][ids[sel, 1]]
            mz = tabs[2]["m1"][ids[sel, 2]]
            kx = tabs[0]["k1"][ids[sel, 0]]
            ky = tabs[1]["k1"][ids[sel, 1]]
            kz = tabs[2]["k1"][ids[sel, 2]]
            M_acc += _kron3_sum(mx, my, mz)
            K_acc += _kron3_sum(kx, my, mz)
            K_acc += _kron3_sum(mx, ky, mz)
            K_acc += _kron3_sum(mx, my, kz)

        # Leaves still cut at maximum depth: pointwise indicator.
        sel = np.flatnonzero(leaves.cls == ElementClass.CUT)
        if sel.shape[0]:
            # Chunk so the (points x n^3) work arrays stay modest.
            chunk = max(1, int(2e7 // (q**3 * n3)))
            for s in range(0, sel.shape[0], chunk):
                part = sel[s:s + chunk]
                self._accumulate_pointwise(part, ids, tabs, box,
                                           M_in, M_out, K_in, K_out)
        return ElementIntegrals(M_in=M_in, M_out=M_out, K_in=K_in, K_out=K_out)

    def _accumulate_pointwise(self, sel, ids, tabs, box,
                              M_in, M_out, K_in, K_out):
        grid = self.grid
        n = grid.spec.p + 1
        n3 = n**3
        q = self.q
        L = sel.shape[0]
        Vd, Dd, xid, wd = [], [], [], []
        for d in range(3):
            t = tabs[d]
            idd = ids[sel, d]
            Vd.append(t["V"][idd])
            Dd.append(t["D"][idd])
            xid.append(t["xi"][idd])
            wd.append(t["w"][idd])
        V3 = np.einsum("lqa,lrb,lsc->lqrsabc", Vd[0], Vd[1], Vd[2])
        V3 = V3.reshape(L * q**3, n3)
        w3 = np.einsum("lq,lr,ls->lqrs", wd[0], wd[1], wd[2]).reshape(-1)
        # Global coordinates of all points, then the pointwise indicator.
        size = box.hi - box.lo
        gx = box.lo[0] + (xid[0] + 1.0) / 2.0 * size[0]
        gy = box.lo[1] + (xid[1] + 1.0) / 2.0 * size[1]
        gz = box.lo[2] + (xid[2] + 1.0) / 2.0 * size[2]
        pts = np.empty((L, q, q, q, 3))
        pts[..., 0] = gx[:, :, None, None]
        pts[..., 1] = gy[:, None, :, None]
        pts[..., 2] = gz[:, None, None, :]
        inside = grid.geom.contains(pts.reshape(-1, 3))
        w_in = np.where(inside, w3, 0.0)

        m_in = (V3 * w_in[:, None]).T @ V3
        m_all = (V3 * w3[:, None]).T @ V3
        M_in += m_in
        M_out += m_all - m_in
        del V3
        for d in range(3):
            parts = [Vd[0], Vd[1], Vd[2]]
            parts[d] = Dd[d]
            G = np.einsum("lqa,lrb,lsc->lqrsabc", *parts).reshape(L * q**3, n3)
            g_in = (G * w_in[:, None]).T @ G
            g_all = (G * w3[:, None]).T @ G
            K_in += g_in
            K_out += g_all - g_in
            del G


def _kron3(Ax, Ay, Az):
    n = Ax.shape[0]
    out = np.einsum("ad,be,cf->abcdef", Ax, Ay, Az)
    return out.reshape(n**3, n**3)


def _kron3_sum(Ax, Ay, Az):
    """Sum over a batch of 1D matrix triples of their Kronecker products."""
    n = Ax.shape[-1]
    out = np.einsum("lad,lbe,lcf->abcdef", Ax, Ay, Az)
    return out.reshape(n**3, n**3)


def basis_eval_1d(grid: Grid, e: int, x):
    """1D basis values/derivatives on element ``e`` at reference coords."""
    spec = grid.spec
    if spec.family == "lagrange":
        return lagrange_eval(gll_rule(spec.p).nodes, x)
    return spec.eval_element(e, x, knots=grid.knots)


def _dyadic_intervals(max_depth: int):
    """Start, length, and id offsets of all dyadic subintervals of [-1, 1]."""
    starts, lengths = [], []
    offsets = np.zeros(max_depth + 1, dtype=int)
    acc = 0
    for d in range(max_depth + 1):
        m = 2**d
        offsets[d] = acc
        acc += m
        L = 2.0 / m
        starts.append(-1.0 + L * np.arange(m))
        lengths.append(np.full(m, L))
    return np.concatenate(starts), np.concatenate(lengths), offsets


@dataclass
class DiscreteSystem:
    """Assembled semi-discrete system M psi'' + K psi = F(t) F_s."""

    M: sp.csr_matrix
    K: sp.csr_matrix
    F_s: np.ndarray
    grid: Grid
    params: StabilizationParams
    rho: float
    c: float

    @property
    def n_dof(self) -> int:
        return self.M.shape[0]

    @property
    def c_idx(self) -> np.ndarray:
        return self.grid.dofmap.c_idx

    @property
    def d_idx(self) -> np.ndarray:
        return self.grid.dofmap.d_idx


def element_matrices(grid: Grid, ijk, alpha: float,
                     octree_depth: int = DEFAULT_OCTREE_DEPTH,
                     q: int | None = None, rho: float = 1.0, c: float = 1.0,
                     cache: ElementIntegralCache | None = None):
    """Physical-scale element matrices ``(M_o, K_o, M_f, K_f)``.

    ``M_o, K_o`` weight the fictitious part by ``alpha``; ``M_f, K_f`` use
    an indicator of one everywhere (the "uncut" matrices used by the
    eigenvalue stabilization scaling).
    """
    if cache is None:
        cache = ElementIntegralCache(grid, octree_depth=octree_depth, q=q)
    ijk = tuple(int(v) for v in ijk)
    klass = ElementClass(int(grid.classes[ijk]))
    if klass == ElementClass.OUTSIDE:
        raise ValueError(f"element {ijk} was discarded from the discretization")
    h = grid.h
    sm = rho * (h / 2.0) ** 3
    sk = rho * c * c * (h / 2.0)
    if klass == ElementClass.INSIDE:
        M_repr, K_ref = cache.uncut_element(ijk)
        M = np.diag(M_repr[1]) if M_repr[0] == "diag" else M_repr[1]
        return sm * M, sk * K_ref, sm * M, sk * K_ref
    ints = cache.cut_element(ijk)
    M_o = sm * (ints.M_in + alpha * ints.M_out)
    K_o = sk * (ints.K_in + alpha * ints.K_out)
    M_f = sm * (ints.M_in + ints.M_out)
    K_f = sk * (ints.K_in + ints.K_out)
    return M_o, K_o, M_f, K_f


def assemble(grid: Grid, params: StabilizationParams, rho: float = 1.0,
             c: float = 1.0, source: SourceSpec | None = None,
             octree_depth: int = DEFAULT_OCTREE_DEPTH, q: int | None = None,
             cache: ElementIntegralCache | None = None) -> DiscreteSystem:
    """Assemble global mass/stiffness matrices and the spatial load.

    Passing a prebuilt ``cache`` reuses the alpha-independent element
    integrals, which makes stabilization parameter sweeps cheap.
    """
    if cache is None:
        cache = ElementIntegralCache(grid, octree_depth=octree_depth, q=q)
    dofmap = grid.dofmap
    spec = grid.spec
    n = spec.p + 1
    n3 = n**3
    h = grid.h
    sm = rho * (h / 2.0) ** 3
    sk = rho * c * c * (h / 2.0)
    lump = params.lumping

    rr_local, cc_local = np.divmod(np.arange(n3 * n3, dtype=np.int64), n3)

    m_rows, m_cols, m_vals = [], [], []
    k_rows, k_cols, k_vals = [], [], []

    def scatter_dense(dofs, mat, rows, cols, vals):
        rows.append(dofs[rr_local])
        cols.append(dofs[cc_local])
        vals.append(mat.ravel())

    def scatter_diag(dofs, vec):
        m_rows.append(dofs)
        m_cols.append(dofs)
        m_vals.append(vec)

    cut_ijks = []
    for ijk in grid.kept:
        tijk = tuple(int(v) for v in ijk)
        dofs = dofmap.element_dofs(spec.element_funcs_1d(tijk[0]),
                                   spec.element_funcs_1d(tijk[1]),
                                   spec.element_funcs_1d(tijk[2]))
        if grid.classes[tijk] == ElementClass.CUT:
            cut_ijks.append((tijk, dofs))
            continue
        M_repr, K_ref = cache.uncut_element(tijk)
        scatter_dense(dofs, sk * K_ref, k_rows, k_cols, k_vals)
        if M_repr[0] == "diag":
            scatter_diag(dofs, sm * M_repr[1])
        else:
            M_el = sm * M_repr[1]
            if lump == "row_sum":
                scatter_diag(dofs, row_sum_lump(M_el))
            elif lump == "hrz":
                scatter_diag(dofs, hrz_lump(M_el))
            else:
                scatter_dense(dofs, M_el, m_rows, m_cols, m_vals)

    if cut_ijks:
        M_o = np.empty((len(cut_ijks), n3, n3))
        M_f = np.empty_like(M_o)
        for e, (tijk, _) in enumerate(cut_ijks):
            ints = cache.cut_element(tijk)
            M_o[e] = sm * (ints.M_in + params.alpha * ints.M_out)
            M_f[e] = sm * (ints.M_in + ints.M_out)
            K_el = sk * (ints.K_in + params.alpha * ints.K_out)
            scatter_dense(cut_ijks[e][1], K_el, k_rows, k_cols, k_vals)
        if params.epsilon > 0.0:
            M_o = evs_stabilize(M_o, M_f, params.epsilon, params.f_lambda)
        for e, (tijk, dofs) in enumerate(cut_ijks):
            if lump == "row_sum":
                scatter_diag(dofs, row_sum_lump(M_o[e]))
            elif lump == "hrz":
                scatter_diag(dofs, hrz_lump(M_o[e]))
            else:
                scatter_dense(dofs, M_o[e], m_rows, m_cols, m_vals)

    n_dof = dofmap.n_dof
    M = _to_csr(m_rows, m_cols, m_vals, n_dof)
    K = _to_csr(k_rows, k_cols, k_vals, n_dof)
    if source is not None:
        F_s = spatial_load(grid, source, alpha=params.alpha, rho=rho,
                           octree_depth=cache.octree_depth, q=cache.q)
    else:
        F_s = np.zeros(n_dof)
    return DiscreteSystem(M=M, K=K, F_s=F_s, grid=grid, params=params,
                          rho=rho, c=c)


def _to_csr(rows, cols, vals, n_dof):
    A = sp.coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_dof, n_dof)).tocsr()
    A.eliminate_zeros()
    return A


class TensorSystem:
    """Separable global operators of a fully uncut tensor-product grid.

    On a boundary-fitted grid the global mass and stiffness factor into
    Kronecker products of one shared 1D mass and stiffness matrix, so the
    stiffness can be applied in O(n^{4/3}) without ever forming the 3D
    sparse matrix, and the Newmark iteration matrix S = M + beta dt^2 K
    can be inverted by diagonalizing the 1D generalized eigenproblem
    (fast diagonalization).  This is what makes fine reference runs cheap.
    """

    def __init__(self, grid: Grid, rho: float = 1.0, c: float = 1.0):
        if np.any(grid.classes != ElementClass.INSIDE):
            raise ValueError("tensor-product operators need a fully uncut grid")
        self.grid = grid
        self.rho = float(rho)
        self.c = float(c)
        spec = grid.spec
        n1 = spec.n_funcs_1d
        h = grid.h
        g = gl_rule(spec.p + 1)
        m1 = np.zeros((n1, n1))
        k1 = np.zeros((n1, n1))
        for e in range(spec.n_e):
            V, D = basis_eval_1d(grid, e, g.nodes)
            f0 = spec.element_funcs_1d(e)[0]
            s = slice(f0, f0 + spec.p + 1)
            m1[s, s] += (h / 2.0) * (V * g.weights[:, None]).T @ V
            k1[s, s] += (2.0 / h) * (D * g.weights[:, None]).T @ D
        self.m1 = m1
        self.k1 = k1
        self._m_is_diag = spec.family == "lagrange"
        if self._m_is_diag:
            # Nodal GLL quadrature diagonal, assembled exactly.  Only the
            # mass uses it; the stiffness factors stay fully integrated so
            # both operators match the element-by-element assembly.
            w = gll_rule(spec.p).weights
            d = np.zeros(n1)
            for e in range(spec.n_e):
                f0 = spec.element_funcs_1d(e)[0]
                d[f0:f0 + spec.p + 1] += (h / 2.0) * w
            self._m_diag = d
        self._eig = None

    @property
    def n_dof(self) -> int:
        return self.m1.shape[0] ** 3

    def mass_matrix(self) -> sp.csr_matrix:
        if self._m_is_diag:
            d = self._m_diag
            diag = self.rho * np.einsum("i,j,k->ijk", d, d, d).ravel()
            return sp.diags(diag).tocsr()
        m = sp.csr_matrix(self.m1)
        return (self.rho * sp.kron(sp.kron(m, m), m)).tocsr()

    def _apply_1d(self, A, P, axis):
        return np.moveaxis(np.tensordot(A, P, axes=(1, axis)), 0, axis)

    def k_matvec(self, x):
        n1 = self.m1.shape[0]
        P = np.asarray(x, dtype=float).reshape(n1, n1, n1)
        t = np.zeros_like(P)
        for axis in range(3):
            q = P
            for other in range(3):
                q = self._apply_1d(self.k1 if other == axis else self.m1,
                                   q, other)
            t += q
        return (self.rho * self.c * self.c) * t.ravel()

    def stiffness_operator(self):
        import scipy.sparse.linalg as spla
        n = self.n_dof
        return spla.LinearOperator((n, n), matvec=self.k_matvec,
                                   rmatvec=self.k_matvec, dtype=float)

    def _eig_1d(self):
        if self._eig is None:
            import scipy.linalg
            lam, Z = scipy.linalg.eigh(self.k1, self.m1)
            self._eig = (lam, Z)
        return self._eig

    def newmark_factorization(self, beta: float, dt: float):
        if self._m_is_diag:
            return _TensorCGFactorization(self, beta, dt)
        lam, Z = self._eig_1d()
        return _TensorFactorization(Z, lam, beta, dt, self.rho, self.c)


class _TensorFactorization:
    """Fast-diagonalization inverse of S = M + beta dt^2 K.

    Valid only when M shares the 1D factors of K (the dense-mass case);
    the generalized eigenbasis of (k1, m1) then diagonalizes both.
    """

    def __init__(self, Z, lam, beta, dt, rho, c):
        self.Z = Z
        n1 = Z.shape[0]
        self.n = n1**3
        L = lam[:, None, None] + lam[None, :, None] + lam[None, None, :]
        self._denom = rho * (1.0 + beta * dt * dt * c * c * L)

    def solve(self, b):
        Z = self.Z
        n1 = Z.shape[0]
        P = np.asarray(b, dtype=float).reshape(n1, n1, n1)
        for axis in range(3):
            P = np.moveaxis(np.tensordot(Z.T, P, axes=(1, axis)), 0, axis)
        P /= self._denom
        for axis in range(3):
            P = np.moveaxis(np.tensordot(Z, P, axes=(1, axis)), 0, axis)
        return P.ravel()


class _TensorCGFactorization:
    """Conjugate-gradient inverse of S = M + beta dt^2 K.

    The nodal-quadrature diagonal mass and the fully integrated stiffness
    share no tensor factors, so this S has no exact separable inverse.
    Preconditioning with M puts the spectrum in [1, 1 + beta dt^2 lam_max],
    which keeps the iteration count small at implicit step sizes.
    """

    RTOL = 1e-13

    def __init__(self, tensor: "TensorSystem", beta: float, dt: float):
        import scipy.sparse.linalg as spla
        d = tensor.rho * np.einsum(
            "i,j,k->ijk", tensor._m_diag, tensor._m_diag, tensor._m_diag
        ).ravel()
        self.n = d.shape[0]
        scale = beta * dt * dt
        kmv = tensor.k_matvec
        self._mdiag = d
        self._scale = scale
        self._op = spla.LinearOperator(
            (self.n, self.n), matvec=lambda x: d * x + scale * kmv(x),
            dtype=float)
        self._precond = spla.LinearOperator(
            (self.n, self.n), matvec=lambda x: x / d, dtype=float)

    def solve(self, b):
        import scipy.sparse.linalg as spla
        b = np.asarray(b, dtype=float)
        if self._scale == 0.0:
            return b / self._mdiag
        x, info = spla.cg(self._op, b, x0=b / self._mdiag, rtol=self.RTOL,
                          atol=0.0, maxiter=1000, M=self._precond)
        if info != 0:
            raise np.linalg.LinAlgError(
                f"iteration matrix solve did not converge (info={info})")
        return x


def spatial_load(grid: Grid, source: SourceSpec, alpha: float,
                 rho: float = 1.0, octree_depth: int = DEFAULT_OCTREE_DEPTH,
                 q: int | None = None) -> np.ndarray:
    """Load vector F_s[i] = integral of alpha_fcm rho f_s N_i.

    Elements farther than 14 sigma from the source center contribute below
    double precision resolution and are skipped.
    """
    spec = grid.spec
    q = q if q is not None else spec.p + 1
    dofmap = grid.dofmap
    n = spec.p + 1
    F = np.zeros(dofmap.n_dof)
    src_local = np.asarray(source.x_local, dtype=float)
    if grid.boundary_fitted:
        src_grid = src_local
    else:
        src_grid = grid.geom.to_global(src_local)
    g = gl_rule(q)
    cutoff = 14.0 * source.sigma
    for ijk in grid.kept:
        tijk = tuple(int(v) for v in ijk)
        box = grid.element_box(tijk)
        nearest = np.clip(src_grid, box.lo, box.hi)
        if np.linalg.norm(nearest - src_grid) > cutoff:
            continue
        if grid.classes[tijk] == ElementClass.CUT:
            rule = cut_cell_rule(grid.geom, box, q, octree_depth, alpha)
        else:
            rule = tensor_rule(g)
        x_grid = box.lo + (rule.xi + 1.0) / 2.0 * (box.hi - box.lo)
        f = source.evaluate(grid.to_local(x_grid))
        weights = rho * (grid.h / 2.0) ** 3 * rule.w * rule.alpha_fcm * f
        Vx, _ = basis_eval_1d(grid, tijk[0], rule.xi[:, 0])
        Vy, _ = basis_eval_1d(grid, tijk[1], rule.xi[:, 1])
        Vz, _ = basis_eval_1d(grid, tijk[2], rule.xi[:, 2])
        F_el = np.einsum("q,qa,qb,qc->abc", weights, Vx, Vy, Vz).ravel()
        dofs = dofmap.element_dofs(spec.element_funcs_1d(tijk[0]),
                                   spec.element_funcs_1d(tijk[1]),
                                   spec.element_funcs_1d(tijk[2]))
        np.add.at(F, dofs, F_el)
    return F
