"""Q1 finite elements on the fine Cartesian mesh.

Element matrices are exact (analytic integration on squares), so the
operator identities used by the tests hold to machine precision. Dirichlet
conditions are imposed by removing rows/columns, keeping the Hermitian
parts exactly symmetric. All operators act on the free-node vector.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import MeshHierarchy, ElementId

__all__ = [
    "FineSpace",
    "CoefficientField",
    "OperatorSet",
    "FemError",
    "SinCosSource",
    "BumpSource",
    "CellSamplesSource",
    "assemble_operators",
    "restricted_form",
    "load_vector",
    "v_norm",
    "reference_solve",
    "export_matrix_market",
]


class FemError(ValueError):
    """Invalid discretization input."""


# Exact Q1 element matrices on the unit square, corner order
# (0,0), (1,0), (0,1), (1,1). The stiffness matrix is size-independent in
# 2D; the mass matrix scales with h**2, the edge mass with h.
STIFF_REF = np.array([
    [4.0, -1.0, -1.0, -2.0],
    [-1.0, 4.0, -2.0, -1.0],
    [-1.0, -2.0, 4.0, -1.0],
    [-2.0, -1.0, -1.0, 4.0],
]) / 6.0

MASS_REF = np.array([
    [4.0, 2.0, 2.0, 1.0],
    [2.0, 4.0, 1.0, 2.0],
    [2.0, 1.0, 4.0, 2.0],
    [1.0, 2.0, 2.0, 4.0],
]) / 36.0

EDGE_MASS_REF = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0

# 3-point Gauss rule on [0,1] (degree-5 exactness) for load vectors.
_GPTS = np.array([0.5 - np.sqrt(0.15), 0.5, 0.5 + np.sqrt(0.15)])
_GWTS = np.array([5.0, 8.0, 5.0]) / 18.0


class FineSpace:
    """Nodal Q1 space on the fine mesh with boundary classification.

    Node ids run row-major over the (nf+1)^2 grid; ``free`` lists the
    active non-Dirichlet nodes, which index every operator and vector.
    """

    def __init__(self, hier: MeshHierarchy):
        self.hierarchy = hier
        nf = hier.nf
        npn = nf + 1
        self.nf = nf
        self.n_nodes = npn * npn

        gy, gx = np.divmod(np.arange(self.n_nodes), npn)
        self.node_gx = gx
        self.node_gy = gy
        self.node_x = gx * hier.h
        self.node_y = gy * hier.h

        # Active fine cells, row-major, with their corner connectivity.
        cell_mask = hier.active_fine
        flat_cells = np.flatnonzero(cell_mask.ravel())
        cy, cx = np.divmod(flat_cells, nf)
        self.cells = np.column_stack([cx, cy])
        base = cy * npn + cx
        self.conn = np.column_stack([base, base + 1, base + npn, base + npn + 1])

        # A node is part of the domain iff it touches an active cell; it is
        # on the hole boundary iff it also touches an in-grid inactive cell.
        touch_active = np.zeros((npn, npn), dtype=np.int32)
        touch_total = np.zeros((npn, npn), dtype=np.int32)
        act = cell_mask.astype(np.int32)
        ones = np.ones_like(act)
        for dy in (0, 1):
            for dx in (0, 1):
                touch_active[dy:dy + nf, dx:dx + nf] += act
                touch_total[dy:dy + nf, dx:dx + nf] += ones
        self.node_active = (touch_active.ravel() > 0)
        hole_boundary = self.node_active & (touch_total.ravel() > touch_active.ravel())

        dirichlet = np.zeros(self.n_nodes, dtype=bool)
        kinds = hier.boundary.kinds()
        side_sel = {
            "bottom": gy == 0,
            "top": gy == nf,
            "left": gx == 0,
            "right": gx == nf,
        }
        for side, sel in side_sel.items():
            if kinds[side] == "dirichlet":
                dirichlet |= sel
        dirichlet |= hole_boundary
        self.node_dirichlet = dirichlet & self.node_active

        self.free_mask = self.node_active & ~self.node_dirichlet
        self.free = np.flatnonzero(self.free_mask)
        self.n_free = len(self.free)
        self.node_to_free = np.full(self.n_nodes, -1, dtype=np.int64)
        self.node_to_free[self.free] = np.arange(self.n_free)

        # Robin edges as (node_a, node_b, cell_fx, cell_fy); the adjacent
        # fine cell locates the edge for element-restricted forms.
        edges = []
        rng = np.arange(nf)
        if kinds["bottom"] == "robin":
            a = rng
            edges.append(np.column_stack([a, a + 1, rng, np.zeros(nf, int)]))
        if kinds["top"] == "robin":
            a = nf * npn + rng
            edges.append(np.column_stack([a, a + 1, rng, np.full(nf, nf - 1)]))
        if kinds["left"] == "robin":
            a = rng * npn
            edges.append(np.column_stack([a, a + npn, np.zeros(nf, int), rng]))
        if kinds["right"] == "robin":
            a = rng * npn + nf
            edges.append(np.column_stack([a, a + npn, np.full(nf, nf - 1), rng]))
        if edges:
            edges = np.vstack(edges)
            keep = cell_mask[edges[:, 3], edges[:, 2]]
            self.robin_edges = edges[keep]
        else:
            self.robin_edges = np.zeros((0, 4), dtype=np.int64)

    def scatter(self, v_free: np.ndarray) -> np.ndarray:
        """Embed a free-node vector into the full node grid (zeros elsewhere)."""
        full = np.zeros(self.n_nodes, dtype=v_free.dtype)
        full[self.free] = v_free
        return full

    def restrict(self, v_full: np.ndarray) -> np.ndarray:
        return v_full[self.free]


class CoefficientField:
    """Piecewise-constant scalar diffusion coefficient on fine cells.

    ``values`` has shape (nf, nf), indexed [iy, ix]; values on inactive
    cells are ignored. Bounds are recorded and validated: the coefficient
    must be positive and bounded.
    """

    def __init__(self, values: np.ndarray, space: FineSpace):
        values = np.asarray(values, dtype=float)
        if values.shape != (space.nf, space.nf):
            raise FemError(f"coefficient grid {values.shape} does not match fine mesh")
        act = space.hierarchy.active_fine
        lo = float(values[act].min())
        hi = float(values[act].max())
        if not (0.0 < lo <= hi < np.inf):
            raise FemError(f"coefficient bounds ({lo}, {hi}) violate positivity")
        self.values = values
        self.gamma = lo
        self.gamma_prime = hi

    @classmethod
    def constant(cls, space: FineSpace, value: float = 1.0) -> "CoefficientField":
        return cls(np.full((space.nf, space.nf), float(value)), space)

    def cell_values(self, space: FineSpace) -> np.ndarray:
        return self.values[space.cells[:, 1], space.cells[:, 0]]


@dataclass
class OperatorSet:
    """Assembled fine-mesh operators for one wave number and coefficient."""

    space: FineSpace
    kappa: float
    coeff: CoefficientField
    K: sp.csr_matrix        # stiffness with coefficient
    K1: sp.csr_matrix       # stiffness with unit coefficient
    M: sp.csr_matrix        # mass
    B: sp.csr_matrix        # Robin boundary mass
    Aop: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        self.Aop = (self.K - self.kappa ** 2 * self.M
                    - 1j * self.kappa * self.B).tocsr()
        self.Aop.sum_duplicates()
        self.Aop.eliminate_zeros()


def _pair_matrix(space, conn, blocks, shape_n):
    """Assemble sum of 4x4 (or 2x2) element blocks into a free-node CSR."""
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).ravel()
    cols = np.tile(conn, (1, k)).ravel()
    data = blocks.ravel()
    fr = space.node_to_free[rows]
    fc = space.node_to_free[cols]
    keep = (fr >= 0) & (fc >= 0)
    mat = sp.coo_matrix((data[keep], (fr[keep], fc[keep])),
                        shape=(shape_n, shape_n)).tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


def _assemble_parts(space, coeff_cells, cell_sel=None, edge_sel=None):
    """Stiffness/mass/boundary-mass over a subset of cells and Robin edges."""
    conn = space.conn if cell_sel is None else space.conn[cell_sel]
    vals = coeff_cells if cell_sel is None else coeff_cells[cell_sel]
    h = space.hierarchy.h
    n = space.n_free
    K = _pair_matrix(space, conn, vals[:, None, None] * STIFF_REF[None], n)
    K1 = _pair_matrix(space, conn, np.broadcast_to(STIFF_REF, (len(conn), 4, 4)), n)
    M = _pair_matrix(space, conn, np.broadcast_to(h * h * MASS_REF, (len(conn), 4, 4)), n)
    edges = space.robin_edges if edge_sel is None else space.robin_edges[edge_sel]
    if len(edges):
        B = _pair_matrix(space, edges[:, :2],
                         np.broadcast_to(h * EDGE_MASS_REF, (len(edges), 2, 2)), n)
    else:
        B = sp.csr_matrix((n, n))
    return K, K1, M, B


def assemble_operators(space: FineSpace, kappa: float,
                       coeff: CoefficientField | None = None) -> OperatorSet:
    """Assemble K, K1, M, B and the combined operator K - kappa^2 M - i kappa B.

    ``kappa = 0`` selects the elliptic comparison mode (no Robin part
    required); for kappa > 0 a non-empty Robin boundary is enforced.
    """
    if kappa < 0:
        raise FemError(f"wave number must be >= 0, got {kappa}")
    if kappa > 0 and len(space.robin_edges) == 0:
        raise FemError("Helmholtz operator needs a non-empty Robin boundary")
    if coeff is None:
        coeff = CoefficientField.constant(space)
    K, K1, M, B = _assemble_parts(space, coeff.cell_values(space))
    return OperatorSet(space, float(kappa), coeff, K, K1, M, B)


def restricted_form(ops: OperatorSet, eid: ElementId) -> sp.csr_matrix:
    """Matrix of the form restricted to one coarse element.

    Integrates only over the element's fine cells and the boundary edges it
    contributes to the Robin part; rows/columns outside the element's nodes
    are zero. Summing over all elements of a level recovers ``ops.Aop``.
    """
    space = ops.space
    hier = space.hierarchy
    hier._check_element(eid)
    scale = hier.fine_per_side(eid.level)
    x0, x1 = eid.ix * scale, (eid.ix + 1) * scale
    y0, y1 = eid.iy * scale, (eid.iy + 1) * scale
    cx, cy = space.cells[:, 0], space.cells[:, 1]
    cell_sel = (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)
    ex, ey = space.robin_edges[:, 2], space.robin_edges[:, 3]
    edge_sel = (ex >= x0) & (ex < x1) & (ey >= y0) & (ey < y1)
    K, _, M, B = _assemble_parts(space, ops.coeff.cell_values(space),
                                 cell_sel, edge_sel)
    out = (K - ops.kappa ** 2 * M - 1j * ops.kappa * B).tocsr()
    out.sum_duplicates()
    return out


@dataclass(frozen=True)
class SinCosSource:
    """Smooth separable source sin(pi x1) * cos(pi x2)."""

    amplitude: float = 1.0

    def __call__(self, x, y):
        return self.amplitude * np.sin(np.pi * x) * np.cos(np.pi * y)


@dataclass(frozen=True)
class BumpSource:
    """Compactly supported mollifier bump around (x0, y0) of radius r.

    Value amplitude * exp(-1 / (1 - t^2)) with t = |x - x0| / r inside the
    ball, zero outside; smooth across the support boundary.
    """

    r: float
    x0: float
    y0: float
    amplitude: float = 1.0

    def __post_init__(self):
        if self.r <= 0:
            raise FemError(f"bump radius must be positive, got {self.r}")

    def __call__(self, x, y):
        t2 = ((x - self.x0) ** 2 + (y - self.y0) ** 2) / self.r ** 2
        out = np.zeros_like(np.asarray(t2, dtype=float))
        inside = t2 < 1.0
        out[inside] = self.amplitude * np.exp(-1.0 / (1.0 - t2[inside]))
        return out


class CellSamplesSource:
    """Piecewise-constant source given by one sample per fine cell."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=complex)

    def __call__(self, x, y):
        raise TypeError("cell samples are integrated exactly, not point-evaluated")


def load_vector(space: FineSpace, source) -> np.ndarray:
    """Right-hand side (f, phi_i) over free nodes.

    Callable sources are integrated with a tensor 3-point Gauss rule per
    cell; cell-sample sources exactly.
    """
    h = space.hierarchy.h
    cx = space.cells[:, 0][:, None]
    cy = space.cells[:, 1][:, None]
    load = np.zeros(space.n_free, dtype=complex)
    if isinstance(source, CellSamplesSource):
        vals = source.values[space.cells[:, 1], space.cells[:, 0]]
        contrib = (h * h / 4.0) * vals
        for corner in range(4):
            idx = space.node_to_free[space.conn[:, corner]]
            keep = idx >= 0
            np.add.at(load, idx[keep], contrib[keep])
        return load

    for qi, wx in zip(_GPTS, _GWTS):
        for qj, wy in zip(_GPTS, _GWTS):
            xq = (cx[:, 0] + qi) * h
            yq = (cy[:, 0] + qj) * h
            fval = source(xq, yq)
            shapes = np.array([(1 - qi) * (1 - qj), qi * (1 - qj),
                               (1 - qi) * qj, qi * qj])
            w = wx * wy * h * h
            for corner in range(4):
                idx = space.node_to_free[space.conn[:, corner]]
                keep = idx >= 0
                np.add.at(load, idx[keep], w * shapes[corner] * fval[keep])
    return load


def v_norm(v: np.ndarray, ops: OperatorSet, weighted: bool = False) -> float:
    """Energy norm sqrt(|grad v|^2 + kappa^2 |v|^2) of a free-node vector.

    The gradient part uses the unit-coefficient stiffness, or the weighted
    one when ``weighted`` is set.
    """
    stiff = ops.K if weighted else ops.K1
    grad2 = np.real(np.vdot(v, stiff @ v))
    mass2 = np.real(np.vdot(v, ops.M @ v))
    return float(np.sqrt(max(grad2 + ops.kappa ** 2 * mass2, 0.0)))


def reference_solve(ops: OperatorSet, rhs: np.ndarray) -> np.ndarray:
    """Direct sparse solve of the full fine-mesh system with residual check."""
    from .solver import sparse_lu

    lu = sparse_lu(ops.Aop.tocsc())
    x = lu.solve(rhs.astype(complex))
    nrm = np.linalg.norm(rhs)
    if nrm > 0:
        rel = np.linalg.norm(ops.Aop @ x - rhs) / nrm
        if rel > 1e-10:
            raise FemError(f"reference solve residual {rel:.2e} exceeds 1e-10")
    return x


def export_matrix_market(path, mat) -> None:
    """Write a sparse matrix in MatrixMarket coordinate text format."""
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(mat))
