"""Scale-transfer operators between coarse levels and the fine space.

Per level this builds, as sparse matrices over free fine nodes:

* the element-average projection onto piecewise constants,
* its right inverse lifting averages to conforming polynomial bubbles
  (rescaled so the discrete right-inverse identity is exact, not O(h^2)),
* the node-averaging extension of element constants to a conforming Q1
  function (zero at all boundary nodes),
* the average-preserving stable projection combining the two,
* the orthonormal piecewise-constant wavelet basis (level 1: normalized
  indicators; higher levels: zero-mean sign patterns on the four children
  of a parent element, patterns ordered (0,1), (1,0), (1,1), parents
  row-major).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import FineSpace
from .mesh import ElementId

__all__ = ["HaarFunction", "TransferSet", "TransferError"]

# Fixed enumeration of the non-constant sign patterns for one parent.
SIGN_PATTERNS = ((0, 1), (1, 0), (1, 1))


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class HaarFunction:
    """One member of the piecewise-constant wavelet basis.

    ``parent`` is the carrying element: a level-1 element for level 1
    (pattern None, normalized indicator), else an element of the previous
    level whose four children carry the signs. Unit discrete L2 norm.
    """

    level: int
    parent: ElementId
    pattern: tuple | None
    norm: float


def _bubble(x):
    return 6.0 * x * (1.0 - x)


class TransferSet:
    """All per-level transfer operators for one fine space."""

    def __init__(self, space: FineSpace):
        self.space = space
        self.hierarchy = space.hierarchy
        L = self.hierarchy.L
        self._pw_mean = []
        self._lift = []
        self._node_avg = []
        self._haar = []
        self._synth = []
        for level in range(1, L + 1):
            self._pw_mean.append(self._build_pw_mean(level))
            self._lift.append(self._build_lift(level))
            self._node_avg.append(self._build_node_avg(level))
            funcs, synth = self._build_haar(level)
            self._haar.append(funcs)
            self._synth.append(synth)

    # -- construction ---------------------------------------------------

    def _build_pw_mean(self, level):
        hier = self.hierarchy
        space = self.space
        owner = hier.fine_cell_owner(level).ravel()
        flat_to_idx = hier._flat_to_index[level - 1]
        cells_flat = space.cells[:, 1] * hier.nf + space.cells[:, 0]
        rows_per_cell = flat_to_idx[owner[cells_flat]]
        H = hier.level_size(level)
        w = hier.h ** 2 / 4.0 / H ** 2
        rows, cols, data = [], [], []
        for corner in range(4):
            fidx = space.node_to_free[space.conn[:, corner]]
            keep = fidx >= 0
            rows.append(rows_per_cell[keep])
            cols.append(fidx[keep])
            data.append(np.full(keep.sum(), w))
        mat = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(hier.n_active(level), space.n_free)).tocsr()
        mat.sum_duplicates()
        return mat

    def _build_lift(self, level):
        hier = self.hierarchy
        space = self.space
        scale = hier.fine_per_side(level)
        if scale < 2:
            # Bubbles have no interior node to live on; leave unbuilt.
            return None
        off = np.arange(1, scale)
        vals1d = _bubble(off / scale)
        local = np.outer(vals1d, vals1d)  # [oy, ox]
        ox, oy = np.meshgrid(off, off, indexing="xy")
        elems = hier.active_elements(level)
        npn = hier.nf + 1
        gx = (elems[:, 0][:, None] * scale + ox.ravel()[None, :]).ravel()
        gy = (elems[:, 1][:, None] * scale + oy.ravel()[None, :]).ravel()
        fidx = space.node_to_free[gy * npn + gx]
        if np.any(fidx < 0):
            raise TransferError("bubble node unexpectedly constrained")
        cols = np.repeat(np.arange(len(elems)), len(off) ** 2)
        data = np.tile(local.ravel(), len(elems))
        unscaled = sp.coo_matrix((data, (fidx, cols)),
                                 shape=(space.n_free, hier.n_active(level))).tocsc()
        # Rescale each column by its own discrete mean so the average
        # projection composed with the lift is the identity bit-for-bit.
        means = self._pw_mean[level - 1] @ unscaled
        d = means.diagonal()
        return (unscaled @ sp.diags(1.0 / d)).tocsc()

    def _build_node_avg(self, level):
        hier = self.hierarchy
        space = self.space
        n = hier.grid_n(level)
        scale = hier.fine_per_side(level)
        active = hier.active[level - 1]
        flat_to_idx = hier._flat_to_index[level - 1]

        # Interior coarse nodes: all four surrounding cells in-grid and
        # active; everything else (outer boundary, hole boundary) is zero.
        rows, cols, data = [], [], []
        node_n = n + 1
        jy, jx = np.mgrid[1:n, 1:n]
        jx = jx.ravel()
        jy = jy.ravel()
        around = np.stack([
            (jy - 1) * n + (jx - 1), (jy - 1) * n + jx,
            jy * n + (jx - 1), jy * n + jx,
        ], axis=1)
        ok = active.ravel()[around].all(axis=1)
        nid = jy[ok] * node_n + jx[ok]
        for k in range(4):
            rows.append(nid)
            cols.append(flat_to_idx[around[ok, k]])
            data.append(np.full(ok.sum(), 0.25))
        avg = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(node_n * node_n, hier.n_active(level))).tocsr()

        # Bilinear prolongation of the coarse Q1 function to free fine nodes.
        gx = space.node_gx[space.free]
        gy = space.node_gy[space.free]
        cx = np.minimum(gx // scale, n - 1)
        cy = np.minimum(gy // scale, n - 1)
        sx = (gx - cx * scale) / scale
        sy = (gy - cy * scale) / scale
        corner_nodes = [cy * node_n + cx, cy * node_n + cx + 1,
                        (cy + 1) * node_n + cx, (cy + 1) * node_n + cx + 1]
        weights = [(1 - sx) * (1 - sy), sx * (1 - sy), (1 - sx) * sy, sx * sy]
        r = np.concatenate([np.arange(space.n_free)] * 4)
        c = np.concatenate(corner_nodes)
        d = np.concatenate(weights)
        keep = d != 0.0
        prolong = sp.coo_matrix((d[keep], (r[keep], c[keep])),
                                shape=(space.n_free, node_n * node_n)).tocsr()
        out = (prolong @ avg).tocsr()
        out.eliminate_zeros()
        return out

    def _build_haar(self, level):
        hier = self.hierarchy
        n_act = hier.n_active(level)
        funcs = []
        rows, cols, data = [], [], []
        if level == 1:
            H = hier.level_size(1)
            norm = 1.0 / H
            for j, (ix, iy) in enumerate(hier.active_elements(1)):
                funcs.append(HaarFunction(1, ElementId(1, int(ix), int(iy)), None, norm))
                rows.append(j)  # function j is carried by active element j
                cols.append(j)
                data.append(norm)
            synth = sp.coo_matrix((data, (rows, cols)), shape=(n_act, len(funcs))).tocsc()
            return funcs, synth

        Hp = hier.level_size(level - 1)
        norm = 1.0 / Hp
        flat_to_idx = hier._flat_to_index[level - 1]
        n = hier.grid_n(level)
        j = 0
        for (px, py) in hier.active_elements(level - 1):
            parent = ElementId(level - 1, int(px), int(py))
            for pattern in SIGN_PATTERNS:
                funcs.append(HaarFunction(level, parent, pattern, norm))
                for cy_ in (0, 1):
                    for cx_ in (0, 1):
                        sgn = 1.0
                        if pattern[0] == 1 and cx_ == 1:
                            sgn = -sgn
                        if pattern[1] == 1 and cy_ == 1:
                            sgn = -sgn
                        child_flat = (2 * py + cy_) * n + (2 * px + cx_)
                        rows.append(flat_to_idx[child_flat])
                        cols.append(j)
                        data.append(sgn * norm)
                j += 1
        synth = sp.coo_matrix((data, (rows, cols)), shape=(n_act, len(funcs))).tocsc()
        return funcs, synth

    # -- queries ----------------------------------------------------------

    def haar_basis(self, level):
        self.hierarchy._check_level(level)
        return self._haar[level - 1]

    def haar_count(self, level) -> int:
        return len(self._haar[level - 1])

    def haar_synthesis(self, coeffs, level):
        """Expand wavelet coefficients into element values on the level grid."""
        synth = self._synth[level - 1]
        coeffs = np.asarray(coeffs) if not sp.issparse(coeffs) else coeffs
        if coeffs.shape[0] != synth.shape[1]:
            raise TransferError(
                f"expected {synth.shape[1]} coefficients, got {coeffs.shape[0]}")
        return synth @ coeffs

    def synthesis_matrix(self, level) -> sp.csc_matrix:
        return self._synth[level - 1]

    def project_pw_constant(self, v, level):
        """Exact discrete element averages of a fine function."""
        return self._pw_mean[level - 1] @ v

    def mean_matrix(self, level) -> sp.csr_matrix:
        return self._pw_mean[level - 1]

    def bubble_lift(self, q, level):
        """Lift element averages to fine bubble interpolants (right inverse)."""
        lift = self._lift[level - 1]
        if lift is None:
            raise TransferError(
                f"bubbles not resolvable at level {level}: fine mesh must be "
                "at least twice finer than the level mesh")
        return lift @ q

    def lift_matrix(self, level) -> sp.csc_matrix:
        if self._lift[level - 1] is None:
            raise TransferError(f"bubbles not resolvable at level {level}")
        return self._lift[level - 1]

    def quasi_interpolate(self, v, level):
        """Node-averaged conforming representative of the element averages."""
        return self._node_avg[level - 1] @ (self._pw_mean[level - 1] @ v)

    def vstable_projection(self, v, level):
        """Average-preserving stable projection onto the coarse scale.

        Node averaging plus a bubble correction restoring every element
        average; the kernel is exactly the kernel of the average projection.
        """
        mean = self._pw_mean[level - 1]
        smooth = self._node_avg[level - 1] @ (mean @ v)
        defect = mean @ v - mean @ smooth
        return smooth + self.bubble_lift(defect, level)

    def element_measure(self, level) -> float:
        return self.hierarchy.level_size(level) ** 2

    def refine_q0(self, level_from, level_to) -> sp.csr_matrix:
        """0/1 incidence mapping element values to a finer level's elements."""
        hier = self.hierarchy
        if not 1 <= level_from <= level_to <= hier.L:
            raise TransferError(f"bad level pair ({level_from}, {level_to})")
        owner_from = hier.fine_cell_owner(level_from).ravel()
        idx_from = hier._flat_to_index[level_from - 1]
        idx_to = hier._flat_to_index[level_to - 1]
        # One representative fine cell per target element suffices.
        act_to = np.flatnonzero(idx_to >= 0)
        n_to = hier.grid_n(level_to)
        scale = hier.nf // n_to
        ty, tx = np.divmod(act_to, n_to)
        fine_flat = (ty * scale) * hier.nf + tx * scale
        rows = idx_to[act_to]
        cols = idx_from[owner_from[fine_flat]]
        return sp.coo_matrix((np.ones(len(rows)), (rows, cols)),
                             shape=(hier.n_active(level_to),
                                    hier.n_active(level_from))).tocsr()

    def haar_on_finest(self) -> sp.csc_matrix:
        """All wavelet functions of all levels as element values on the
        finest level grid, columns ordered by level then within-level index."""
        L = self.hierarchy.L
        blocks = [self.refine_q0(level, L) @ self._synth[level - 1]
                  for level in range(1, L + 1)]
        return sp.hstack(blocks).tocsc()
