"""Element correctors in the zero-average kernel spaces.

The corrector of an element maps a fine function to the kernel of the
level's average projection and matches the element-restricted form against
all kernel test functions. Localized variants constrain the solution to a
patch around the element (homogeneous Dirichlet on the artificial patch
boundary, physical conditions on the domain boundary part) and enforce
zero averages on all patch elements; outside the patch the zero extension
has zero averages automatically.

Problems are solved as sparse saddle-point systems. One factorization is
shared by all elements whose local system has identical content (interior
elements of a translation-invariant region), keyed by a content hash.
"""

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import ElementId
from .solver import SparseLU, SolverError, sparse_lu

__all__ = [
    "CorrectorError",
    "CorrectorProblem",
    "CorrectorSolution",
    "DecayProfile",
    "CorrectorWorkspace",
]

SADDLE_RESIDUAL_TOL = 1e-10
# Factorizations below this dimension are kept across calls; larger ones
# live only while their shape group is being processed.
_CACHE_DIM_LIMIT = 4096
_CACHE_MAX_ENTRIES = 48


class CorrectorError(RuntimeError):
    pass


@dataclass
class CorrectorProblem:
    """One (element, patch) corrector problem; ``m is None`` is the global one."""

    level: int
    element: ElementId
    m: int | None
    patch: object
    local: np.ndarray          # free-node indices, canonical (row-major) order
    constr_rows: np.ndarray    # active-element indices carrying constraints
    h1_kappa: float
    kappa2_h: float

    @property
    def n_local(self) -> int:
        return len(self.local)

    @property
    def n_constraints(self) -> int:
        return len(self.constr_rows)


@dataclass
class CorrectorSolution:
    """Corrector values on the problem's local nodes plus multipliers."""

    problem: CorrectorProblem
    values: np.ndarray
    multipliers: np.ndarray
    residual: float

    def to_vector(self, n_free: int) -> np.ndarray:
        out = np.zeros(n_free, dtype=complex)
        out[self.problem.local] = self.values
        return out


@dataclass
class DecayProfile:
    """Energy of a global corrector outside growing patches, with fitted rate."""

    level: int
    element: ElementId
    energies: list          # [(m, ||grad w|| outside the m-patch)]
    beta_hat: float
    n_points: int


class CorrectorWorkspace:
    """Shared state for corrector solves on one operator set.

    Per-element solves are pure functions of immutable inputs; batching and
    merging happen in deterministic element order so sums are reproducible
    bit-for-bit regardless of group processing order.
    """

    def __init__(self, ops: fem.OperatorSet, transfer):
        self.ops = ops
        self.space = ops.space
        self.hierarchy = ops.space.hierarchy
        self.transfer = transfer
        self._factors: dict[bytes, SparseLU] = {}
        self._factor_order: list[bytes] = []
        hier = self.hierarchy
        self.h1_kappa = hier.H1 * ops.kappa
        self.kappa2_h = ops.kappa ** 2 * hier.h
        if self.h1_kappa > 1.0:
            warnings.warn(
                f"coarse resolution H1*kappa = {self.h1_kappa:.3g} > 1; corrector "
                "problems may be ill-posed", stacklevel=2)
        # Per-node counts of adjacent active cells, for patch membership.
        nf = hier.nf
        counts = np.zeros((nf + 1, nf + 1), dtype=np.int16)
        act = hier.active_fine.astype(np.int16)
        for dy in (0, 1):
            for dx in (0, 1):
                counts[dy:dy + nf, dx:dx + nf] += act
        self._touch_active = counts.ravel()

    # -- problem setup ----------------------------------------------------

    def problem(self, level: int, element: ElementId, m: int | None) -> CorrectorProblem:
        hier = self.hierarchy
        hier._check_element(element)
        if element.level != level:
            raise CorrectorError(f"element {element} is not on level {level}")
        if m is None:
            patch = hier.full_patch(level)
        else:
            patch = hier.patch(element, m)
        local = self._local_nodes(level, patch)
        n = hier.grid_n(level)
        flat = patch.elements[:, 1] * n + patch.elements[:, 0]
        constr_rows = hier._flat_to_index[level - 1][flat]
        return CorrectorProblem(level, element, m, patch, local, constr_rows,
                                self.h1_kappa, self.kappa2_h)

    def _local_nodes(self, level, patch) -> np.ndarray:
        """Free nodes whose every adjacent active cell lies in the patch.

        This zeroes the artificial patch boundary while keeping the
        physical boundary part free; holes and the outer boundary need no
        special casing because inactive cells never count.
        """
        hier = self.hierarchy
        space = self.space
        nf = hier.nf
        scale = hier.fine_per_side(level)
        cell_in = np.repeat(np.repeat(patch.mask, scale, axis=0), scale, axis=1)
        cell_in &= hier.active_fine
        counts = np.zeros((nf + 1, nf + 1), dtype=np.int16)
        sel = cell_in.astype(np.int16)
        for dy in (0, 1):
            for dx in (0, 1):
                counts[dy:dy + nf, dx:dx + nf] += sel
        counts = counts.ravel()
        mask = space.free_mask & (counts > 0) & (counts == self._touch_active)
        return space.node_to_free[np.flatnonzero(mask)]

    def build_saddle(self, problem: CorrectorProblem) -> sp.csc_matrix:
        A_ll = self.ops.Aop[problem.local][:, problem.local]
        C = self.transfer.mean_matrix(problem.level)[problem.constr_rows][:, problem.local]
        saddle = sp.bmat([[A_ll, C.conj().T], [C, None]], format="csc")
        saddle.sort_indices()
        return saddle

    @staticmethod
    def _content_hash(saddle: sp.csc_matrix) -> bytes:
        hasher = hashlib.sha256()
        hasher.update(np.asarray(saddle.shape, dtype=np.int64).tobytes())
        hasher.update(saddle.indptr.tobytes())
        hasher.update(saddle.indices.tobytes())
        hasher.update(saddle.data.tobytes())
        return hasher.digest()

    def _factorize(self, problem, saddle, key=None):
        key = key if key is not None else self._content_hash(saddle)
        factor = self._factors.get(key)
        if factor is None:
            try:
                factor = sparse_lu(saddle)
            except SolverError as exc:
                raise CorrectorError(
                    f"singular saddle point for element {problem.element} "
                    f"(patch size {len(problem.patch)}, constraints "
                    f"{problem.n_constraints}, kappa^2*h={problem.kappa2_h:.3g}): "
                    f"{exc}") from exc
            if saddle.shape[0] <= _CACHE_DIM_LIMIT:
                if len(self._factor_order) >= _CACHE_MAX_ENTRIES:
                    self._factors.pop(self._factor_order.pop(0), None)
                self._factors[key] = factor
                self._factor_order.append(key)
        return factor

    # -- single solves ------------------------------------------------------

    def _solve_block(self, problem, factor, rhs_local):
        """Solve the saddle system for a dense block of right-hand sides."""
        k = rhs_local.shape[1]
        ext = np.vstack([rhs_local,
                         np.zeros((problem.n_constraints, k), dtype=complex)])
        sol = factor.solve(ext, check=False)
        if sol.ndim == 1:
            sol = sol[:, None]
        res = factor.A @ sol - ext
        rhs_norms = np.linalg.norm(ext, axis=0)
        res_norms = np.linalg.norm(res, axis=0)
        nonzero = rhs_norms > 0
        rel = np.zeros(k)
        rel[nonzero] = res_norms[nonzero] / rhs_norms[nonzero]
        if np.any(rel > SADDLE_RESIDUAL_TOL):
            raise CorrectorError(
                f"saddle solve residual {rel.max():.3e} exceeds "
                f"{SADDLE_RESIDUAL_TOL:.1e} for element {problem.element} "
                f"(kappa^2*h={problem.kappa2_h:.3g})")
        return sol, float(rel.max())

    def solve_element_corrector(self, problem: CorrectorProblem,
                                v: np.ndarray) -> CorrectorSolution:
        """Corrector of ``v`` for one element, constrained to the patch."""
        v = np.asarray(v, dtype=complex)
        aT = fem.restricted_form(self.ops, problem.element)
        rhs = (aT @ v)[problem.local]
        if not np.any(rhs):
            zeros = np.zeros(problem.n_local, dtype=complex)
            mult = np.zeros(problem.n_constraints, dtype=complex)
            return CorrectorSolution(problem, zeros, mult, 0.0)
        saddle = self.build_saddle(problem)
        factor = self._factorize(problem, saddle)
        sol, rel = self._solve_block(problem, factor, rhs[:, None])
        return CorrectorSolution(problem, sol[:problem.n_local, 0],
                                 sol[problem.n_local:, 0], rel)

    def adjoint_corrector(self, problem: CorrectorProblem,
                          v: np.ndarray) -> CorrectorSolution:
        """Adjoint corrector, realized as conjugation of the forward solve."""
        fwd = self.solve_element_corrector(problem, np.conj(v))
        return CorrectorSolution(problem, np.conj(fwd.values),
                                 np.conj(fwd.multipliers), fwd.residual)

    # -- sums over elements --------------------------------------------------

    def _grouped(self, level, m):
        """Problems for all active elements, grouped by saddle content."""
        hier = self.hierarchy
        probs = []
        hashes = []
        for (ix, iy) in hier.active_elements(level):
            p = self.problem(level, ElementId(level, int(ix), int(iy)), m)
            probs.append(p)
            hashes.append(self._content_hash(self.build_saddle(p)))
        groups: dict[bytes, list[int]] = {}
        for i, key in enumerate(hashes):
            groups.setdefault(key, []).append(i)
        return probs, groups

    def sum_correctors(self, level: int, m: int | None, v: np.ndarray) -> np.ndarray:
        """Sum of all element correctors of ``v`` on one level."""
        Y = sp.csc_matrix(np.asarray(v, dtype=complex)[:, None])
        return np.asarray(self.sum_correctors_matrix(level, m, Y).todense()).ravel()

    def sum_correctors_matrix(self, level: int, m: int | None,
                              Y: sp.spmatrix) -> sp.csc_matrix:
        """Columnwise corrector sums for a sparse block of input functions.

        For each element only the columns with support touching it produce
        a right-hand side; results merge in element order.
        """
        Y = Y.tocsc()
        n_free, ncols = Y.shape
        contact = (abs(self.transfer.mean_matrix(level)) @ abs(Y)).tocsr()
        probs, groups = self._grouped(level, m)
        pieces: dict[int, tuple] = {}
        for key, members in groups.items():
            factor = None
            for i in members:
                p = probs[i]
                t = self.hierarchy.element_index(p.element)
                cols = contact.indices[contact.indptr[t]:contact.indptr[t + 1]]
                if len(cols) == 0:
                    continue
                if factor is None:
                    factor = self._factorize(p, self.build_saddle(p), key=key)
                aT = fem.restricted_form(self.ops, p.element)
                rhs = np.asarray((aT @ Y[:, cols]).todense())[p.local]
                sol, _ = self._solve_block(p, factor, rhs)
                pieces[i] = (p.local, cols, sol[:p.n_local])
        rows, cols, data = [], [], []
        for i in sorted(pieces):
            local, cset, W = pieces[i]
            rows.append(np.repeat(local, len(cset)))
            cols.append(np.tile(cset, len(local)))
            data.append(W.ravel())
        if not rows:
            return sp.csc_matrix((n_free, ncols), dtype=complex)
        out = sp.coo_matrix(
            (np.concatenate(data),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_free, ncols)).tocsc()
        out.sum_duplicates()
        out.eliminate_zeros()
        return out

    def adjoint_sum_matrix(self, level, m, Y: sp.spmatrix) -> sp.csc_matrix:
        """Columnwise adjoint corrector sums (conjugated forward solves)."""
        return self.sum_correctors_matrix(level, m, Y.conj()).conj()

    # -- decay measurement ----------------------------------------------------

    def decay_profile(self, level: int, element: ElementId, v: np.ndarray,
                      m_max: int | None = None) -> DecayProfile:
        """Gradient energy of the global corrector outside growing patches.

        Fits a log-linear decay rate over the non-vanishing annuli; fewer
        than three usable points is reported as a degenerate fit.
        """
        hier = self.hierarchy
        space = self.space
        problem = self.problem(level, element, None)
        w = self.solve_element_corrector(problem, v).to_vector(space.n_free)
        coeff_ones = np.ones(len(space.cells))
        n_all = int(hier.active[level - 1].sum())
        energies = []
        m = 0
        while True:
            patch = hier.patch(element, m)
            scale = hier.fine_per_side(level)
            inside = np.repeat(np.repeat(patch.mask, scale, axis=0), scale, axis=1)
            cell_sel = ~inside[space.cells[:, 1], space.cells[:, 0]]
            if np.any(cell_sel):
                _, K1_out, _, _ = fem._assemble_parts(space, coeff_ones, cell_sel,
                                                      np.zeros(len(space.robin_edges), bool))
                e = float(np.sqrt(max(np.real(np.vdot(w, K1_out @ w)), 0.0)))
            else:
                e = 0.0
            energies.append((m, e))
            covered = len(patch) == n_all
            m += 1
            if covered or (m_max is not None and m > m_max):
                break
        e0 = energies[0][1]
        usable = [(mm, e) for mm, e in energies if e > max(e0, 1e-300) * 1e-13]
        if len(usable) < 3 or e0 == 0.0:
            raise CorrectorError(
                f"degenerate decay fit for element {element}: only "
                f"{len(usable)} non-vanishing annuli")
        ms = np.array([mm for mm, _ in usable], dtype=float)
        logs = np.log([e for _, e in usable])
        slope = np.polyfit(ms, logs, 1)[0]
        return DecayProfile(level, element, energies, float(np.exp(slope)),
                            len(usable))
