"""Hierarchical trial/test bases and the decoupled per-level block systems.

Each wavelet function is lifted to a conforming bubble representative,
optionally passed through the average-preserving stable projection
("stabilized" variant; "normal" omits it), and corrected by the summed
localized element correctors. Test functions use the adjoint correctors.
The "ideal" variant uses global correctors and no stable projection; it
reproduces the exactly block-diagonal method and serves as a test oracle.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .corrector import CorrectorWorkspace
from .solver import gmres, sparse_lu

__all__ = [
    "VARIANTS",
    "LevelBasis",
    "BlockSystem",
    "LevelSolveStats",
    "MultiResSolution",
    "build_level_basis",
    "assemble_blocks",
    "solve_blocks",
    "cross_level_matrix",
    "export_sparsity",
]

VARIANTS = ("stabilized", "normal", "ideal")
STRATEGIES = ("direct_all", "direct_first_gmres_rest")


@dataclass
class LevelBasis:
    """Trial/test basis columns of one level as fine-node sparse matrices."""

    level: int
    m: int | None
    variant: str
    trial: sp.csc_matrix
    test: sp.csc_matrix

    @property
    def n(self) -> int:
        return self.trial.shape[1]


def build_level_basis(ws: CorrectorWorkspace, level: int, m: int | None,
                      variant: str = "stabilized") -> LevelBasis:
    """Construct the basis columns of one level.

    ``m`` is the patch radius for the localized correctors; ``None`` (or
    the ideal variant) uses global correctors. Columns keep their exact
    support from the patch geometry; no magnitude thresholding.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    transfer = ws.transfer
    synth = transfer.synthesis_matrix(level)
    lifted = (transfer.lift_matrix(level) @ synth).tocsc()
    if variant == "stabilized":
        Y = transfer.vstable_projection(lifted, level).tocsc()
    else:
        Y = lifted
    eff_m = None if variant == "ideal" else m

    Z = ws.sum_correctors_matrix(level, eff_m, Y)
    if np.iscomplexobj(Y.data):
        Zstar = ws.adjoint_sum_matrix(level, eff_m, Y)
    else:
        # Real lift: the adjoint corrector sum is the conjugated forward one.
        Zstar = Z.conj()
    trial = (Y - Z).tocsc()
    test = (Y - Zstar).tocsc()
    trial.eliminate_zeros()
    test.eliminate_zeros()
    return LevelBasis(level, eff_m, variant, trial, test)


@dataclass
class BlockSystem:
    """Per-level system matrices and loads of the decoupled method."""

    bases: list
    blocks: list            # csr matrices, test x trial pairing
    loads: list             # rhs vectors per level
    kappa: float
    meta: dict = field(default_factory=dict)

    @property
    def levels(self):
        return [b.level for b in self.bases]


def assemble_blocks(bases: list, ops, load: np.ndarray | None = None) -> BlockSystem:
    """Evaluate the form on each level's trial/test pair, plus level loads."""
    blocks = []
    loads = []
    for basis in bases:
        A = (basis.test.conj().T @ (ops.Aop @ basis.trial)).tocsr()
        A.sum_duplicates()
        blocks.append(A)
        if load is not None:
            loads.append(np.asarray(basis.test.conj().T @ load).ravel())
        else:
            loads.append(np.zeros(basis.n, dtype=complex))
    return BlockSystem(list(bases), blocks, loads, ops.kappa)


@dataclass
class LevelSolveStats:
    level: int
    n: int
    method: str
    iterations: int = 0
    restarts: int = 0
    converged: bool = True
    final_residual: float = 0.0
    direct_fallback: bool = False
    residual_history: list = field(default_factory=list)


@dataclass
class MultiResSolution:
    coefficients: list
    combined: np.ndarray
    stats: list

    def partial_sum(self, bases: list, upto_level: int) -> np.ndarray:
        """Fine-node sum of the level contributions with level <= given."""
        out = np.zeros(self.combined.shape, dtype=complex)
        for basis, x in zip(bases, self.coefficients):
            if basis.level <= upto_level:
                out += basis.trial @ x
        return out


def solve_blocks(system: BlockSystem, strategy: str = "direct_all",
                 restart: int = 50, rtol: float = 1e-6,
                 maxiter: int = 2000) -> MultiResSolution:
    """Solve the decoupled level problems and sum the contributions.

    The first level is always solved directly (it carries the indefinite
    part); higher levels use restarted GMRES under the iterative strategy,
    falling back to a direct solve (flagged) on non-convergence.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    xs = []
    stats = []
    for basis, A, f in zip(system.bases, system.blocks, system.loads):
        use_direct = strategy == "direct_all" or basis.level == 1
        if use_direct:
            x = sparse_lu(A.tocsc()).solve(f)
            st = LevelSolveStats(basis.level, basis.n, "direct")
        else:
            x, rep = gmres(A, f, restart=restart, rtol=rtol, maxiter=maxiter)
            st = LevelSolveStats(basis.level, basis.n, "gmres",
                                 iterations=rep.iterations,
                                 restarts=rep.restarts,
                                 converged=rep.converged,
                                 final_residual=rep.final_residual,
                                 residual_history=list(rep.residuals))
            if not rep.converged:
                warnings.warn(
                    f"GMRES did not reach rtol={rtol} on level {basis.level} "
                    f"within {maxiter} iterations; falling back to direct solve",
                    stacklevel=2)
                x = sparse_lu(A.tocsc()).solve(f)
                st.direct_fallback = True
        xs.append(x)
        stats.append(st)
    n_free = system.bases[0].trial.shape[0] if system.bases else 0
    combined = np.zeros(n_free, dtype=complex)
    for basis, x in zip(system.bases, xs):
        combined += basis.trial @ x
    return MultiResSolution(xs, combined, stats)


def cross_level_matrix(bases: list, ops) -> tuple:
    """Full coupled matrix over all levels (diagnostics/figures only).

    Returns the matrix and the level offsets; rows follow test functions,
    columns trial functions, both ordered by level then index.
    """
    grid = [[(bj.test.conj().T @ (ops.Aop @ bk.trial)).tocsr()
             for bk in bases] for bj in bases]
    offsets = np.cumsum([0] + [b.n for b in bases])
    if not bases:
        return sp.csr_matrix((0, 0)), offsets
    return sp.bmat(grid, format="csr"), offsets


def export_sparsity(path, bases: list, ops, header: str = "row col log10abs") -> None:
    """Write (row, col, log10|entry|) triplets of the coupled matrix.

    0-based indices; exact zeros are omitted (white in the rendered
    pattern). An empty system produces just the header.
    """
    lines = [header]
    if bases:
        full, _ = cross_level_matrix(bases, ops)
        coo = full.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i in order:
            v = abs(coo.data[i])
            if v == 0.0:
                continue
            lines.append(f"{coo.row[i]} {coo.col[i]} {np.log10(v):.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
