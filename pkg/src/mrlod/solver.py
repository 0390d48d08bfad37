"""Linear algebra backends: complex sparse LU, restarted GMRES, diagnostics."""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SolverError",
    "SparseLU",
    "sparse_lu",
    "GmresReport",
    "gmres",
    "SpectralDiagnostics",
    "diagnostics",
]

DENSE_SVD_LIMIT = 2000

# Debug switch: verify Krylov basis orthogonality after reorthogonalization
# (quadratic cost, for tests and troubleshooting only).
DEBUG_ORTHOGONALITY = False
ORTHO_TOL = 1e-10


class SolverError(RuntimeError):
    pass


class SparseLU:
    """Direct factorization handle with a residual self-check on solve."""

    def __init__(self, A):
        self.A = A.tocsc()
        if self.A.shape[0] != self.A.shape[1]:
            raise SolverError(f"matrix is not square: {self.A.shape}")
        try:
            self._lu = spla.splu(self.A.astype(complex))
        except RuntimeError as exc:  # SuperLU signals singularity this way
            raise SolverError(f"sparse LU failed: {exc}") from exc

    @property
    def shape(self):
        return self.A.shape

    def solve(self, b, check: bool = True, rtol: float = 1e-10):
        b = np.asarray(b, dtype=complex)
        x = self._lu.solve(b)
        if check:
            nrm = np.linalg.norm(b)
            if nrm > 0:
                rel = np.linalg.norm(self.A @ x - b) / nrm
                if not np.isfinite(rel) or rel > rtol:
                    raise SolverError(
                        f"direct solve residual {rel:.3e} exceeds {rtol:.1e} "
                        f"(n={self.A.shape[0]}, nnz={self.A.nnz})")
        return x

    def solve_adjoint(self, b):
        return self._lu.solve(np.asarray(b, dtype=complex), trans="H")


def sparse_lu(A) -> SparseLU:
    """Factorize a square complex sparse matrix for repeated solves."""
    return SparseLU(A)


@dataclass
class GmresReport:
    iterations: int = 0
    restarts: int = 0
    residuals: list = field(default_factory=list)
    cycle_starts: list = field(default_factory=list)
    converged: bool = False
    final_residual: float = np.inf
    x0_zero: bool = True

    def max_cycle_increase(self) -> float:
        """Largest residual increase within one restart cycle (0 if monotone)."""
        starts = set(self.cycle_starts)
        worst = 0.0
        for k in range(1, len(self.residuals)):
            if k not in starts:
                worst = max(worst, self.residuals[k] - self.residuals[k - 1])
        return worst


def _as_operator(A):
    if callable(A):
        return A
    Acsr = A.tocsr() if sp.issparse(A) else np.asarray(A)
    return lambda v: Acsr @ v


def gmres(A, b, restart: int = 50, rtol: float = 1e-6, maxiter: int = 1000,
          x0=None):
    """Restarted GMRES with modified Gram-Schmidt and one reorthogonalization.

    ``A`` may be a matrix or a callable computing matrix-vector products.
    Convergence means final relative residual (against |b|) <= rtol;
    exceeding ``maxiter`` total iterations returns converged=False.
    Deterministic: no randomness, fixed starting vector (zero by default).
    """
    if restart < 1:
        raise SolverError(f"restart must be >= 1, got {restart}")
    if rtol <= 0:
        raise SolverError(f"rtol must be positive, got {rtol}")
    apply_A = _as_operator(A)
    b = np.asarray(b, dtype=complex)
    n = len(b)
    report = GmresReport()
    report._cycle = restart
    x = np.zeros(n, dtype=complex) if x0 is None else np.array(x0, dtype=complex)
    report.x0_zero = x0 is None or not np.any(x0)
    first_cycle = True

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        report.converged = True
        report.final_residual = 0.0
        return np.zeros(n, dtype=complex), report

    total = 0
    while total < maxiter:
        r = b - apply_A(x) if not (report.x0_zero and total == 0) else b.copy()
        beta = np.linalg.norm(r)
        rel = beta / bnorm
        if rel <= rtol:
            report.converged = True
            report.final_residual = rel
            return x, report
        if not first_cycle:
            report.restarts += 1
        first_cycle = False
        report.cycle_starts.append(len(report.residuals))

        mloc = min(restart, maxiter - total)
        Q = np.zeros((n, mloc + 1), dtype=complex)
        H = np.zeros((mloc + 1, mloc), dtype=complex)
        cs = np.zeros(mloc, dtype=complex)
        sn = np.zeros(mloc, dtype=complex)
        g = np.zeros(mloc + 1, dtype=complex)
        g[0] = beta
        Q[:, 0] = r / beta

        k_used = 0
        breakdown = False
        for k in range(mloc):
            w = apply_A(Q[:, k])
            # Modified Gram-Schmidt, then a single reorthogonalization pass:
            # the blocks are mildly non-normal and iteration counts matter.
            for i in range(k + 1):
                hik = np.vdot(Q[:, i], w)
                H[i, k] += hik
                w -= hik * Q[:, i]
            for i in range(k + 1):
                c = np.vdot(Q[:, i], w)
                H[i, k] += c
                w -= c * Q[:, i]
            hk1 = np.linalg.norm(w)
            H[k + 1, k] = hk1

            # Apply accumulated Givens rotations, then form the new one.
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -np.conj(sn[i]) * H[i, k] + np.conj(cs[i]) * H[i + 1, k]
                H[i, k] = t
            denom = np.sqrt(abs(H[k, k]) ** 2 + abs(hk1) ** 2)
            if denom == 0.0:
                # Dead column (lucky zero): keep what was built so far.
                breakdown = True
                k_used = k
                total += 1
                break
            cs[k] = np.conj(H[k, k]) / denom
            sn[k] = np.conj(H[k + 1, k]) / denom
            H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -np.conj(sn[k]) * g[k]
            g[k] = cs[k] * g[k]

            total += 1
            k_used = k + 1
            rel = abs(g[k + 1]) / bnorm
            report.residuals.append(rel)

            if hk1 == 0.0:
                breakdown = True  # happy breakdown: solution is exact
                break
            Q[:, k + 1] = w / hk1
            if DEBUG_ORTHOGONALITY:
                drift = np.abs(Q[:, :k + 1].conj().T @ Q[:, k + 1]).max()
                assert drift <= ORTHO_TOL, f"Krylov orthogonality lost: {drift:.2e}"
            if rel <= rtol:
                break

        if k_used > 0:
            y = np.linalg.solve(H[:k_used, :k_used], g[:k_used])
            x = x + Q[:, :k_used] @ y

        true_rel = np.linalg.norm(b - apply_A(x)) / bnorm
        report.iterations = total
        report.final_residual = true_rel
        if true_rel <= rtol:
            report.converged = True
            return x, report
        if breakdown:
            # Krylov space exhausted without meeting the tolerance.
            report.converged = true_rel <= rtol
            return x, report

    report.iterations = total
    report.converged = False
    return x, report


@dataclass
class SpectralDiagnostics:
    """Sampled spectral data of one block: condition and field-of-values."""

    n: int
    norm2: float
    smin: float
    condition: float
    fov: np.ndarray
    fov_min_abs: float
    fov_min_real: float
    seed: int
    method: str
    power_converged: bool = True


def _power_norm(apply_fwd, apply_adj, n, rng, tol=1e-6, maxit=500):
    """Largest singular value via power iteration on the normal operator."""
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x /= np.linalg.norm(x)
    s = 0.0
    for _ in range(maxit):
        y = apply_adj(apply_fwd(x))
        s_new = np.sqrt(np.linalg.norm(y))
        if np.linalg.norm(y) == 0:
            return 0.0, True
        x = y / np.linalg.norm(y)
        if abs(s_new - s) <= tol * max(s_new, 1e-300):
            return float(s_new), True
        s = s_new
    return float(s), False


def diagnostics(A, samples: int = 100, seed: int = 0) -> SpectralDiagnostics:
    """Condition estimate and field-of-values samples of a square matrix.

    Dense SVD below the dimension cutoff, else two-sided power iteration
    with a direct factorization for the smallest singular value. The
    field of values is sampled with seeded complex Gaussian vectors.
    """
    if samples < 1:
        raise SolverError(f"need at least one sample, got {samples}")
    Am = A.tocsr() if sp.issparse(A) else np.asarray(A)
    n = Am.shape[0]
    rng = np.random.default_rng(seed)
    power_ok = True
    if n <= DENSE_SVD_LIMIT:
        dense = Am.toarray() if sp.issparse(Am) else Am
        svals = np.linalg.svd(dense, compute_uv=False)
        norm2, smin = float(svals[0]), float(svals[-1])
        method = "dense_svd"
    else:
        norm2, ok1 = _power_norm(lambda v: Am @ v,
                                 lambda v: Am.conj().T @ v, n, rng)
        lu = sparse_lu(sp.csc_matrix(Am))
        inv_norm, ok2 = _power_norm(lambda v: lu.solve(v, check=False),
                                    lambda v: lu.solve_adjoint(v), n, rng)
        smin = 1.0 / inv_norm if inv_norm > 0 else 0.0
        power_ok = ok1 and ok2
        method = "power_iteration"
    cond = norm2 / smin if smin > 0 else np.inf

    fov = np.empty(samples, dtype=complex)
    for i in range(samples):
        xi = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        fov[i] = np.vdot(xi, Am @ xi) / np.vdot(xi, xi)
    return SpectralDiagnostics(
        n=n, norm2=norm2, smin=smin, condition=float(max(cond, 1.0)),
        fov=fov, fov_min_abs=float(np.abs(fov).min()),
        fov_min_real=float(fov.real.min()), seed=seed, method=method,
        power_converged=power_ok)
