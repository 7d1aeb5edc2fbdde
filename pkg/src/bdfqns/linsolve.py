"""Direct sparse LU for the saddle-point systems, plus a dense reference path."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

PIVOT_RTOL = 1e-14
DENSE_LIMIT = 2000


class SingularMatrixError(RuntimeError):
    pass


class SolveAccuracyError(RuntimeError):
    pass


def as_csr(matrix) -> sp.csr_matrix:
    """Canonical CSR: sorted column indices, no duplicates, no stored zeros."""
    m = sp.csr_matrix(matrix, dtype=float, copy=True)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def equilibration(A) -> np.ndarray:
    """Symmetric scaling d = 1 / sqrt(max(row max, column max)) of |A|."""
    absA = abs(as_csr(A))
    size = np.maximum(absA.max(axis=1).toarray().ravel(), absA.max(axis=0).toarray().ravel())
    if size.min() == 0.0:
        raise SingularMatrixError(f"row/column {int(np.argmin(size))} is identically zero")
    return 1.0 / np.sqrt(size)


def _relative_residual(A, d: np.ndarray, x: np.ndarray, rhs: np.ndarray) -> float:
    # measured in the equilibrated norm |D r| / |D b| so that blocks of very
    # different size contribute comparably
    bn = np.linalg.norm(d * rhs)
    r = np.linalg.norm(d * (rhs - A @ x))
    return float(r / bn) if bn else float(r)


def _refined_solve(A, raw_solve, d, rhs, rtol, refine) -> np.ndarray:
    b = np.asarray(rhs, dtype=float)
    x = raw_solve(b)
    if rtol is None:
        return x
    if not np.any(b):
        return np.zeros_like(b)
    for _ in range(refine + 1):
        rel = _relative_residual(A, d, x, b)
        if rel <= rtol:
            return x
        x = x + raw_solve(b - A @ x)
    raise SolveAccuracyError(f"relative residual {rel:.3e} exceeds {rtol:g}")


class Factorization:
    """Reusable LU factors of a square matrix.

    The sparse path uses SuperLU with the COLAMD approximate minimum-degree
    column ordering and partial pivoting. The matrix is first equilibrated
    symmetrically, D A D with D = diag(1 / sqrt(max(row max, column max))), so
    that saddle-point blocks of very different size (small time steps) do not
    trip the pivot check. Factors are never modified after construction, so
    concurrent :meth:`solve` calls are safe.
    """

    def __init__(self, matrix, dense: bool = False, ordering: str = "COLAMD"):
        A = as_csr(matrix)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.n = A.shape[0]
        self.dense = dense
        if A.nnz == 0 or abs(A.data).max() == 0.0:
            raise SingularMatrixError("zero matrix")
        self.d = equilibration(A)
        Dm = sp.diags(self.d)
        A = as_csr(Dm @ A @ Dm)
        scale = abs(A.data).max()
        if dense:
            if self.n > DENSE_LIMIT:
                raise ValueError(f"dense path limited to {DENSE_LIMIT} unknowns")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)  # singularity is reported below
                lu, piv = sla.lu_factor(A.toarray(), check_finite=True)
            pivots = np.abs(np.diag(lu))
            self._lu = (lu, piv)
        else:
            try:
                self._lu = spla.splu(A.tocsc(), permc_spec=ordering, diag_pivot_thresh=1.0)
            except RuntimeError as exc:  # SuperLU reports exact singularity this way
                raise SingularMatrixError(str(exc)) from exc
            pivots = np.abs(self._lu.U.diagonal())
        if pivots.min() < PIVOT_RTOL * scale:
            raise SingularMatrixError(
                f"pivot {pivots.min():.3e} below {PIVOT_RTOL:g} * max|a_ij| = {PIVOT_RTOL * scale:.3e}"
            )

    def _raw_solve(self, b: np.ndarray) -> np.ndarray:
        d = self.d if b.ndim == 1 else self.d[:, None]
        if self.dense:
            return d * sla.lu_solve(self._lu, d * b)
        return d * self._lu.solve(d * b)

    def solve(self, rhs, rtol: float | None = None, refine: int = 3) -> np.ndarray:
        """Solve A x = rhs; with ``rtol`` set, refine iteratively and raise if
        the relative residual stays above it."""
        return _refined_solve(self.A, self._raw_solve, self.d, rhs, rtol, refine)

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        return _relative_residual(self.A, self.d, x, rhs)


def factorize(matrix, dense: bool = False) -> Factorization:
    return Factorization(matrix, dense=dense)


def solve(handle: Factorization, rhs, rtol: float | None = None) -> np.ndarray:
    return handle.solve(rhs, rtol=rtol)


class BorderedFactorization:
    """Solver for ``[[S, c], [r^T, 0]]`` with S singular along one pressure mode.

    S is regularised to ``S + sigma e e^T`` (e the unit vector of one pressure
    DOF, the first after ``pin`` velocity unknowns), which is sparse and nonsingular; the two scalar unknowns
    ``s = e^T x`` and the multiplier are recovered from a 2x2 capacitance system.
    This keeps the dense border out of the sparse LU.
    """

    def __init__(self, core, col: np.ndarray, row: np.ndarray, pin: int, dense: bool = False):
        core = as_csr(core)
        n = core.shape[0]
        self.n = n + 1
        # weight of the same size as the pressure Schur complement, |B|^2 / |K|
        kmax = abs(core[:pin, :pin]).max() if pin > 0 else 0.0
        bmax = abs(core[pin:, :pin]).max() if pin > 0 else 0.0
        self.sigma = float(bmax**2 / kmax) if kmax > 0 and bmax > 0 else float(abs(core.data).max())
        e = np.zeros(n)
        e[pin] = 1.0
        reg = core + sp.csr_matrix(([self.sigma], ([pin], [pin])), shape=core.shape)
        self.inner = Factorization(reg, dense=dense)
        self.core, self.col, self.row, self.e = core, col, row, e
        self.full = as_csr(sp.bmat([[core, sp.csr_matrix(col.reshape(-1, 1))], [sp.csr_matrix(row), None]]))
        self.d = equilibration(self.full)
        self._ze = self.inner.solve(e)
        self._zc = self.inner.solve(col)
        self._cap = np.array(
            [
                [e @ self._ze * self.sigma - 1.0, -(e @ self._zc)],
                [row @ self._ze * self.sigma, -(row @ self._zc)],
            ]
        )
        if abs(np.linalg.det(self._cap)) < 1e-300 or not np.isfinite(self._cap).all():
            raise SingularMatrixError("bordered system is singular")

    def _raw_solve(self, b: np.ndarray) -> np.ndarray:
        x_b, beta = b[:-1], b[-1]
        zb = self.inner.solve(x_b)
        rhs = np.array([-(self.e @ zb), beta - self.row @ zb])
        s, lam = np.linalg.solve(self._cap, rhs)
        x = zb + self.sigma * s * self._ze - lam * self._zc
        return np.concatenate([x, [lam]])

    def solve(self, rhs, rtol: float | None = None, refine: int = 3) -> np.ndarray:
        return _refined_solve(self.full, self._raw_solve, self.d, rhs, rtol, refine)

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        return _relative_residual(self.full, self.d, x, rhs)


@dataclass
class BlockSystem:
    """Saddle-point system on the free velocity DOFs.

    Unknown layout is ``[u_free | p | lambda]`` where lambda enforces the
    zero-mean pressure constraint ``mean . p = 0``::

        [ K_ff   -B_f^T   0   ]
        [ -B_f     0     mean ]
        [  0     mean^T   0   ]
    """

    Bdiv: sp.csr_matrix
    mean: np.ndarray
    free: np.ndarray

    def __post_init__(self):
        self.n_free = len(self.free)
        self.n_p = self.Bdiv.shape[0]
        self.Bf = self.Bdiv[:, self.free].tocsr()
        self._m = sp.csr_matrix(self.mean.reshape(-1, 1))
        self._border = np.concatenate([np.zeros(self.n_free), self.mean])

    @property
    def size(self) -> int:
        return self.n_free + self.n_p + 1

    def core(self, K) -> sp.csr_matrix:
        Kff = sp.csr_matrix(K)[self.free][:, self.free]
        return sp.bmat([[Kff, -self.Bf.T], [-self.Bf, None]], format="csr")

    def matrix(self, K) -> sp.csc_matrix:
        """The assembled bordered matrix (used for residual checks and dense oracles)."""
        Kff = sp.csr_matrix(K)[self.free][:, self.free]
        return sp.bmat(
            [
                [Kff, -self.Bf.T, None],
                [-self.Bf, None, self._m],
                [None, self._m.T, None],
            ],
            format="csc",
        )

    def factorize(self, K, dense: bool = False):
        """Factorization of the bordered system for velocity block K."""
        if dense:
            return Factorization(self.matrix(K), dense=True)
        return BorderedFactorization(self.core(K), self._border, self._border, self.n_free, dense=False)

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        return x[: self.n_free], x[self.n_free: self.n_free + self.n_p], float(x[-1])

    def join(self, uf: np.ndarray, p: np.ndarray, lam: float) -> np.ndarray:
        return np.concatenate([uf, p, [lam]])
