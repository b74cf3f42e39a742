"""Compressed-row sparse matrices and Krylov solvers (CG, BiCGSTAB)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

DEFAULT_TOL = 1e-12


class SolverError(RuntimeError):
    """Raised when an iterative solve fails to reach its tolerance."""

    def __init__(self, message: str, report: "SolveReport"):
        super().__init__(f"{message} (iterations={report.iterations}, "
                         f"residual={report.residual:.3e})")
        self.report = report


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    converged: bool

    def __post_init__(self):
        object.__setattr__(self, "residual", float(self.residual))
        object.__setattr__(self, "converged", bool(self.converged))


class SparseMatrix:
    """Immutable CSR matrix.

    Column indices are sorted and unique within each row.  The matrix-vector
    product is delegated to scipy's compiled CSR kernel; the arrays stay ours.
    """

    __slots__ = ("indptr", "indices", "data", "shape", "_csr", "_diag")

    def __init__(self, indptr, indices, data, shape):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.shape = (int(shape[0]), int(shape[1]))
        if len(self.indptr) != self.shape[0] + 1:
            raise ValueError("row offsets do not match the number of rows")
        if len(self.indices) != len(self.data) or self.indptr[-1] != len(self.data):
            raise ValueError("inconsistent CSR arrays")
        for a in (self.indptr, self.indices, self.data):
            a.setflags(write=False)
        self._csr = None
        self._diag = None

    # -- construction -------------------------------------------------
    @classmethod
    def from_scipy(cls, A) -> "SparseMatrix":
        A = sp.csr_matrix(A, dtype=np.float64, copy=True)
        A.sum_duplicates()
        A.sort_indices()
        return cls(A.indptr, A.indices, A.data, A.shape)

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "SparseMatrix":
        return cls.from_scipy(sp.coo_matrix((vals, (rows, cols)), shape=shape))

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=float)))

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(np.arange(n + 1), np.arange(n), np.ones(n), (n, n))

    @classmethod
    def zeros(cls, n_rows: int, n_cols: int) -> "SparseMatrix":
        return cls(np.zeros(n_rows + 1, dtype=np.int64), [], [], (n_rows, n_cols))

    # -- views ---------------------------------------------------------
    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix((self.data, self.indices, self.indptr),
                                      shape=self.shape, copy=False)
        return self._csr

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        if self._diag is None:
            self._diag = self.to_scipy().diagonal()
        return self._diag

    @property
    def nnz(self) -> int:
        return len(self.data)

    @property
    def T(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.to_scipy().T)

    def __matmul__(self, x):
        if isinstance(x, SparseMatrix):
            return SparseMatrix.from_scipy(self.to_scipy() @ x.to_scipy())
        return spmv(self, x)

    def __add__(self, other: "SparseMatrix") -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.to_scipy() + other.to_scipy())

    def __sub__(self, other: "SparseMatrix") -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.to_scipy() - other.to_scipy())

    def __mul__(self, alpha: float) -> "SparseMatrix":
        return SparseMatrix(self.indptr, self.indices, alpha * self.data, self.shape)

    __rmul__ = __mul__

    def check(self) -> None:
        """Validate the CSR invariants, raising ValueError on violation."""
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("row offsets not monotone")
        if self.nnz and (self.indices.min() < 0 or self.indices.max() >= self.shape[1]):
            raise ValueError("column index out of range")
        for i in range(self.shape[0]):
            cols = self.indices[self.indptr[i]:self.indptr[i + 1]]
            if np.any(np.diff(cols) <= 0):
                raise ValueError(f"columns of row {i} not strictly increasing")

    def is_symmetric(self, rtol: float = 1e-12) -> bool:
        """Structural and numerical symmetry: |A_ij - A_ji| <= rtol * max|A|."""
        if self.shape[0] != self.shape[1]:
            return False
        A = self.to_scipy()
        scale = np.max(np.abs(self.data)) if self.nnz else 0.0
        D = (A - A.T).tocsr()
        if D.nnz == 0:
            return True
        return bool(np.max(np.abs(D.data)) <= rtol * scale)

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def spmv(A: SparseMatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: matrix {A.shape} vs vector {x.shape}")
    return A.to_scipy() @ x


def _as_operator(A) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(A, SparseMatrix):
        return lambda v: spmv(A, v)
    if callable(A):
        return A
    return lambda v: A @ v


def _as_preconditioner(A, precond):
    if precond is None or precond == "none":
        return None
    if precond == "jacobi":
        if not isinstance(A, SparseMatrix):
            raise ValueError("Jacobi preconditioning needs an assembled matrix")
        d = A.diagonal().copy()
        d[d == 0.0] = 1.0
        inv = 1.0 / d
        return lambda r: inv * r
    if callable(precond):
        return precond
    raise ValueError(f"unknown preconditioner {precond!r}")


def cg_solve(A, b, tol: float = DEFAULT_TOL, maxit: int = 10000, precond="jacobi",
             x0=None, raise_on_fail: bool = True, callback=None, atol: float = 0.0):
    """Preconditioned conjugate gradients for symmetric positive (semi)definite A.

    Convergence is declared when ``||b - A x|| <= max(tol * ||b||, atol)``.  The residual
    is tracked by recurrence and confirmed by an explicit recomputation before
    returning.  ``A`` may be a :class:`SparseMatrix` or any callable matvec.

    Returns ``(x, SolveReport)``; raises :class:`SolverError` on failure
    unless ``raise_on_fail`` is False.
    """
    matvec = _as_operator(A)
    M = _as_preconditioner(A, precond)
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True)
    r = b - matvec(x) if x0 is not None else b.copy()
    target = max(tol * bnorm, atol)
    rnorm = np.linalg.norm(r)
    if rnorm <= target:
        return x, SolveReport(0, rnorm / bnorm, True)
    z = M(r) if M else r
    p = z.copy()
    rz = r @ z
    it = 0
    while it < maxit:
        it += 1
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if callback is not None:
            callback(x)
        rnorm = np.linalg.norm(r)
        if rnorm <= target:
            # guard against drift of the recursive residual
            r = b - matvec(x)
            rnorm = np.linalg.norm(r)
            if rnorm <= target:
                return x, SolveReport(it, rnorm / bnorm, True)
        z = M(r) if M else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    rnorm = np.linalg.norm(b - matvec(x))
    report = SolveReport(it, rnorm / bnorm, rnorm <= target)
    if not report.converged and raise_on_fail:
        raise SolverError("CG did not converge", report)
    return x, report


def bicgstab_solve(A, b, tol: float = DEFAULT_TOL, maxit: int = 10000, precond="jacobi",
                   x0=None, raise_on_fail: bool = True, atol: float = 0.0):
    """Right-preconditioned BiCGSTAB for general nonsymmetric systems.

    Same contract and return value as :func:`cg_solve`.
    """
    matvec = _as_operator(A)
    M = _as_preconditioner(A, precond) or (lambda v: v)
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x) if x0 is not None else b.copy()
    target = max(tol * bnorm, atol)
    if np.linalg.norm(r) <= target:
        return x, SolveReport(0, np.linalg.norm(r) / bnorm, True)

    it = 0
    restarts = 0
    while it < maxit:
        r_hat = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros_like(b)
        p = np.zeros_like(b)
        breakdown = False
        while it < maxit:
            it += 1
            rho_new = r_hat @ r
            if rho_new == 0.0:
                breakdown = True
                break
            beta = (rho_new / rho) * (alpha / omega)
            rho = rho_new
            p = r + beta * (p - omega * v)
            p_hat = M(p)
            v = matvec(p_hat)
            denom = r_hat @ v
            if denom == 0.0:
                breakdown = True
                break
            alpha = rho / denom
            s = r - alpha * v
            if np.linalg.norm(s) <= target:
                x += alpha * p_hat
                r = b - matvec(x)
                if np.linalg.norm(r) <= target:
                    return x, SolveReport(it, np.linalg.norm(r) / bnorm, True)
                breakdown = True
                break
            s_hat = M(s)
            t = matvec(s_hat)
            tt = t @ t
            if tt == 0.0:
                breakdown = True
                break
            omega = (t @ s) / tt
            x += alpha * p_hat + omega * s_hat
            r = s - omega * t
            if np.linalg.norm(r) <= target:
                r = b - matvec(x)
                if np.linalg.norm(r) <= target:
                    return x, SolveReport(it, np.linalg.norm(r) / bnorm, True)
                breakdown = True
                break
            if omega == 0.0:
                breakdown = True
                break
        if not breakdown:
            break
        # restart from the true residual
        r = b - matvec(x)
        restarts += 1
        if restarts > 50:
            break
    rnorm = np.linalg.norm(b - matvec(x))
    report = SolveReport(it, rnorm / bnorm, rnorm <= target)
    if not report.converged and raise_on_fail:
        raise SolverError("BiCGSTAB did not converge", report)
    return x, report
