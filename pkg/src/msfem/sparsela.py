"""Sparse matrix storage and the linear solvers used by the time stepper.

Storage is CSR (backed by scipy.sparse).  The solver contract is the relative
residual bound, not the method: SPD systems go through Jacobi-preconditioned
CG with a sparse-LU fallback, general complex systems through sparse LU or
preconditioned GMRES.  Every solve re-checks its own residual.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SparseMatrix",
    "SolveReport",
    "SolveError",
    "from_triplets",
    "from_arrays",
    "solve_spd",
    "solve_complex",
    "factorized",
]

DEFAULT_TOL = 1e-10


@dataclass
class SolveReport:
    iterations: int
    residual: float
    wall_time: float
    method: str


class SolveError(RuntimeError):
    """Raised when a solver cannot meet the residual contract."""

    def __init__(self, message: str, report: SolveReport):
        super().__init__(f"{message} (method={report.method}, "
                         f"iterations={report.iterations}, residual={report.residual:.3e})")
        self.report = report


class SparseMatrix:
    """CSR matrix over real or complex scalars.

    After finalization column indices are strictly increasing within each row
    and duplicates are summed.
    """

    def __init__(self, csr: sp.csr_matrix):
        csr = csr.tocsr()
        csr.sum_duplicates()
        csr.sort_indices()
        self.csr = csr

    @property
    def n_rows(self) -> int:
        return self.csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self.csr.shape[1]

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.csr)

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.csr @ x

    def __matmul__(self, x):
        return self.csr @ x

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def diagonal(self) -> np.ndarray:
        return self.csr.diagonal()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.csr.T.tocsr())

    def conjugate_transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.csr.conj().T.tocsr())

    def astype(self, dtype) -> "SparseMatrix":
        return SparseMatrix(self.csr.astype(dtype))

    def scaled(self, alpha) -> "SparseMatrix":
        return SparseMatrix(alpha * self.csr)

    def add(self, other: "SparseMatrix", alpha=1.0) -> "SparseMatrix":
        return SparseMatrix((self.csr + alpha * other.csr).tocsr())

    def dump_matrix_market(self, path) -> None:
        from scipy.io import mmwrite

        mmwrite(str(path), self.csr)


def from_triplets(n: int, entries) -> SparseMatrix:
    """Square n x n matrix from (row, col, value) triplets; duplicates summed."""
    entries = list(entries)
    if entries:
        rows = np.array([e[0] for e in entries], dtype=np.int64)
        cols = np.array([e[1] for e in entries], dtype=np.int64)
        vals = np.array([e[2] for e in entries])
    else:
        rows = np.zeros(0, dtype=np.int64)
        cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    return from_arrays(n, n, rows, cols, vals)


def from_arrays(n_rows: int, n_cols: int, rows, cols, vals) -> SparseMatrix:
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows
                      or cols.min() < 0 or cols.max() >= n_cols):
        raise IndexError("triplet index out of range")
    coo = sp.coo_matrix((np.asarray(vals), (rows, cols)), shape=(n_rows, n_cols))
    return SparseMatrix(coo.tocsr())


def _relative_residual(A: SparseMatrix, x: np.ndarray, b: np.ndarray) -> float:
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return float(np.linalg.norm(A.matvec(x)))
    return float(np.linalg.norm(A.matvec(x) - b) / nb)


def _jacobi_cg(A: sp.csr_matrix, b: np.ndarray, tol: float, maxiter: int):
    """Plain preconditioned CG; returns (x, iterations, converged)."""
    d = A.diagonal().copy()
    d[d == 0.0] = 1.0
    dinv = 1.0 / d
    x = np.zeros_like(b)
    r = b.copy()
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return x, 0, True
    z = dinv * r
    p = z.copy()
    rz = float(np.real(np.vdot(r, z)))
    for it in range(1, maxiter + 1):
        Ap = A @ p
        pAp = float(np.real(np.vdot(p, Ap)))
        if pAp <= 0.0:
            return x, it, False  # breakdown: matrix not SPD to working precision
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * nb:
            return x, it, True
        z = dinv * r
        rz_new = float(np.real(np.vdot(r, z)))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, False


def solve_spd(A: SparseMatrix, b: np.ndarray, tol: float = DEFAULT_TOL, *,
              method: str = "auto", maxiter: int | None = None,
              check_symmetry: bool = False) -> tuple[np.ndarray, SolveReport]:
    """Solve a symmetric positive definite system to the requested relative
    residual.

    ``method``: "cg" (fail on non-convergence), "direct", or "auto" (CG with a
    direct fallback).
    """
    if check_symmetry:
        dev = abs(A.csr - A.csr.T).max()
        if dev > 1e-12:
            raise ValueError(f"matrix not symmetric: max deviation {dev:.3e}")
    b = np.asarray(b)
    n = A.n_rows
    if maxiter is None:
        maxiter = max(200, 4 * n)
    t0 = time.perf_counter()
    if method in ("cg", "auto"):
        x, iters, ok = _jacobi_cg(A.csr, b, tol, maxiter)
        if ok:
            res = _relative_residual(A, x, b)
            report = SolveReport(iters, res, time.perf_counter() - t0, "cg-jacobi")
            if res <= max(tol, 10 * tol):
                return x, report
            if method == "cg":
                raise SolveError("CG residual re-check failed", report)
        elif method == "cg":
            report = SolveReport(iters, _relative_residual(A, x, b),
                                 time.perf_counter() - t0, "cg-jacobi")
            raise SolveError("CG did not converge", report)
    x = spla.splu(A.csr.tocsc()).solve(b)
    res = _relative_residual(A, x, b)
    report = SolveReport(0, res, time.perf_counter() - t0, "direct-lu")
    if res > max(tol, 1e-8):
        raise SolveError("direct solve residual above tolerance", report)
    return x, report


def solve_complex(A: SparseMatrix, b: np.ndarray, tol: float = DEFAULT_TOL, *,
                  precond=None, maxiter: int = 2000) -> tuple[np.ndarray, SolveReport]:
    """Solve a general complex square system.

    With ``precond`` (a callable approximating A^{-1}) the solve runs
    preconditioned GMRES and falls back to sparse LU if it stalls; without it
    the solve is direct.
    """
    b = np.asarray(b, dtype=complex)
    n = A.n_rows
    t0 = time.perf_counter()
    if precond is not None:
        M = spla.LinearOperator((n, n), matvec=precond, dtype=complex)
        counter = {"n": 0}

        def cb(_):
            counter["n"] += 1

        x, info = spla.gmres(A.csr, b, rtol=tol * 0.1, atol=0.0, M=M,
                             maxiter=maxiter, restart=200, callback=cb,
                             callback_type="pr_norm")
        if info == 0:
            res = _relative_residual(A, x, b)
            if res <= max(tol, 10 * tol):
                return x, SolveReport(counter["n"], res,
                                      time.perf_counter() - t0, "gmres")
    x = spla.splu(A.csr.tocsc()).solve(b)
    res = _relative_residual(A, x, b)
    report = SolveReport(0, res, time.perf_counter() - t0, "direct-lu")
    if res > max(tol, 1e-8):
        raise SolveError("complex direct solve residual above tolerance", report)
    return x, report


def factorized(A: SparseMatrix):
    """Reusable solver handle (sparse LU) for a matrix applied many times."""
    lu = spla.splu(A.csr.tocsc())
    return lu.solve
