"""Sparse SPD solves with one factorization per system, reused across right-hand sides."""

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import LinearOperator, cg, splu

from assembly import SparseSpdSystem

try:
    from sksparse.cholmod import CholmodNotPositiveDefiniteError, cholesky
    HAVE_CHOLMOD = True
except ImportError:
    HAVE_CHOLMOD = False

log = logging.getLogger(__name__)

SOLVE_RTOL = 1e-10
SYMMETRY_RTOL = 1e-12
ORDERINGS = ("mmd", "rcm")
METHODS = ("direct", "cg")


class NotSPDError(np.linalg.LinAlgError):
    """Raised when a system matrix is not symmetric positive definite."""


@dataclass
class SolverStats:
    """Factorization and solve counters, keyed by mesh uid."""

    factorizations: Dict[int, int] = field(default_factory=dict)
    solves: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def count_factorization(self, mesh_uid: int) -> None:
        with self._lock:
            self.factorizations[mesh_uid] = self.factorizations.get(mesh_uid, 0) + 1

    def count_solve(self) -> None:
        with self._lock:
            self.solves += 1

    @property
    def total_factorizations(self) -> int:
        return sum(self.factorizations.values())


class Factorization:
    """Immutable factorization of a SparseSpdSystem; concurrent solves are allowed.

    With an explicit ordering the backend factors A[ordering][:, ordering].
    """

    def __init__(self, matrix: sp.csr_matrix, backend: str, handle, mesh_uid: int,
                 ordering: Optional[np.ndarray] = None):
        self.matrix = matrix
        self.backend = backend
        self.handle = handle
        self.mesh_uid = mesh_uid
        self.ordering = ordering

    def __repr__(self) -> str:
        return f"Factorization({self.backend}, n={self.n}, mesh={self.mesh_uid})"

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def apply_inverse(self, b: np.ndarray) -> np.ndarray:
        if self.backend == "cholmod":
            return self.handle(b)
        if self.backend == "cg":
            x, info = cg(self.matrix, b, rtol=SOLVE_RTOL, maxiter=10 * self.n, M=self.handle)
            if info > 0:
                log.warning("cg did not reach rtol %.0e in %d iterations", SOLVE_RTOL, info)
            return x
        if self.ordering is None:
            return self.handle.solve(b)
        out = np.empty_like(b)
        out[self.ordering] = self.handle.solve(b[self.ordering])
        return out

    def reconstruct(self) -> np.ndarray:
        """Dense matrix rebuilt from the factors (small systems only)."""
        if self.backend == "cg":
            return self.matrix.toarray()
        out = np.zeros((self.n, self.n))
        if self.backend == "cholmod":
            lower = self.handle.L()
            perm = self.handle.P()
            out[np.ix_(perm, perm)] = (lower @ lower.T).toarray()
            return out
        lu = self.handle
        ones = np.ones(self.n)
        rows = sp.csc_matrix((ones, (lu.perm_r, np.arange(self.n))))
        cols = sp.csc_matrix((ones, (np.arange(self.n), lu.perm_c)))
        factored = (rows.T @ (lu.L @ lu.U) @ cols.T).toarray()
        if self.ordering is None:
            return factored
        out[np.ix_(self.ordering, self.ordering)] = factored
        return out


def _check_symmetric(matrix: sp.csr_matrix) -> None:
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"matrix is not square: {matrix.shape}")
    if matrix.nnz == 0:
        return
    scale = abs(matrix).max()
    asym = abs(matrix - matrix.T).max()
    if asym > SYMMETRY_RTOL * scale:
        raise NotSPDError(f"matrix not SPD: not symmetric (max asymmetry {asym:.3e})")


def _superlu(matrix: sp.csr_matrix, ordering: str):
    csc = matrix.tocsc()
    perm = None
    if ordering == "rcm":
        perm = reverse_cuthill_mckee(matrix, symmetric_mode=True)
        csc = csc[perm][:, perm].tocsc()
    try:
        lu = splu(csc, permc_spec="NATURAL" if perm is not None else "MMD_AT_PLUS_A",
                  diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NotSPDError(f"matrix not SPD: {exc}") from exc
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise NotSPDError("matrix not SPD: off-diagonal pivoting was required")
    pivots = lu.U.diagonal()
    if np.any(pivots <= 0):
        raise NotSPDError(f"matrix not SPD: pivot {pivots.min():.3e}")
    return lu, perm


def factorize(system: SparseSpdSystem, method: str = "direct", ordering: str = "mmd",
              stats: Optional[SolverStats] = None) -> Factorization:
    """Factorize once; raises NotSPDError on a non-positive pivot."""
    if method not in METHODS:
        raise ValueError(f"unknown solver method '{method}' (expected one of {', '.join(METHODS)})")
    if ordering not in ORDERINGS:
        raise ValueError(f"unknown ordering '{ordering}' (expected one of {', '.join(ORDERINGS)})")
    matrix = system.matrix.tocsr()
    _check_symmetric(matrix)
    started = time.perf_counter()

    if method == "cg":
        diag = matrix.diagonal()
        if np.any(diag <= 0):
            raise NotSPDError("matrix not SPD: non-positive diagonal entry")
        inv_diag = 1.0 / diag
        jacobi = LinearOperator(matrix.shape, matvec=lambda v: inv_diag * v, dtype=float)
        fact = Factorization(matrix, "cg", jacobi, system.mesh_uid)
    elif HAVE_CHOLMOD and ordering == "mmd":
        try:
            handle = cholesky(matrix.tocsc())
        except CholmodNotPositiveDefiniteError as exc:
            raise NotSPDError(f"matrix not SPD: {exc}") from exc
        # simplicial LDL^T factors indefinite matrices without raising
        pivots = handle.D()
        if np.any(pivots <= 0):
            raise NotSPDError(f"matrix not SPD: pivot {pivots.min():.3e}")
        fact = Factorization(matrix, "cholmod", handle, system.mesh_uid)
    else:
        lu, perm = _superlu(matrix, ordering)
        fact = Factorization(matrix, "superlu", lu, system.mesh_uid, ordering=perm)

    if stats is not None:
        stats.count_factorization(system.mesh_uid)
    system.factorization = fact
    log.info("factorized n=%d nnz=%d with %s in %.1f ms", matrix.shape[0], matrix.nnz,
             fact.backend, 1e3 * (time.perf_counter() - started))
    return fact


def solve(fact: Factorization, rhs: np.ndarray, stats: Optional[SolverStats] = None) -> np.ndarray:
    """Solve A x = rhs to relative residual SOLVE_RTOL, refining once if needed."""
    b = np.asarray(rhs, dtype=float)
    if b.shape != (fact.n,):
        raise ValueError(f"dimension mismatch: rhs of shape {b.shape} for n={fact.n}")
    if stats is not None:
        stats.count_solve()
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros(fact.n)

    x = fact.apply_inverse(b)
    residual = b - fact.matrix @ x
    if np.linalg.norm(residual) > SOLVE_RTOL * norm_b:
        x = x + fact.apply_inverse(residual)
        rel = np.linalg.norm(b - fact.matrix @ x) / norm_b
        if rel > SOLVE_RTOL:
            log.warning("relative residual %.3e after refinement exceeds %.0e", rel, SOLVE_RTOL)
    return x
