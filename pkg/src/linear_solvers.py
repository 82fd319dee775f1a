"""Sparse Linear Solvers

Multi-right-hand-side solvers for the complex symmetric systems
((iω/ν)E + A₀ + diag(A₁)) X = B of the forward model.

Three methods are available:
    iterative  plain preconditioned CG for real systems (ω = 0) and
               conjugate-orthogonal CG (COCG) for complex symmetric ones
    direct     sparse LU factorization reused for all columns
    dense      dense LU factorization (n ≤ 4096), also the test oracle
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .errors import SolverError

# Set up logging
logger = logging.getLogger(__name__)

SOLVER_METHODS = ('iterative', 'direct', 'dense')
DENSE_SIZE_LIMIT = 4096


def cocg(A: sparse.spmatrix, b: np.ndarray, inv_diag: np.ndarray,
         tol: float = 1e-10, maxiter: int = 1000) -> Tuple[np.ndarray, Dict]:
    """Conjugate-orthogonal CG for a complex symmetric system A x = b.

    Identical to preconditioned CG except that the bilinear form rᵀz replaces
    the Hermitian inner product, which is what makes the recurrence valid for
    A = Aᵀ ≠ Aᴴ.

    Args:
        A: Complex symmetric sparse matrix
        b: Right-hand side
        inv_diag: Inverse of the Jacobi preconditioner diagonal
        tol: Relative residual tolerance ‖b − Ax‖ / ‖b‖
        maxiter: Maximum number of iterations

    Returns:
        Tuple of (solution, info dict with 'niter', 'success', 'res_norm')
    """
    n = A.shape[0]
    assert A.shape == (n, n)
    assert b.shape == (n,)

    x = np.zeros(n, dtype=complex)
    r = b.astype(complex, copy=True)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return x, {'niter': 0, 'success': True, 'res_norm': 0.0}

    z = inv_diag * r
    p = z.copy()
    rho = r @ z
    res_norm = b_norm
    tol_abs = tol * b_norm

    m = 0
    for m in range(1, maxiter + 1):
        q = A @ p
        pq = p @ q
        if pq == 0.0 or not np.isfinite(pq):
            raise SolverError("COCG breakdown (pᵀAp = 0)", iterations=m,
                              residual=res_norm / b_norm)
        alpha = rho / pq
        x += alpha * p
        r -= alpha * q
        res_norm = np.linalg.norm(r)
        if res_norm <= tol_abs:
            break
        z = inv_diag * r
        rho_next = r @ z
        if rho_next == 0.0:
            raise SolverError("COCG breakdown (rᵀz = 0)", iterations=m,
                              residual=res_norm / b_norm)
        p = z + (rho_next / rho) * p
        rho = rho_next

    info = {'niter': m, 'success': res_norm <= tol_abs, 'res_norm': res_norm / b_norm}
    return x, info


def _jacobi_inverse(K: sparse.spmatrix) -> np.ndarray:
    diag = K.diagonal()
    if np.any(diag == 0):
        raise SolverError("zero diagonal entry, Jacobi preconditioner undefined")
    return 1.0 / diag


def _solve_iterative(K, rhs, transpose, tol, maxiter, context):
    if transpose:
        K = K.T.tocsr()
    n, m = rhs.shape
    inv_diag = _jacobi_inverse(K)
    is_real = not np.iscomplexobj(K.data) and not np.iscomplexobj(rhs)
    X = np.zeros((n, m), dtype=float if is_real else complex)

    if is_real:
        preconditioner = sparse.diags(inv_diag)
        for j in range(m):
            b = rhs[:, j]
            if not np.any(b):
                continue
            x, info = spla.cg(K, b, rtol=tol, atol=0.0, maxiter=maxiter, M=preconditioner)
            residual = np.linalg.norm(b - K @ x) / np.linalg.norm(b)
            if info != 0:
                raise SolverError("CG did not converge" if info > 0 else "CG breakdown",
                                  iterations=max(info, 0), residual=residual,
                                  context=f"{context}, column {j}")
            X[:, j] = x
    else:
        for j in range(m):
            x, info = cocg(K, rhs[:, j].astype(complex), inv_diag, tol=tol, maxiter=maxiter)
            if not info['success']:
                raise SolverError("COCG did not converge", iterations=info['niter'],
                                  residual=info['res_norm'], context=f"{context}, column {j}")
            logger.debug(f"COCG column {j}: {info['niter']} iterations, residual {info['res_norm']:.2e}")
            X[:, j] = x
    return X


def _solve_direct(K, rhs, transpose, context):
    dtype = np.result_type(K.dtype, rhs.dtype)
    try:
        lu = spla.splu(K.astype(dtype).tocsc())
    except RuntimeError as e:
        raise SolverError(f"sparse LU failed: {e}", context=context)
    X = lu.solve(np.ascontiguousarray(rhs, dtype=dtype), trans='T' if transpose else 'N')
    if not np.all(np.isfinite(X)):
        raise SolverError("sparse LU produced non-finite values", context=context)
    return X


def _solve_dense(K, rhs, transpose, context):
    n = K.shape[0]
    if n > DENSE_SIZE_LIMIT:
        raise ValueError(f"dense solver limited to n <= {DENSE_SIZE_LIMIT}, got n = {n}")
    dtype = np.result_type(K.dtype, rhs.dtype)
    try:
        lu_piv = scipy.linalg.lu_factor(K.toarray().astype(dtype), check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise SolverError(f"dense LU failed: {e}", context=context)
    X = scipy.linalg.lu_solve(lu_piv, rhs.astype(dtype), trans=1 if transpose else 0)
    if not np.all(np.isfinite(X)):
        raise SolverError("dense LU produced non-finite values (singular system)", context=context)
    return X


def solve_columns(K: sparse.spmatrix, rhs: np.ndarray, method: str = 'iterative',
                  tol: float = 1e-10, maxiter: Optional[int] = None,
                  transpose: bool = False, context: str = "") -> np.ndarray:
    """Solve K X = rhs (or Kᵀ X = rhs) column by column.

    The transposed solve never conjugates: the forward systems are complex
    symmetric, not Hermitian.

    Args:
        K: Square sparse system matrix
        rhs: Dense n×m right-hand sides
        method: One of 'iterative', 'direct', 'dense'
        tol: Relative residual tolerance for the iterative method
        maxiter: Iteration cap (default 10·n)
        transpose: Solve with Kᵀ instead of K
        context: Label added to error messages

    Returns:
        Dense n×m solution
    """
    if method not in SOLVER_METHODS:
        raise ValueError(f"unknown solver method '{method}', expected one of {SOLVER_METHODS}")
    rhs = np.asarray(rhs)
    if rhs.ndim == 1:
        rhs = rhs[:, None]
    if rhs.shape[0] != K.shape[0]:
        raise ValueError(f"right-hand side has {rhs.shape[0]} rows, system has {K.shape[0]}")

    if method == 'iterative':
        return _solve_iterative(K, rhs, transpose, tol, maxiter or 10 * K.shape[0], context)
    if method == 'direct':
        return _solve_direct(K, rhs, transpose, context)
    return _solve_dense(K, rhs, transpose, context)
