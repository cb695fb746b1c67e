"""Dense 2-D matrix helpers used outside the autodiff tape (fusion, Gram records)."""
from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..errors import NumericError, ShapeError, SingularSystemError


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_finite(m, what):
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} produced non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}")
    with np.errstate(invalid="ignore", over="ignore"):
        out = a @ b
    return _check_finite(out, "matmul")


def solve_spd(a, b, ridge: float = 0.0, name: str = "system") -> np.ndarray:
    """Solve ``(a + ridge*I) x = b`` for symmetric positive definite ``a``.

    Uses a Cholesky factorization. ``name`` identifies the system (usually an
    adapter sub-layer) in the error raised when factorization fails.
    """
    a, b = as_matrix(a), as_matrix(b)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"{name}: solve_spd needs a square matrix, got {a.shape}")
    if b.shape[0] != n:
        raise ShapeError(f"{name}: right-hand side has {b.shape[0]} rows, expected {n}")
    if ridge < 0:
        raise ValueError(f"{name}: ridge must be >= 0, got {ridge}")
    scale = max(np.abs(a).max(), 1.0)
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * scale):
        raise ShapeError(f"{name}: matrix is not symmetric")
    lhs = a + ridge * np.eye(n) if ridge else a
    try:
        factor = cho_factor(lhs, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise SingularSystemError(
            f"{name}: Cholesky factorization failed (ridge={ridge:g}): {exc}") from None
    # Cholesky succeeds on numerically rank-deficient matrices with tiny pivots
    if np.diag(factor[0]).min() <= np.sqrt(np.finfo(float).eps * scale) * 1e-4:
        raise SingularSystemError(f"{name}: system is numerically singular (ridge={ridge:g})")
    return _check_finite(cho_solve(factor, b), f"{name}: solve_spd")
