"""Small dense linear-algebra and model primitives.

Everything here works on plain float64 numpy arrays of modest size
(feature dimension k is 4 in the synthetic benchmark, a few hundred at
most by design). Vectors are 1-d arrays, matrices 2-d; no wrapper
classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyData, NonFiniteInput, NotPD

# Positivity floor for penalty scalars (rho, gamma): values are clamped
# to [EPS, inf) at the point of use.
EPS = 1e-6


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a finite float64 1-d array, validating shape and content."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name}: expected 1-d array, got shape {arr.shape}")
    if arr.size < 1:
        raise EmptyData(f"{name}: needs at least one entry")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name}: contains non-finite entries")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite float64 2-d array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name}: expected 2-d array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise EmptyData(f"{name}: needs at least one row and one column")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name}: contains non-finite entries")
    return arr


def rectify(raw: np.ndarray) -> np.ndarray:
    """Entrywise max(0, raw); the nonnegativity map for consensus weights.

    The subgradient convention used throughout the package: derivative 1
    where raw > 0, else 0 (including exactly at the kink).
    """
    return np.maximum(raw, 0.0)


def clamp_positive(raw, floor: float = EPS):
    """Clamp a penalty scalar (or array) to [floor, inf).

    Gradient convention: identity where raw > floor, zero otherwise.
    """
    return np.maximum(raw, floor)


@dataclass
class DiagPD:
    """Diagonal nonnegative-definite matrix stored pre-rectification.

    The effective diagonal is rectify(raw_diag), entrywise >= 0. Training
    updates raw_diag freely; the forward pass only ever sees the
    rectified values.
    """

    raw_diag: np.ndarray

    def __post_init__(self):
        self.raw_diag = np.asarray(self.raw_diag, dtype=np.float64)
        if self.raw_diag.ndim != 1:
            raise DimensionMismatch("DiagPD raw_diag must be 1-d")
        if not np.all(np.isfinite(self.raw_diag)):
            raise NonFiniteInput("DiagPD raw_diag contains non-finite entries")

    @property
    def k(self) -> int:
        return self.raw_diag.shape[0]

    @property
    def effective(self) -> np.ndarray:
        return rectify(self.raw_diag)


def spd_cholesky(A: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric PD matrix.

    Raises NotPD when the factorization hits a non-positive pivot and
    NonFiniteInput / DimensionMismatch on malformed input. Symmetry is
    required to 1e-12 (relative to the largest entry).
    """
    A = as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"spd_cholesky: matrix must be square, got {A.shape}")
    scale = max(1.0, float(np.abs(A).max()))
    if float(np.abs(A - A.T).max()) > 1e-12 * scale:
        raise NotPD("spd_cholesky: matrix is not symmetric")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPD(f"spd_cholesky: {exc}") from exc


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the lower Cholesky factor L of A."""
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def spd_solve(A, b) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A via Cholesky.

    Dimensions are small by design, so a direct factorization is both
    exact enough for the forward-equivalence tests and cheap.
    """
    A = as_matrix(A, "A")
    b = as_vector(b, "b")
    if A.shape[0] != b.shape[0]:
        raise DimensionMismatch(
            f"spd_solve: A is {A.shape} but b has length {b.shape[0]}"
        )
    L = spd_cholesky(A)
    return chol_solve(L, b)


def poly_features(x: float, degree: int) -> np.ndarray:
    """Monomial feature vector (1, x, x^2, ..., x^degree)."""
    if degree < 0:
        raise DimensionMismatch("poly_features: degree must be >= 0")
    if not np.isfinite(x):
        raise NonFiniteInput("poly_features: x is not finite")
    out = np.empty(degree + 1, dtype=np.float64)
    out[0] = 1.0
    for d in range(degree):
        out[d + 1] = out[d] * x
    return out


def design_matrix(xs: np.ndarray, degree: int) -> np.ndarray:
    """Stack poly_features rows for a batch of abscissae."""
    xs = as_vector(xs, "xs")
    out = np.empty((xs.shape[0], degree + 1), dtype=np.float64)
    out[:, 0] = 1.0
    for d in range(degree):
        out[:, d + 1] = out[:, d] * xs
    return out


def _check_xy(X: np.ndarray, v: np.ndarray, Y: np.ndarray):
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(
            f"row count {X.shape[0]} does not match target length {Y.shape[0]}"
        )
    if X.shape[1] != v.shape[0]:
        raise DimensionMismatch(
            f"column count {X.shape[1]} does not match coefficient length {v.shape[0]}"
        )


def sse_loss(X, v, Y) -> float:
    """Sum of squared residuals ||X v - Y||^2."""
    X = as_matrix(X, "X")
    v = as_vector(v, "v")
    Y = as_vector(Y, "Y")
    _check_xy(X, v, Y)
    r = X @ v - Y
    return float(r @ r)


def rmse(X, v, Y) -> float:
    """Root mean squared error sqrt(sse / n)."""
    X = as_matrix(X, "X")
    v = as_vector(v, "v")
    Y = as_vector(Y, "Y")
    if X.shape[0] == 0:
        raise EmptyData("rmse: no rows")
    _check_xy(X, v, Y)
    r = X @ v - Y
    return float(np.sqrt((r @ r) / X.shape[0]))
