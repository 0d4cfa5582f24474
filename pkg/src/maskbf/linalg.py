"""Batched Hermitian linear algebra.

All routines accept stacks of matrices with shape ``(..., N, N)`` and vectors
with shape ``(..., N)``; the leading dimensions are usually frequency bins.
Inputs are symmetrized as ``(M + M^H) / 2`` before any decomposition.
"""

from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite, SingularMatrix

HERMITIAN_RTOL = 1e-10
COND_LIMIT = 1e12


class EigenPair(NamedTuple):
    value: np.ndarray
    vector: np.ndarray


def hermitize(m):
    m = np.asarray(m)
    return 0.5 * (m + np.conj(np.swapaxes(m, -1, -2)))


def as_hermitian(m, rtol=HERMITIAN_RTOL):
    """Validate that ``m`` is a (stack of) Hermitian matrices and symmetrize it.

    Raises DimensionMismatch for non-square input and ValueError when the
    anti-Hermitian part exceeds ``rtol`` relative to the Frobenius norm.
    """
    m = np.asarray(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2] or m.shape[-1] < 1:
        raise DimensionMismatch(f"expected square matrices, got shape {m.shape}")
    skew = m - np.conj(np.swapaxes(m, -1, -2))
    scale = np.linalg.norm(m, axis=(-2, -1))
    if np.any(np.linalg.norm(skew, axis=(-2, -1)) > rtol * np.maximum(scale, 1e-300)):
        raise ValueError("matrix is not Hermitian within tolerance")
    return hermitize(m)


def _check_pair(a, b):
    if a.shape[-1] != a.shape[-2] or a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch: {a.shape} vs {b.shape}")


def canonical_phase_index(v):
    """Index of the largest-magnitude entry along the last axis."""
    return np.argmax(np.abs(v), axis=-1)


def canonicalize(v):
    """Scale ``v`` to unit norm with its largest-magnitude entry real and >= 0."""
    v = np.asarray(v)
    idx = canonical_phase_index(v)
    pivot = np.take_along_axis(v, idx[..., None], axis=-1)
    mag = np.abs(pivot)
    phase = np.where(mag > 0, np.conj(pivot) / np.where(mag > 0, mag, 1.0), 1.0)
    v = v * phase
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


PD_RTOL = 1e-12


def cholesky(b):
    """Cholesky factor of HPD ``b``; eigenvalues must exceed ``1e-12 * tr(b) / N``."""
    b = hermitize(b)
    floor = PD_RTOL * np.real(trace(b)) / b.shape[-1]
    if np.any(np.linalg.eigvalsh(b)[..., 0] <= floor):
        raise NotPositiveDefinite("matrix is not (numerically) positive definite")
    try:
        return np.linalg.cholesky(b)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("matrix is not positive definite") from exc


def gev_decompose(a, b):
    """Full solution of ``A v = lam B v`` for Hermitian A and HPD B.

    Returns eigenvalues in ascending order and B-orthonormal eigenvectors as
    columns (``V^H B V = I``). Uses the Cholesky reduction
    ``B = L L^H``, ``C = L^-1 A L^-H``.
    """
    a = hermitize(a)
    b = np.asarray(b)
    _check_pair(a, b)
    chol = cholesky(b)
    tmp = np.linalg.solve(chol, a)
    c = np.linalg.solve(chol, np.conj(np.swapaxes(tmp, -1, -2)))
    lam, u = np.linalg.eigh(hermitize(c))
    v = np.linalg.solve(np.conj(np.swapaxes(chol, -1, -2)), u)
    return lam, v


def gev_extreme(a, b, which="max"):
    """Extreme generalized eigenpair with unit-norm, phase-canonical vector."""
    if which not in ("max", "min"):
        raise ValueError(f"which must be 'max' or 'min', got {which!r}")
    lam, v = gev_decompose(np.asarray(a), np.asarray(b))
    i = -1 if which == "max" else 0
    return EigenPair(lam[..., i], canonicalize(v[..., i]))


def sev_max(a):
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch(f"expected square matrices, got shape {a.shape}")
    lam, v = np.linalg.eigh(hermitize(a))
    return EigenPair(lam[..., -1], canonicalize(v[..., -1]))


def solve(a, b):
    """Solve ``A x = b`` for each matrix in the stack.

    Raises SingularMatrix when the condition number exceeds 1e12.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != a.shape[-2] or b.shape[-1] != a.shape[-1]:
        raise DimensionMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    cond = np.linalg.cond(a)
    if np.any(~np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        raise SingularMatrix(f"condition number {np.max(cond):.3g} exceeds {COND_LIMIT:g}")
    return np.linalg.solve(a, b[..., None])[..., 0]


def trace(a):
    return np.trace(np.asarray(a), axis1=-2, axis2=-1)
