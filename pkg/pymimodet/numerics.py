"""Complex linear algebra and the counter-based random stream contract.

Matrices are numpy complex128 arrays and may carry leading batch axes,
(..., rows, cols). Vectors are (..., n).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .constants import PIVOT_RTOL
from .exceptions import ContractViolation, SingularMatrixError

_MASK64 = 0xFFFFFFFFFFFFFFFF


def stream_hash(*indices):
    """64-bit hash of a tuple of integers, stable across runs and platforms."""
    packed = b"".join(struct.pack("<Q", int(i) & _MASK64) for i in indices)
    return int.from_bytes(hashlib.blake2b(packed, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def child(self, *indices):
        return RngStream(self.seed, stream_hash(self.stream_id, *indices))

    def generator(self):
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise ContractViolation(f"rng must be a RngStream or numpy Generator, got {type(rng)}")


def rng_draw_gaussian(s, n):
    if n < 0:
        raise ContractViolation(f"Invalid draw count {n}, must be non-negative.")
    return as_generator(s).standard_normal(n)


def complex_gaussian(gen, shape, variance=1.0):
    """CN(0, variance) entries: each real component has variance/2."""
    draws = gen.standard_normal((2,) + tuple(shape))
    return np.sqrt(variance / 2.0) * (draws[0] + 1j * draws[1])


def conj_transpose(a):
    return np.conj(np.swapaxes(a, -1, -2))


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"Cannot multiply shapes {a.shape} and {b.shape}.")
    return a @ b


def frobenius_norm2(a):
    a = np.asarray(a)
    return np.sum(a.real ** 2 + a.imag ** 2, axis=(-2, -1))


def hermitian_solve(a, b):
    """Solve a x = b for Hermitian positive-definite a; b is (..., n, k)."""
    a = np.asarray(a, dtype=np.complex128)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("Matrix is not positive definite.", 0.0)
    pivots = np.abs(np.diagonal(chol, axis1=-2, axis2=-1)) ** 2
    smallest = float(np.min(pivots))
    if not np.all(np.min(pivots, axis=-1) > PIVOT_RTOL * np.max(pivots, axis=-1)):
        raise SingularMatrixError(f"Matrix is numerically singular, smallest pivot {smallest:.3e}.", smallest)
    forward = np.linalg.solve(chol, b)
    return np.linalg.solve(conj_transpose(chol), forward)


def pseudo_inverse(h):
    """(H^H H)^{-1} H^H for full column rank H, via Gram Cholesky with an SVD fallback."""
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim < 2:
        raise ContractViolation(f"pseudo_inverse expects a matrix, got shape {h.shape}.")
    rows, cols = h.shape[-2:]
    if rows < cols:
        raise ContractViolation(f"pseudo_inverse needs rows >= cols, got {rows}x{cols}.")

    hh = conj_transpose(h)
    gram = hh @ h
    try:
        chol = np.linalg.cholesky(gram)
        pivots = np.abs(np.diagonal(chol, axis1=-2, axis2=-1)) ** 2
        if np.all(np.min(pivots, axis=-1) >= PIVOT_RTOL * np.max(pivots, axis=-1)):
            chol_inv = np.linalg.inv(chol)
            return conj_transpose(chol_inv) @ (chol_inv @ hh)
    except np.linalg.LinAlgError:
        pass

    u, s, vh = np.linalg.svd(h, full_matrices=False)
    tol = max(rows, cols) * np.finfo(np.float64).eps * s[..., :1]
    if np.any(s[..., -1:] <= tol):
        smallest = float(np.min(s[..., -1]) ** 2)
        raise SingularMatrixError(f"Gram matrix is singular, smallest pivot {smallest:.3e}.", smallest)
    return conj_transpose(vh) @ (conj_transpose(u) / s[..., :, None])


def svd_values(h):
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim == 2:
        return sla.svdvals(h)
    return np.linalg.svd(h, compute_uv=False)


def real_embed(h, y):
    """Equivalent real-valued system [[Re H, -Im H], [Im H, Re H]], [Re y; Im y]."""
    h = np.asarray(h, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    if h.shape[-2] != y.shape[-1]:
        raise ContractViolation(f"Channel rows {h.shape[-2]} do not match observation length {y.shape[-1]}.")
    top = np.concatenate([h.real, -h.imag], axis=-1)
    bottom = np.concatenate([h.imag, h.real], axis=-1)
    return np.concatenate([top, bottom], axis=-2), np.concatenate([y.real, y.imag], axis=-1)


def real_unembed(v):
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]
