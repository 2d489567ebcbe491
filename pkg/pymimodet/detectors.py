"""Classic detectors for y = Hx + n.

Problems may be batched: y is (N_r,) or (B, N_r); h is (N_r, N_t) shared by
the batch or (B, N_r, N_t); sigma2 is a scalar or (B,).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .constants import (
    AMP_DIVERGENCE_FACTOR,
    AMP_ITERATIONS,
    DETECTOR_NAMES,
    ML_BUDGET,
    MODEL_KINDS,
    OAMP_ITERATIONS,
    SIGMA2_FLOOR,
)
from .constellation import hard_decision
from .denoiser import gaussian_denoise_grad
from .exceptions import CapacityError, ContractViolation, DivergenceError
from .models import ForwardTrace, forward, oamp_forward
from .numerics import conj_transpose, hermitian_solve, pseudo_inverse

_LOGGER = logging.getLogger(__name__)

_ML_CHUNK = 4096
_ML_BLOCK = 1 << 16


@dataclass(frozen=True, eq=False)
class DetectorProblem:
    y: np.ndarray
    h: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.complex128)
        h = np.asarray(self.h, dtype=np.complex128)
        sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if y.ndim not in (1, 2) or h.ndim not in (2, 3):
            raise ContractViolation(f"Invalid problem shapes y={y.shape} h={h.shape}.")
        if h.shape[-2] != y.shape[-1]:
            raise ContractViolation(f"Channel has {h.shape[-2]} rows but observation has length {y.shape[-1]}.")
        if h.ndim == 3 and (y.ndim != 2 or h.shape[0] != y.shape[0]):
            raise ContractViolation(f"Per-item channels {h.shape} need a matching observation batch, got {y.shape}.")
        if sigma2.ndim > 1 or (sigma2.ndim == 1 and (y.ndim != 2 or sigma2.shape[0] != y.shape[0])):
            raise ContractViolation(f"Noise variance shape {sigma2.shape} does not match observations {y.shape}.")
        if np.any(sigma2 < 0.0):
            raise ContractViolation("Noise variance must be non-negative.")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def n_r(self):
        return self.h.shape[-2]

    @property
    def n_t(self):
        return self.h.shape[-1]

    @property
    def batch(self):
        return self.y.shape[0] if self.y.ndim == 2 else None

    def item(self, b):
        h = self.h[b] if self.h.ndim == 3 else self.h
        sigma2 = self.sigma2[b] if self.sigma2.ndim == 1 else self.sigma2
        return DetectorProblem(self.y[b], h, sigma2)


@dataclass(frozen=True, eq=False)
class DetectionResult:
    symbols: np.ndarray
    soft: np.ndarray
    residual_norm2: np.ndarray
    trace: Optional[ForwardTrace] = None


def _mv(a, v):
    return (a @ v[..., None])[..., 0]


def _residual_norm2(p, c, symbols):
    r = p.y - _mv(p.h, c.symbols(symbols))
    return np.sum(r.real ** 2 + r.imag ** 2, axis=-1)


def _result(p, c, soft, trace=None):
    symbols = hard_decision(soft, c)
    return DetectionResult(symbols=symbols, soft=soft, residual_norm2=_residual_norm2(p, c, symbols), trace=trace)


def zf_detect(p, c):
    return _result(p, c, _mv(pseudo_inverse(p.h), p.y))


def matched_filter_detect(p, c):
    return _result(p, c, _mv(conj_transpose(p.h), p.y))


def mmse_detect(p, c):
    hh = conj_transpose(p.h)
    sigma2 = p.sigma2[..., None, None] if p.sigma2.ndim else p.sigma2
    regularized = hh @ p.h + sigma2 * np.eye(p.n_t)
    soft = hermitian_solve(regularized, _mv(hh, p.y)[..., None])[..., 0]
    return _result(p, c, soft)


def _vblast_shared(h, y, c):
    """Successive cancellation for one channel and observations y of shape (B, N_r)."""
    n_t = h.shape[1]
    y_res = y.copy()
    soft = np.zeros((y.shape[0], n_t), dtype=np.complex128)
    remaining = list(range(n_t))
    while remaining:
        pinv = pseudo_inverse(h[:, remaining])
        row_norms = np.sum(np.abs(pinv) ** 2, axis=1)
        k = int(np.argmin(row_norms))
        j = remaining.pop(k)
        soft[:, j] = y_res @ pinv[k]
        decided = c.symbols(hard_decision(soft[:, j], c))
        y_res -= decided[:, None] * h[:, j]
    return soft


def vblast_detect(p, c):
    y = np.atleast_2d(p.y)
    if p.h.ndim == 2:
        soft = _vblast_shared(p.h, y, c)
    else:
        soft = np.concatenate([_vblast_shared(p.h[b], y[b:b + 1], c) for b in range(y.shape[0])])
    return _result(p, c, soft if p.y.ndim == 2 else soft[0])


def amp_detect(p, c, iters=AMP_ITERATIONS):
    """AMP with Onsager correction; sigma_t^2 and alpha_t are estimated from the iterates."""
    y = np.atleast_2d(p.y)
    h, hh = p.h, conj_transpose(p.h)
    batch, n_r = y.shape
    n_t = p.n_t
    limit = AMP_DIVERGENCE_FACTOR * np.sqrt(n_t)

    x_hat = np.zeros((batch, n_t), dtype=np.complex128)
    onsager = np.zeros_like(x_hat)
    correction = np.zeros_like(x_hat)
    alpha = np.zeros(batch)
    zs, xs, ss, rs = [], [], [], []
    for t in range(iters):
        r = y - _mv(h, x_hat)
        sigma2_t = np.maximum(np.sum(np.abs(r) ** 2, axis=-1) / n_r, SIGMA2_FLOOR)
        if t > 0:
            onsager = alpha[:, None] * correction
        correction = _mv(hh, r) + onsager
        z = x_hat + correction
        grad = gaussian_denoise_grad(z, sigma2_t[:, None], c)
        x_hat = grad.mean
        alpha = n_t / n_r * np.mean(grad.half_trace, axis=-1)

        norms = np.maximum(np.linalg.norm(x_hat, axis=-1), np.linalg.norm(z, axis=-1))
        if not np.all(np.isfinite(z)) or np.any(norms > limit):
            raise DivergenceError(f"AMP diverged at iteration {t}.", iteration=t)

        zs.append(z)
        xs.append(x_hat)
        ss.append(np.broadcast_to(sigma2_t[:, None], z.shape).copy())
        rs.append(r)

    trace = ForwardTrace(z=np.stack(zs), x_hat=np.stack(xs), sigma2=np.stack(ss), residual=np.stack(rs))
    if p.y.ndim == 1:
        trace = ForwardTrace(*(a[:, 0] for a in trace[:4]))
    return _result(p, c, trace.final, trace)


def oamp_detect(p, c, iters=OAMP_ITERATIONS):
    trace = oamp_forward(p, c, iters)
    return _result(p, c, trace.final, trace)


def _candidates(order, n_t, start, stop):
    # first transmitter is the most significant digit: lexicographic order
    return np.stack(np.unravel_index(np.arange(start, stop), (order,) * n_t), axis=-1)


def _ml_shared(h, y, c, total):
    best = np.full(y.shape[0], np.inf)
    best_idx = np.zeros((y.shape[0], h.shape[1]), dtype=np.int64)
    rows = max(1, _ML_BLOCK // min(total, _ML_CHUNK))
    for start in range(0, total, _ML_CHUNK):
        idx = _candidates(c.order, h.shape[1], start, min(start + _ML_CHUNK, total))
        hx = c.symbols(idx) @ h.T
        for lo in range(0, y.shape[0], rows):
            sl = slice(lo, lo + rows)
            diff = y[sl, None, :] - hx[None]
            dist = np.sum(diff.real ** 2 + diff.imag ** 2, axis=-1)
            k = np.argmin(dist, axis=1)
            d = dist[np.arange(dist.shape[0]), k]
            # strict: earlier candidates win ties
            better = d < best[sl]
            best[sl][better] = d[better]
            best_idx[sl][better] = idx[k[better]]
    return best_idx


def ml_bruteforce(p, c, budget=ML_BUDGET):
    total = c.order ** p.n_t
    if total > budget:
        raise CapacityError(f"Exhaustive search needs {total} candidates, budget is {budget}.", candidates=total)
    y = np.atleast_2d(p.y)
    if p.h.ndim == 2:
        symbols = _ml_shared(p.h, y, c, total)
    else:
        symbols = np.concatenate([_ml_shared(p.h[b], y[b:b + 1], c, total) for b in range(y.shape[0])])
    if p.y.ndim == 1:
        symbols = symbols[0]
    soft = c.symbols(symbols)
    return DetectionResult(symbols=symbols, soft=soft, residual_norm2=_residual_norm2(p, c, symbols))


_DETECTORS = {
    "zf": zf_detect,
    "mf": matched_filter_detect,
    "mmse": mmse_detect,
    "vblast": vblast_detect,
    "amp": amp_detect,
    "oamp": oamp_detect,
    "ml": ml_bruteforce,
}


def learned_detect(p, c, params):
    """Hard decision on the last denoiser output x_T, the quantity the training loss targets."""
    trace = forward(p, c, params)
    return _result(p, c, trace.final, trace)


def detect(name, p, c, params=None, **kw):
    """Dispatch on the detector names used by the CLI; learned kinds need trained params."""
    if name in MODEL_KINDS:
        if params is None or params.kind != name:
            raise ContractViolation(f"Detector {name} needs trained {name} parameters.")
        return learned_detect(p, c, params)
    if name not in _DETECTORS:
        raise ContractViolation(f"Invalid detector {name}, must be one of {', '.join(DETECTOR_NAMES)}.")
    return _DETECTORS[name](p, c, **kw)
