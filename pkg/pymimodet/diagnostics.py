"""Error dynamics, Gaussianity of the linear-stage error, conditioning and
multiplication counts."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from .channel import apply_channel
from .constants import (
    AMP_ITERATIONS,
    ANDERSON_CRITICAL_5PCT,
    ANDERSON_MIN_SAMPLES,
    DEFAULT_LAYERS,
    OAMP_ITERATIONS,
    SIGNALS_PER_COHERENCE,
    TRAIN_BATCH_SIZE,
)
from .detectors import DetectorProblem, detect
from .exceptions import ContractViolation, DegenerateSampleError, SingularMatrixError
from .models import forward
from .numerics import RngStream, as_generator, svd_values

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LayerTrace:
    e_lin_norm: np.ndarray
    e_den_norm: np.ndarray
    # (T, n_samples, N_t) complex linear-stage errors z_t - x
    e_lin: np.ndarray

    @property
    def n_layers(self):
        return len(self.e_lin_norm)


@dataclass(frozen=True, eq=False)
class AndersonReport:
    # (T, N_t)
    statistic: np.ndarray

    @property
    def passed(self):
        return self.statistic < ANDERSON_CRITICAL_5PCT

    def gaussian_fraction(self):
        return np.mean(self.passed, axis=1)


class OpCount(NamedTuple):
    one_time: float
    per_signal: float
    amortization: int = SIGNALS_PER_COHERENCE

    @property
    def amortized_one_time(self):
        return self.one_time / self.amortization

    @property
    def total(self):
        return self.per_signal + self.amortized_one_time


def _run_model(model, p, c):
    if isinstance(model, str):
        return detect(model, p, c).trace
    return forward(p, c, model)


def layer_error_trace(model, h, c, sigma2, n_samples, rng):
    """Linear and denoiser stage errors of an iterative detector against known symbols.

    model is a trained parameter set or the name of a classic iterative
    detector (amp, oamp).
    """
    if n_samples < 1:
        raise ContractViolation(f"Invalid sample count {n_samples}, must be at least 1.")
    gen = as_generator(rng)
    h = np.asarray(h, dtype=np.complex128)
    x = c.symbols(gen.integers(0, c.order, size=(n_samples, h.shape[1])))
    y = apply_channel(h, x, sigma2, gen)
    trace = _run_model(model, DetectorProblem(y, h, sigma2), c)

    e_lin = trace.z - x
    e_den = trace.x_hat - x
    return LayerTrace(
        e_lin_norm=np.mean(np.linalg.norm(e_lin, axis=-1), axis=-1),
        e_den_norm=np.mean(np.linalg.norm(e_den, axis=-1), axis=-1),
        e_lin=e_lin,
    )


def anderson_statistic(samples):
    """Anderson-Darling A^2 for normality with mean and variance estimated.

    Scaled by (1 + 4/n - 25/n^2) so it compares against 0.786 at 5%.
    """
    w = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = w.size
    if n < ANDERSON_MIN_SAMPLES:
        raise ContractViolation(f"Need at least {ANDERSON_MIN_SAMPLES} samples, got {n}.")
    std = np.std(w, ddof=1)
    if not std > 0.0:
        raise DegenerateSampleError("Sample has zero variance.")
    w = (w - np.mean(w)) / std
    i = np.arange(1, n + 1)
    s = np.sum((2 * i - 1) * (norm.logcdf(w) + norm.logsf(w[::-1])))
    a2 = -n - s / n
    return float(a2 * (1.0 + 4.0 / n - 25.0 / n ** 2))


def _standardize(v):
    std = np.std(v, ddof=1)
    if not std > 0.0:
        raise DegenerateSampleError("Sample has zero variance.")
    return (v - np.mean(v)) / std


def anderson_report(e_lin):
    """Per layer and transmitter: real and imaginary parts standardized, then pooled."""
    e_lin = np.asarray(e_lin)
    n_layers, _, n_t = e_lin.shape
    stat = np.zeros((n_layers, n_t))
    for t in range(n_layers):
        for i in range(n_t):
            e = e_lin[t, :, i]
            stat[t, i] = anderson_statistic(np.concatenate([_standardize(e.real), _standardize(e.imag)]))
    return AndersonReport(statistic=stat)


def gaussian_fraction(model, h, c, sigma2, n_samples=10000, rng=None):
    if n_samples < 100:
        raise ContractViolation(f"Invalid sample count {n_samples}, must be at least 100.")
    trace = layer_error_trace(model, h, c, sigma2, n_samples, rng if rng is not None else RngStream(0))
    return anderson_report(trace.e_lin).gaussian_fraction()


def condition_number(h):
    s = svd_values(h)
    tol = max(np.shape(h)) * np.finfo(np.float64).eps * s[0]
    if s[-1] <= tol:
        raise SingularMatrixError(f"Channel is rank deficient, smallest singular value {s[-1]:.3e}.", float(s[-1]))
    return float(s[0] / s[-1])


def _default_layers(kind):
    if kind == "amp":
        return AMP_ITERATIONS
    if kind == "oamp":
        return OAMP_ITERATIONS
    return DEFAULT_LAYERS


def multiplication_count(kind, n_r, n_t, layers=None, amortization=SIGNALS_PER_COHERENCE, order=4,
                         train_iterations=4, batch_size=TRAIN_BATCH_SIZE):
    """Real multiplications per detected signal on the real-valued system.

    With R = 2 N_r and C = 2 N_t: a matrix-vector product costs R C, an n x n
    inverse n^3, the denoiser 3 sqrt(M) per real coordinate, and one training
    sample three forward passes. Per-channel work is in one_time and is spread
    over the signals of a coherence interval.
    """
    r, c = 2 * n_r, 2 * n_t
    t = _default_layers(kind) if layers is None else layers
    mv = r * c
    den = 3 * np.sqrt(order) * c

    if kind in ("zf", "mmse"):
        return OpCount(one_time=2 * c * c * r + c ** 3, per_signal=mv, amortization=amortization)
    if kind == "mf":
        return OpCount(one_time=0, per_signal=mv, amortization=amortization)
    if kind == "vblast":
        one_time = sum(2 * k * k * r + k ** 3 for k in range(c, 0, -2))
        return OpCount(one_time=one_time, per_signal=2 * c * r, amortization=amortization)
    if kind == "amp":
        return OpCount(one_time=0, per_signal=t * (2 * mv + den + c), amortization=amortization)
    if kind in ("oamp", "oampnet"):
        layer = mv + r + r * r + r ** 3 + c * r * r + mv + mv + c * c * r + mv + den
        return OpCount(one_time=r * r * c, per_signal=t * layer, amortization=amortization)
    if kind == "mmnet-iid":
        layer = 2 * mv + c + den + r + c
        return OpCount(one_time=c * c * r, per_signal=t * layer, amortization=amortization)
    if kind == "mmnet":
        layer = 2 * mv + den + r + c
        constants = t * (c * c * r + mv)
        training = train_iterations * batch_size * 3 * t * layer
        return OpCount(one_time=constants + training, per_signal=t * layer, amortization=amortization)
    if kind == "ml":
        candidates = order ** n_t
        return OpCount(one_time=candidates * mv, per_signal=candidates * r, amortization=amortization)
    raise ContractViolation(f"Invalid detector {kind}.")


def trace_rows(trace):
    rows = []
    for t in range(trace.n_layers):
        rows.append((t, "linear", "error_norm", float(trace.e_lin_norm[t])))
        rows.append((t, "denoiser", "error_norm", float(trace.e_den_norm[t])))
    return rows


def anderson_rows(report):
    rows = []
    passed = report.passed
    for t in range(report.statistic.shape[0]):
        for i in range(report.statistic.shape[1]):
            rows.append((t, i, float(report.statistic[t, i]), int(passed[t, i])))
    return rows
