from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import MODULATIONS
from .exceptions import ContractViolation
from .numerics import as_generator


@dataclass(frozen=True, eq=False)
class Constellation:
    """Square QAM with unit average power.

    Point k sits at (levels[k % side] + 1j * levels[k // side]): row-major over
    the amplitude grid with the real part on the fast axis.
    """
    order: int
    points: np.ndarray
    scale: float
    levels: np.ndarray

    @property
    def side(self):
        return len(self.levels)

    def symbols(self, indices):
        return self.points[np.asarray(indices)]


def modulation_order(name):
    if name not in MODULATIONS:
        raise ContractViolation(f"Invalid modulation {name}, must be {' or '.join(MODULATIONS)}.")
    return MODULATIONS[name]


def make_constellation(order):
    if order not in MODULATIONS.values():
        raise ContractViolation(f"Unsupported constellation order {order}, must be 4, 16 or 64.")
    side = int(round(np.sqrt(order)))
    amplitudes = np.arange(-(side - 1), side, 2, dtype=np.float64)
    scale = 1.0 / np.sqrt(2.0 * np.mean(amplitudes ** 2))
    levels = amplitudes * scale
    re, im = np.meshgrid(levels, levels, indexing="xy")
    points = (re + 1j * im).reshape(-1)
    levels.setflags(write=False)
    points.setflags(write=False)
    return Constellation(order=order, points=points, scale=float(scale), levels=levels)


def _nearest_level(values, levels):
    # argmin keeps the first (smallest) level on ties
    return np.argmin(np.abs(values[..., None] - levels), axis=-1)


def hard_decision(z, c):
    z = np.asarray(z, dtype=np.complex128)
    i_re = _nearest_level(z.real, c.levels)
    i_im = _nearest_level(z.imag, c.levels)
    return i_im * c.side + i_re


def sample_symbols(c, n_t, rng, batch=None):
    if n_t < 1:
        raise ContractViolation(f"Invalid transmitter count {n_t}, must be at least 1.")
    shape = (n_t,) if batch is None else (batch, n_t)
    return as_generator(rng).integers(0, c.order, size=shape)


def ser(estimate, truth):
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ContractViolation(f"Symbol vectors differ in shape: {estimate.shape} vs {truth.shape}.")
    if estimate.size == 0:
        return 0.0
    return float(np.mean(estimate != truth))


def symbol_errors(estimate, truth):
    return int(np.count_nonzero(np.asarray(estimate) != np.asarray(truth)))
