"""Channel generation, the forward model y = Hx + n and MCHAN1 datasets.

Complex Gaussian convention: CN(0, s) has variance s/2 per real component.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .constants import MCHAN_MAGIC, MCHAN_VERSION
from .exceptions import ContractViolation, FormatError
from .numerics import as_generator, complex_gaussian, frobenius_norm2

_LOGGER = logging.getLogger(__name__)

_MCHAN_HEADER = struct.Struct("<6sHIIII")
_ENTRY_DTYPE = np.dtype("<c16")


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    h: np.ndarray
    freq_index: int = 0
    time_index: int = 0

    def __post_init__(self):
        if self.h.ndim != 2:
            raise ContractViolation(f"Channel must be a matrix, got shape {self.h.shape}.")
        n_r, n_t = self.h.shape
        if not n_r >= n_t >= 1:
            raise ContractViolation(f"Invalid channel shape {n_r}x{n_t}, must have N_r >= N_t >= 1.")

    @property
    def n_r(self):
        return self.h.shape[0]

    @property
    def n_t(self):
        return self.h.shape[1]


@dataclass(frozen=True, eq=False)
class ChannelGrid:
    """F x T channel cells stored as h[t, f] with shape (T, F, N_r, N_t)."""
    h: np.ndarray

    def __post_init__(self):
        if self.h.ndim != 4:
            raise ContractViolation(f"Channel grid must have shape (T, F, N_r, N_t), got {self.h.shape}.")
        t_count, f_count, n_r, n_t = self.h.shape
        if t_count < 1 or f_count < 1:
            raise ContractViolation(f"Channel grid must be nonempty, got F={f_count} T={t_count}.")
        if not n_r >= n_t >= 1:
            raise ContractViolation(f"Invalid channel shape {n_r}x{n_t}, must have N_r >= N_t >= 1.")

    @property
    def t_count(self):
        return self.h.shape[0]

    @property
    def f_count(self):
        return self.h.shape[1]

    @property
    def n_r(self):
        return self.h.shape[2]

    @property
    def n_t(self):
        return self.h.shape[3]

    def cell(self, f, t):
        return ChannelRealization(self.h[t, f], freq_index=f, time_index=t)

    def cells(self):
        for t in range(self.t_count):
            for f in range(self.f_count):
                yield self.cell(f, t)


def _check_dims(n_r, n_t):
    if not n_r >= n_t >= 1:
        raise ContractViolation(f"Invalid antenna counts N_r={n_r} N_t={n_t}, must have N_r >= N_t >= 1.")


def _check_rho(name, rho):
    if not 0.0 <= rho < 1.0:
        raise ContractViolation(f"Invalid {name} {rho}, must be in [0, 1).")


def draw_iid(gen, n_r, n_t, batch=()):
    """Raw CN(0, 1/N_r) matrices of shape batch + (N_r, N_t)."""
    return complex_gaussian(gen, tuple(batch) + (n_r, n_t), 1.0 / n_r)


def exp_correlation(n, rho):
    _check_rho("correlation", rho)
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(np.float64)


def _psd_sqrt(r):
    w, v = np.linalg.eigh(r)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _kronecker_shape(w, rho_r, rho_t):
    # rho == 0 leaves the draw untouched, bit for bit
    if rho_r > 0.0:
        w = _psd_sqrt(exp_correlation(w.shape[-2], rho_r)) @ w
    if rho_t > 0.0:
        w = w @ _psd_sqrt(exp_correlation(w.shape[-1], rho_t))
    return w


def gen_iid_gaussian(n_r, n_t, rng):
    _check_dims(n_r, n_t)
    return ChannelRealization(draw_iid(as_generator(rng), n_r, n_t))


def gen_kronecker(n_r, n_t, rho_r, rho_t, rng):
    _check_dims(n_r, n_t)
    _check_rho("rho_r", rho_r)
    _check_rho("rho_t", rho_t)
    w = draw_iid(as_generator(rng), n_r, n_t)
    return ChannelRealization(_kronecker_shape(w, rho_r, rho_t))


def _gauss_markov(w, corr, axis):
    """Stationary AR(1) along axis with unit marginal variance kept."""
    out = np.moveaxis(w.copy(), axis, 0)
    innovation = np.sqrt(1.0 - corr ** 2)
    for k in range(1, out.shape[0]):
        out[k] = corr * out[k - 1] + innovation * out[k]
    return np.moveaxis(out, 0, axis)


def normalize_grid(grid):
    power = np.mean(frobenius_norm2(grid.h)) / (grid.n_r * grid.n_t)
    if power <= 0.0:
        raise ContractViolation("Cannot normalize an all-zero channel grid.")
    return ChannelGrid(grid.h / np.sqrt(power))


def gen_correlated_grid(n_r, n_t, f_count, t_count, rho_r, rho_t, corr_f, corr_t, rng):
    _check_dims(n_r, n_t)
    _check_rho("rho_r", rho_r)
    _check_rho("rho_t", rho_t)
    _check_rho("corr_f", corr_f)
    _check_rho("corr_t", corr_t)
    if f_count < 1 or t_count < 1:
        raise ContractViolation(f"Invalid grid size F={f_count} T={t_count}, both must be at least 1.")

    w = draw_iid(as_generator(rng), n_r, n_t, batch=(t_count, f_count))
    w = _gauss_markov(w, corr_f, axis=1)
    w = _gauss_markov(w, corr_t, axis=0)
    return normalize_grid(ChannelGrid(_kronecker_shape(w, rho_r, rho_t)))


def grid_from_realizations(realizations):
    matrices = [r.h if isinstance(r, ChannelRealization) else np.asarray(r) for r in realizations]
    if not matrices:
        raise ContractViolation("Cannot build a channel grid from no realizations.")
    return ChannelGrid(np.stack(matrices)[None].astype(np.complex128))


def sigma2_from_snr(h, snr_db):
    h = np.asarray(h)
    return frobenius_norm2(h) / (h.shape[-2] * 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0))


def apply_channel(h, x, sigma2, rng):
    h = np.asarray(h, dtype=np.complex128)
    x = np.asarray(x, dtype=np.complex128)
    if h.shape[-1] != x.shape[-1]:
        raise ContractViolation(f"Channel has {h.shape[-1]} columns but symbol vector has length {x.shape[-1]}.")
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0.0):
        raise ContractViolation("Noise variance must be non-negative.")

    hx = (h @ x[..., None])[..., 0]
    noise = complex_gaussian(as_generator(rng), hx.shape)
    return hx + np.sqrt(sigma2[..., None]) * noise


def grid_correlation(grid, axis, step):
    if axis not in ("time", "freq"):
        raise ContractViolation(f"Invalid axis {axis}, must be time or freq.")
    h = grid.h
    ax = 0 if axis == "time" else 1
    if not 0 <= step < h.shape[ax]:
        raise ContractViolation(f"Invalid step {step}, must be below axis length {h.shape[ax]}.")

    n = h.shape[ax]
    a = np.take(h, np.arange(0, n - step), axis=ax)
    b = np.take(h, np.arange(step, n), axis=ax)
    inner = np.abs(np.sum(np.conj(a) * b, axis=(-2, -1)))
    norms = np.sqrt(frobenius_norm2(a) * frobenius_norm2(b))
    return float(np.mean(inner / norms))


def channel_hash(h):
    h = np.ascontiguousarray(h, dtype=_ENTRY_DTYPE)
    digest = hashlib.blake2b(digest_size=16)
    digest.update(struct.pack("<" + "I" * h.ndim, *h.shape))
    digest.update(h.tobytes())
    return digest.hexdigest()


def grid_to_bytes(grid):
    header = _MCHAN_HEADER.pack(MCHAN_MAGIC, MCHAN_VERSION, grid.n_r, grid.n_t, grid.f_count, grid.t_count)
    return header + np.ascontiguousarray(grid.h, dtype=_ENTRY_DTYPE).tobytes()


def grid_from_bytes(data):
    if len(data) < _MCHAN_HEADER.size:
        raise FormatError(f"Truncated header, expected {_MCHAN_HEADER.size} bytes but got {len(data)}.", len(data))
    magic, version, n_r, n_t, f_count, t_count = _MCHAN_HEADER.unpack_from(data)
    if magic != MCHAN_MAGIC:
        raise FormatError(f"Invalid magic {magic!r}, expected {MCHAN_MAGIC!r}.", 0)
    if version != MCHAN_VERSION:
        raise FormatError(f"Unsupported version {version}, expected {MCHAN_VERSION}.", 6)
    if not n_r >= n_t >= 1 or f_count < 1 or t_count < 1:
        raise FormatError(f"Invalid dimensions N_r={n_r} N_t={n_t} F={f_count} T={t_count}.", 8)

    count = t_count * f_count * n_r * n_t
    end = _MCHAN_HEADER.size + count * _ENTRY_DTYPE.itemsize
    if len(data) < end:
        # offset of the first missing entry
        whole = (len(data) - _MCHAN_HEADER.size) // _ENTRY_DTYPE.itemsize
        offset = _MCHAN_HEADER.size + whole * _ENTRY_DTYPE.itemsize
        raise FormatError(f"Truncated data at byte {offset}, expected {end} bytes but got {len(data)}.", offset)
    if len(data) > end:
        raise FormatError(f"Trailing data at byte {end}, file has {len(data)} bytes.", end)

    values = np.frombuffer(data, dtype=_ENTRY_DTYPE, count=count, offset=_MCHAN_HEADER.size)
    return ChannelGrid(np.reshape(values, (t_count, f_count, n_r, n_t)).astype(np.complex128))


def save_grid(grid, path):
    data = grid_to_bytes(grid)
    with open(path, "wb") as f:
        f.write(data)
    _LOGGER.debug("wrote channel grid %dx%d F=%d T=%d to %s", grid.n_r, grid.n_t, grid.f_count, grid.t_count, path)


def load_grid(path):
    with open(path, "rb") as f:
        data = f.read()
    grid = grid_from_bytes(data)
    _LOGGER.debug("read channel grid %dx%d F=%d T=%d from %s", grid.n_r, grid.n_t, grid.f_count, grid.t_count, path)
    return grid
