"""Monte-Carlo symbol-error-rate sweeps.

Symbols are simulated in coherence blocks of block_size vectors sharing one
channel. Block k of channel ch at SNR index s draws from the stream
(seed, hash(DATA, ch, s, k)), which does not depend on the detector, so every
detector sees the same symbols and noise. Blocks run in a thread pool one
wave at a time and are accumulated in block order, so the result does not
depend on the thread count.
"""
from __future__ import annotations

import asyncio
import csv
import hashlib
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .channel import apply_channel, channel_hash, gen_iid_gaussian, gen_kronecker, sigma2_from_snr
from .constants import (
    DEFAULT_LAYERS,
    DEFAULT_TRAIN_SNR_DB,
    DETECTOR_NAMES,
    MODEL_KINDS,
    ONLINE_FIRST_ITERS,
    ONLINE_REST_ITERS,
    SER_CSV_HEADER,
    SIGNALS_PER_COHERENCE,
    STREAM_CHANNEL,
    STREAM_DATA,
    STREAM_TRAIN,
    THREADS_ENV,
    TRAIN_BATCH_SIZE,
)
from .constellation import make_constellation, symbol_errors
from .detectors import DetectorProblem, detect
from .exceptions import ContractViolation, PyMimoException, RangeError
from .models import params_from_bytes, params_to_bytes
from .numerics import RngStream, as_generator
from .storage_proto import StorageProto
from .storage_sqlitedict import StorageSqliteDict
from .trainer import TrainConfig, fit, init_params, online_train_grid

_LOGGER = logging.getLogger(__name__)

CHANNEL_SOURCES = ("iid", "kron", "grid")


def threads_from_env(default=None):
    value = os.getenv(THREADS_ENV)
    if value:
        try:
            threads = int(value)
        except ValueError:
            raise ContractViolation(f"Invalid {THREADS_ENV} value {value}, must be an integer.")
        if threads < 1:
            raise ContractViolation(f"Invalid {THREADS_ENV} value {threads}, must be at least 1.")
        return threads
    return default or os.cpu_count() or 1


@dataclass(frozen=True)
class SweepConfig:
    detectors: Tuple[str, ...]
    snr_db: Tuple[float, ...]
    order: int = 4
    n_r: int = 64
    n_t: int = 32
    channel: str = "iid"
    rho_r: float = 0.0
    rho_t: float = 0.0
    grid: Optional[object] = None
    # channels cycled through; None draws a fresh channel for every block
    n_channels: Optional[int] = None
    min_errors: int = 100
    max_symbols: int = 10 ** 6
    block_size: int = SIGNALS_PER_COHERENCE
    seed: int = 0
    threads: int = 1
    layers: int = DEFAULT_LAYERS
    train_snr_db: Optional[Tuple[float, float]] = None
    train_iterations: int = ONLINE_FIRST_ITERS
    offline_iterations: int = 10000
    train_batch: int = TRAIN_BATCH_SIZE
    online: bool = False
    rest_iterations: int = ONLINE_REST_ITERS
    timing: bool = False

    def __post_init__(self):
        if not self.detectors:
            raise ContractViolation("At least one detector is needed.")
        for name in self.detectors:
            if name not in DETECTOR_NAMES:
                raise ContractViolation(f"Invalid detector {name}, must be one of {', '.join(DETECTOR_NAMES)}.")
        if not self.snr_db:
            raise ContractViolation("SNR list must be nonempty.")
        if self.min_errors < 1:
            raise ContractViolation(f"Invalid min_errors {self.min_errors}, must be at least 1.")
        if self.max_symbols < 1 or self.block_size < 1 or self.threads < 1:
            raise ContractViolation("max_symbols, block_size and threads must be at least 1.")
        if self.channel not in CHANNEL_SOURCES:
            raise ContractViolation(f"Invalid channel source {self.channel}, must be {' or '.join(CHANNEL_SOURCES)}.")
        if self.channel == "grid" and self.grid is None:
            raise ContractViolation("Channel source grid needs a channel grid.")
        if self.n_channels is not None and self.n_channels < 1:
            raise ContractViolation(f"Invalid channel count {self.n_channels}, must be at least 1.")

    @property
    def dims(self):
        if self.grid is not None:
            return self.grid.n_r, self.grid.n_t
        return self.n_r, self.n_t

    @property
    def train_range(self):
        return self.train_snr_db if self.train_snr_db is not None else DEFAULT_TRAIN_SNR_DB[self.order]

    def stream(self, *indices):
        return RngStream(self.seed).child(*indices)


class SerRow(NamedTuple):
    detector: str
    snr_db: float
    errors: int
    symbols: int
    ser: float
    wall_seconds: float = 0.0
    failure: Optional[str] = None


@dataclass
class SerReport:
    rows: list = field(default_factory=list)

    def points(self, detector):
        rows = sorted((r for r in self.rows if r.detector == detector and r.failure is None), key=lambda r: r.snr_db)
        return [(r.snr_db, r.ser) for r in rows]

    def to_csv(self, f):
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SER_CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.detector, f"{r.snr_db:g}", r.errors, r.symbols, repr(r.ser), f"{r.wall_seconds:.6f}"])

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            self.to_csv(f)


class ChannelEvaluation(NamedTuple):
    snr_db: float
    # detector -> per-channel SER
    ser: dict
    symbols_per_channel: int


def _config_hash(*fields):
    return hashlib.blake2b(repr(fields).encode(), digest_size=8).hexdigest()


def _simulate_block(cfg, c, h, name, params, snr_index, snr_db, ch, blk):
    gen = as_generator(cfg.stream(STREAM_DATA, ch, snr_index, blk))
    x = gen.integers(0, c.order, size=(cfg.block_size, h.shape[1]))
    sigma2 = sigma2_from_snr(h, snr_db)
    y = apply_channel(h, c.symbols(x), sigma2, gen)
    result = detect(name, DetectorProblem(y, h, sigma2), c, params=params)
    return symbol_errors(result.symbols, x)


class MonteCarloSweep:
    def __init__(self, cfg, storage: StorageProto = None, cache_path=None):
        self.cfg = cfg
        self.storage = storage
        self.cache_path = cache_path
        self.constellation = make_constellation(cfg.order)
        self._params = {}
        self._owns_storage = False

    @classmethod
    async def create(cls, *args, **kwargs):
        sweep = cls(*args, **kwargs)
        await sweep.async_init()
        return sweep

    async def async_init(self):
        """Open the parameter cache when learned detectors are swept."""
        if self.storage is None:
            if self.cache_path and any(d in MODEL_KINDS for d in self.cfg.detectors):
                self.storage = await StorageSqliteDict.create(self.cache_path)
                self._owns_storage = True
        elif not isinstance(self.storage, StorageProto):
            raise ContractViolation("Storage is not a StorageProto class.")

    async def get_storage(self):
        return self.storage

    async def close(self):
        if self._owns_storage:
            await self.storage.close()

    def channel(self, ch):
        cfg = self.cfg
        if cfg.channel == "grid":
            grid = cfg.grid
            cell = ch % (grid.f_count * grid.t_count)
            return grid.h[cell // grid.f_count, cell % grid.f_count]
        rng = cfg.stream(STREAM_CHANNEL, ch)
        if cfg.channel == "kron":
            return gen_kronecker(cfg.n_r, cfg.n_t, cfg.rho_r, cfg.rho_t, rng).h
        return gen_iid_gaussian(cfg.n_r, cfg.n_t, rng).h

    def _channel_count(self):
        cfg = self.cfg
        if cfg.n_channels is not None:
            return cfg.n_channels
        if cfg.channel == "grid":
            return cfg.grid.f_count * cfg.grid.t_count
        return None

    def _locate(self, b):
        """Block b -> (channel index, block index within that channel)."""
        n = self._channel_count()
        if n is None:
            return b, 0
        return b % n, b // n

    def _offline(self, name):
        # channel-agnostic models on i.i.d. channels
        return name == "mmnet-iid" or (name == "oampnet" and self.cfg.channel == "iid")

    def _train_config(self, iterations, *indices):
        cfg = self.cfg
        return TrainConfig(
            iterations=iterations,
            snr_db_range=tuple(cfg.train_range),
            rng=cfg.stream(STREAM_TRAIN, *indices),
            batch_size=cfg.train_batch,
        )

    def _cache_key(self, name, h):
        cfg = self.cfg
        n_r, n_t = cfg.dims
        if self._offline(name):
            target = f"iid{n_r}x{n_t}"
            config = _config_hash(name, cfg.order, cfg.layers, cfg.offline_iterations, cfg.train_batch,
                                  tuple(cfg.train_range), cfg.seed)
        else:
            target = channel_hash(h)
            online = (cfg.rest_iterations,) if cfg.online and name == "mmnet" else ()
            config = _config_hash(name, cfg.order, cfg.layers, cfg.train_iterations, cfg.train_batch,
                                  tuple(cfg.train_range), cfg.seed, *online)
        return f"{name}:{target}:{config}"

    def _train(self, name, h, ch):
        cfg = self.cfg
        c = self.constellation
        n_r, n_t = cfg.dims
        if self._offline(name):
            train_cfg = self._train_config(cfg.offline_iterations, MODEL_KINDS.index(name))
            start = init_params(name, None, cfg.layers)
            return fit(None, c, train_cfg, start, n_r=n_r, n_t=n_t).params
        train_cfg = self._train_config(cfg.train_iterations, MODEL_KINDS.index(name), ch)
        start = init_params(name, h, cfg.layers)
        return fit(h, c, train_cfg, start).params

    def _train_online(self):
        cfg = self.cfg
        train_cfg = self._train_config(0, MODEL_KINDS.index("mmnet"))
        table = online_train_grid(cfg.grid, self.constellation, train_cfg, cfg.train_iterations,
                                  cfg.rest_iterations, n_layers=cfg.layers)
        return {channel_hash(cfg.grid.h[t, f]): params for (f, t), params in table.cells.items()}

    async def _params_for(self, loop, pool, name, h, ch):
        if name not in MODEL_KINDS:
            return None
        key = self._cache_key(name, h)
        if key in self._params:
            return self._params[key]

        blob = await self.storage.get_key(key) if self.storage is not None else None
        if blob is not None:
            params = params_from_bytes(blob)
            _LOGGER.debug("loaded cached parameters %s", key)
        elif self.cfg.online and name == "mmnet" and self.cfg.channel == "grid":
            by_cell = await loop.run_in_executor(pool, self._train_online)
            for cell_hash, cell_params in by_cell.items():
                cell_key = key.replace(channel_hash(h), cell_hash)
                self._params[cell_key] = cell_params
                if self.storage is not None:
                    await self.storage.set_key(cell_key, params_to_bytes(cell_params))
            return self._params[key]
        else:
            params = await loop.run_in_executor(pool, self._train, name, h, ch)
            if self.storage is not None:
                await self.storage.set_key(key, params_to_bytes(params))
        self._params[key] = params
        return params

    async def _run_blocks(self, loop, pool, name, snr_index, snr_db, blocks):
        located = [self._locate(b) for b in blocks]
        channels = {ch: self.channel(ch) for ch, _ in located}
        params = {}
        for ch, h in channels.items():
            params[ch] = await self._params_for(loop, pool, name, h, ch)
        futures = [
            loop.run_in_executor(pool, _simulate_block, self.cfg, self.constellation, channels[ch], name,
                                 params[ch], snr_index, snr_db, ch, blk)
            for ch, blk in located
        ]
        return await asyncio.gather(*futures)

    async def _point(self, loop, pool, name, snr_index, snr_db):
        cfg = self.cfg
        n_t = cfg.dims[1]
        per_block = cfg.block_size * n_t
        started = time.perf_counter()
        errors = symbols = 0
        b = 0
        try:
            while errors < cfg.min_errors and symbols < cfg.max_symbols:
                wave = list(range(b, b + cfg.threads))
                for block_errors in await self._run_blocks(loop, pool, name, snr_index, snr_db, wave):
                    errors += block_errors
                    symbols += per_block
                    if errors >= cfg.min_errors or symbols >= cfg.max_symbols:
                        break
                b += cfg.threads
        except PyMimoException as e:
            _LOGGER.warning("%s failed at %g dB: %s", name, snr_db, e.message)
            return SerRow(name, snr_db, 0, 0, math.nan, 0.0, e.message)

        wall = time.perf_counter() - started if cfg.timing else 0.0
        row = SerRow(name, snr_db, errors, symbols, errors / symbols, wall)
        _LOGGER.info("%s %g dB: %d errors in %d symbols, SER %.3e", name, snr_db, errors, symbols, row.ser)
        return row

    async def run(self):
        loop = asyncio.get_running_loop()
        report = SerReport()
        with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
            for name in self.cfg.detectors:
                for snr_index, snr_db in enumerate(self.cfg.snr_db):
                    report.rows.append(await self._point(loop, pool, name, snr_index, float(snr_db)))
        return report

    async def evaluate_channels(self, snr_db, blocks_per_channel=1, snr_index=0):
        """Per-channel SER of every detector at one SNR, on common random numbers."""
        n_channels = self._channel_count()
        if n_channels is None:
            raise ContractViolation("Per-channel evaluation needs a fixed channel count.")
        loop = asyncio.get_running_loop()
        ser = {}
        with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
            for name in self.cfg.detectors:
                per_channel = np.zeros(n_channels)
                for ch in range(n_channels):
                    h = self.channel(ch)
                    params = await self._params_for(loop, pool, name, h, ch)
                    futures = [
                        loop.run_in_executor(pool, _simulate_block, self.cfg, self.constellation, h, name, params,
                                             snr_index, snr_db, ch, blk)
                        for blk in range(blocks_per_channel)
                    ]
                    per_channel[ch] = sum(await asyncio.gather(*futures))
                ser[name] = per_channel / (blocks_per_channel * self.cfg.block_size * self.cfg.dims[1])
        return ChannelEvaluation(snr_db, ser, blocks_per_channel * self.cfg.block_size * self.cfg.dims[1])


async def run_sweep_async(cfg, storage=None, cache_path=None):
    sweep = await MonteCarloSweep.create(cfg, storage=storage, cache_path=cache_path)
    try:
        return await sweep.run()
    finally:
        await sweep.close()


def run_sweep(cfg, storage=None, cache_path=None):
    return asyncio.run(run_sweep_async(cfg, storage, cache_path))


async def evaluate_channels_async(cfg, snr_db, blocks_per_channel=1, storage=None, cache_path=None):
    sweep = await MonteCarloSweep.create(cfg, storage=storage, cache_path=cache_path)
    try:
        return await sweep.evaluate_channels(snr_db, blocks_per_channel)
    finally:
        await sweep.close()


def evaluate_channels(cfg, snr_db, blocks_per_channel=1, storage=None, cache_path=None):
    return asyncio.run(evaluate_channels_async(cfg, snr_db, blocks_per_channel, storage, cache_path))


def snr_at_target(report, detector, target_ser=1e-3):
    """Log-linear interpolation of log(SER) against SNR between the bracketing points."""
    points = [(s, p) for s, p in report.points(detector) if p > 0.0]
    log_target = math.log(target_ser)
    for (s0, p0), (s1, p1) in zip(points, points[1:]):
        if p0 >= target_ser >= p1:
            if p0 == p1:
                return s0
            frac = (math.log(p0) - log_target) / (math.log(p0) - math.log(p1))
            return s0 + frac * (s1 - s0)
    raise RangeError(f"{detector} SER curve does not bracket {target_ser:g}.")


def snr_gap(report, detector, reference, target_ser=1e-3):
    return snr_at_target(report, detector, target_ser) - snr_at_target(report, reference, target_ser)


def paired_bootstrap(a, b, n_boot=10000, rng=None):
    """Mean of a - b with a 95% percentile interval from resampling the pairs."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.ndim != 1 or diff.size == 0:
        raise ContractViolation("Paired samples must be nonempty vectors of equal length.")
    gen = as_generator(rng if rng is not None else RngStream(0))
    idx = gen.integers(0, diff.size, size=(n_boot, diff.size))
    means = np.mean(diff[idx], axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return float(np.mean(diff)), (float(lo), float(hi))


def ser_cdf(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    return v, np.arange(1, v.size + 1) / v.size


def percentile_gap(gaps, q=90):
    return float(np.percentile(np.asarray(gaps, dtype=np.float64), q))
