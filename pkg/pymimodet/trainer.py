"""Loss, gradients, Adam and the per-channel and online training loops."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Tuple

import numpy as np
import torch

from .channel import draw_iid, sigma2_from_snr
from .constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    ADAM_LR,
    DEFAULT_LAYERS,
    ONLINE_FIRST_ITERS,
    ONLINE_REST_ITERS,
    STREAM_HELDOUT,
    STREAM_TRAIN,
    TRAIN_BATCH_SIZE,
)
from .detectors import DetectorProblem
from .exceptions import ContractViolation, NumericalError
from .models import (
    init_full_params,
    init_iid_params,
    init_oampnet_params,
    levels_tensor,
    problem_tensors,
    unrolled_forward,
)
from .numerics import RngStream, as_generator

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    snr_db_range: Tuple[float, float]
    rng: RngStream = field(default_factory=lambda: RngStream(0))
    batch_size: int = TRAIN_BATCH_SIZE
    lr: float = ADAM_LR

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractViolation(f"Invalid batch size {self.batch_size}, must be at least 1.")
        if self.iterations < 0:
            raise ContractViolation(f"Invalid iteration count {self.iterations}, must be non-negative.")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ContractViolation(f"Invalid SNR range [{lo}, {hi}], low end above high end.")


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def create(cls, size, lr=ADAM_LR):
        return cls(m=np.zeros(size), v=np.zeros(size), lr=lr)


class TrainingBatch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    h: np.ndarray
    sigma2: np.ndarray
    snr_db: float

    def problem(self):
        return DetectorProblem(self.y, self.h, self.sigma2)


class Gradient(NamedTuple):
    loss: float
    # parameter set of the same type holding dL/dtheta
    grads: object


class TrainResult(NamedTuple):
    params: object
    state: AdamState
    initial_loss: Optional[float]
    final_loss: Optional[float]

    @property
    def improved(self):
        return self.initial_loss is None or self.final_loss < self.initial_loss


class GradCheck(NamedTuple):
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray


@dataclass
class ParamTable:
    """Parameters per grid cell, keyed by (f, t), plus gradient iterations spent per time slice."""
    cells: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.cells[key]

    def __len__(self):
        return len(self.cells)


def sample_batch(h, c, n_r, n_t, batch_size, snr_db_range, rng):
    """One batch from y = Hx + n; h None draws a fresh i.i.d. channel per item.

    The SNR is drawn once per batch, the noise variance follows each item's
    realized channel power.
    """
    gen = as_generator(rng)
    if h is None:
        h = draw_iid(gen, n_r, n_t, batch=(batch_size,))
    else:
        h = np.asarray(h, dtype=np.complex128)
        n_r, n_t = h.shape
    x = gen.integers(0, c.order, size=(batch_size, n_t))
    snr_db = float(gen.uniform(*snr_db_range))
    sigma2 = np.array(np.broadcast_to(sigma2_from_snr(h, snr_db), (batch_size,)))

    hx = (h @ c.symbols(x)[..., None])[..., 0]
    draws = gen.standard_normal((2, batch_size, n_r))
    noise = np.sqrt(sigma2 / 2.0)[:, None] * (draws[0] + 1j * draws[1])
    return TrainingBatch(x=x, y=hx + noise, h=h, sigma2=sigma2, snr_db=snr_db)


def loss(x_hat, x, c):
    """Mean over batch of (1/T) sum_t |x_hat_t - x|^2; x_hat is (T, B, N_t) or a ForwardTrace."""
    x_hat = np.asarray(getattr(x_hat, "x_hat", x_hat))
    err = x_hat - c.symbols(x)
    return float(np.mean(np.sum(err.real ** 2 + err.imag ** 2, axis=-1)))


def _loss_torch(x_hat, x_points):
    err = x_hat - x_points
    return torch.mean(torch.sum(err.real ** 2 + err.imag ** 2, dim=-1))


def _batch_loss(params, theta, batch, c):
    pt = problem_tensors(batch)
    theta1, theta2 = params.unpack(theta)
    trace = unrolled_forward(params.kind, theta1, theta2, pt, levels_tensor(c), params.n_layers)
    return _loss_torch(trace.x_hat, torch.from_numpy(c.symbols(batch.x)))


def evaluate_loss(params, batch, c):
    with torch.no_grad():
        return float(_batch_loss(params, torch.from_numpy(params.to_vector()), batch, c))


def backward(params, batch, c):
    theta = torch.tensor(params.to_vector(), dtype=torch.float64, requires_grad=True)
    value = _batch_loss(params, theta, batch, c)
    value.backward()
    grad = theta.grad.numpy().copy()
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"Non-finite {params.kind} gradient.")
    return Gradient(loss=float(value.detach()), grads=params.with_vector(grad))


def adam_step(params, grads, state):
    g = grads.to_vector() if hasattr(grads, "to_vector") else np.asarray(grads, dtype=np.float64)
    theta = params.to_vector()
    if g.shape != theta.shape or state.m.shape != theta.shape:
        raise ContractViolation(f"Gradient shape {g.shape} does not match parameters {theta.shape}.")

    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g ** 2
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_vector(theta), replace(state, m=m, v=v, step=step)


def _dims(h, n_r, n_t):
    if h is not None:
        return np.shape(h)
    if n_r is None or n_t is None:
        raise ContractViolation("Antenna counts are needed when training on random channels.")
    return n_r, n_t


def init_params(kind, h=None, n_layers=DEFAULT_LAYERS):
    if kind == "mmnet-iid":
        return init_iid_params(n_layers)
    if kind == "mmnet":
        if h is None:
            raise ContractViolation("MMNet is initialized from a channel matrix.")
        return init_full_params(h, n_layers)
    if kind == "oampnet":
        return init_oampnet_params(n_layers)
    raise ContractViolation(f"Invalid model kind {kind}.")


def _adam_loop(h, c, cfg, params, state, n_r, n_t):
    for i in range(cfg.iterations):
        batch = sample_batch(h, c, n_r, n_t, cfg.batch_size, cfg.snr_db_range, cfg.rng.child(STREAM_TRAIN, i))
        try:
            g = backward(params, batch, c)
        except NumericalError as e:
            e.iteration = i
            raise
        params, state = adam_step(params, g.grads, state)
    return TrainResult(params, state, None, None)


def fit(h, c, cfg, params, state=None, n_r=None, n_t=None, heldout=True):
    """Adam over fresh batches; heldout=False skips the held-out loss and its two extra forward passes."""
    n_r, n_t = _dims(h, n_r, n_t)
    if state is None:
        state = AdamState.create(params.to_vector().size, cfg.lr)
    if cfg.iterations == 0:
        return TrainResult(params, state, None, None)
    if not heldout:
        return _adam_loop(h, c, cfg, params, state, n_r, n_t)

    check = sample_batch(h, c, n_r, n_t, cfg.batch_size, cfg.snr_db_range, cfg.rng.child(STREAM_HELDOUT))
    initial = evaluate_loss(params, check, c)
    trained = _adam_loop(h, c, cfg, params, state, n_r, n_t)
    final = evaluate_loss(trained.params, check, c)

    result = TrainResult(trained.params, trained.state, initial, final)
    if result.improved:
        _LOGGER.info("%s trained %d iterations, held-out loss %.4g -> %.4g", params.kind, cfg.iterations, initial, final)
    else:
        _LOGGER.warning("%s held-out loss did not improve: %.4g -> %.4g", params.kind, initial, final)
    return result


def train_on_channel(h, c, cfg, params):
    return fit(h, c, cfg, params).params


def train_offline_iid(n_r, n_t, c, cfg, n_layers=DEFAULT_LAYERS, params=None):
    if params is None:
        params = init_iid_params(n_layers)
    return fit(None, c, cfg, params, n_r=n_r, n_t=n_t).params


def iterations_per_channel(f_count, first_iters=ONLINE_FIRST_ITERS, rest_iters=ONLINE_REST_ITERS):
    return (first_iters + (f_count - 1) * rest_iters) / f_count


def online_train_grid(grid, c, cfg, first_iters=ONLINE_FIRST_ITERS, rest_iters=ONLINE_REST_ITERS, params=None,
                      n_layers=DEFAULT_LAYERS):
    """Train through the grid subcarrier by subcarrier, carrying parameters and optimizer state along."""
    if params is None:
        params = init_full_params(grid.h[0, 0], n_layers)
    state = None
    table = ParamTable()
    for t in range(grid.t_count):
        spent = 0
        for f in range(grid.f_count):
            iters = first_iters if f == 0 else rest_iters
            cell_cfg = replace(cfg, iterations=iters, rng=cfg.rng.child(t, f))
            # held-out loss on the first subcarrier of each slice only
            result = fit(grid.h[t, f], c, cell_cfg, params, state, heldout=f == 0)
            params, state = result.params, result.state
            table.cells[(f, t)] = params
            spent += iters
        table.iterations.append(spent)
        _LOGGER.info("time slice %d: %d training iterations over %d subcarriers", t, spent, grid.f_count)
    return table


def cold_train_grid(grid, c, cfg, n_layers=DEFAULT_LAYERS):
    table = ParamTable()
    for t in range(grid.t_count):
        for f in range(grid.f_count):
            h = grid.h[t, f]
            cell_cfg = replace(cfg, rng=cfg.rng.child(t, f))
            table.cells[(f, t)] = train_on_channel(h, c, cell_cfg, init_full_params(h, n_layers))
        table.iterations.append(grid.f_count * cfg.iterations)
    return table


def gradient_check(params, batch, c, step=1e-5):
    """Largest relative gap between autograd and fourth-order central differences."""
    analytic = backward(params, batch, c).grads.to_vector()
    theta0 = params.to_vector()
    numeric = np.zeros_like(theta0)
    with torch.no_grad():
        for i in range(theta0.size):
            delta = step * max(1.0, abs(theta0[i]))
            values = []
            for k in (2, 1, -1, -2):
                theta = theta0.copy()
                theta[i] += k * delta
                values.append(float(_batch_loss(params, torch.from_numpy(theta), batch, c)))
            numeric[i] = (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * delta)

    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > 1e-6
    rel = np.abs(analytic - numeric)[mask] / scale[mask]
    return GradCheck(max_rel_error=float(np.max(rel)) if rel.size else 0.0, analytic=analytic, numeric=numeric)
