"""Unrolled detectors with trainable per-layer constants.

Every model runs the same loop for T layers, starting from x_0 = 0:

    r_t     = y - H x_t
    z_t     = x_t + A_t r_t
    s_t     = noise_var_estimate(A_t, H, |r_t|^2, sigma2, theta2[t])
    x_{t+1} = gaussian_denoise(z_t, s_t)

and differs only in the linear operator A_t:

    mmnet-iid   theta1[t] H^H                 (two scalars per layer)
    mmnet       Theta1[t]                     (a full N_t x N_r matrix per layer)
    oampnet     theta1[t] gamma_t W_t,  W_t = v_t^2 H^H (v_t^2 H H^H + sigma2 I)^-1

where gamma_t = N_t / trace(W_t H) makes trace(gamma_t W_t H) = N_t. The loop is
written once in torch so the trainer can differentiate it. theta1 left out is
the same as theta1 = 1, which is how the classic OAMP detector is run.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING, ClassVar, NamedTuple, Optional

import numpy as np
import torch

from .constants import (
    DEFAULT_LAYERS,
    MPARM_KIND_TAGS,
    MPARM_MAGIC,
    MPARM_VERSION,
    SIGMA2_FLOOR,
    V2_FLOOR,
)
from .denoiser import gaussian_denoise_torch
from .exceptions import ContractViolation, FormatError, NumericalError, SingularMatrixError
from .numerics import conj_transpose, frobenius_norm2

if TYPE_CHECKING:
    from .detectors import DetectorProblem

_LOGGER = logging.getLogger(__name__)

_MPARM_HEADER = struct.Struct("<6sHBIII")
_VALUE_DTYPE = np.dtype("<f8")


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ContractViolation(f"{name} parameters must be finite.")


@dataclass(frozen=True, eq=False)
class IidParams:
    kind: ClassVar[str] = "mmnet-iid"
    theta1: np.ndarray
    theta2: np.ndarray

    def __post_init__(self):
        if self.theta1.ndim != 1 or self.theta1.shape != self.theta2.shape or len(self.theta1) < 1:
            raise ContractViolation(f"Invalid {self.kind} parameter shapes {self.theta1.shape} and {self.theta2.shape}.")
        _check_finite(self.kind, self.theta1, self.theta2)

    @property
    def n_layers(self):
        return len(self.theta1)

    @property
    def dims(self):
        return (0, 0)

    def to_vector(self):
        return np.concatenate([self.theta1, self.theta2]).astype(np.float64)

    def with_vector(self, v):
        v = np.asarray(v, dtype=np.float64)
        t = self.n_layers
        return type(self)(theta1=v[:t].copy(), theta2=v[t:2 * t].copy())

    def unpack(self, theta):
        t = self.n_layers
        return theta[:t], theta[t:2 * t]


class OampNetParams(IidParams):
    kind: ClassVar[str] = "oampnet"


@dataclass(frozen=True, eq=False)
class FullParams:
    kind: ClassVar[str] = "mmnet"
    # (T, N_t, N_r) complex
    theta1: np.ndarray
    # (T, N_t) real
    theta2: np.ndarray

    def __post_init__(self):
        if self.theta1.ndim != 3 or self.theta2.shape != self.theta1.shape[:2] or self.theta1.shape[0] < 1:
            raise ContractViolation(f"Invalid mmnet parameter shapes {self.theta1.shape} and {self.theta2.shape}.")
        _check_finite(self.kind, self.theta1, self.theta2)

    @property
    def n_layers(self):
        return self.theta1.shape[0]

    @property
    def dims(self):
        return (self.theta1.shape[2], self.theta1.shape[1])

    def to_vector(self):
        pairs = np.stack([self.theta1.real, self.theta1.imag], axis=-1)
        return np.concatenate([pairs.ravel(), self.theta2.ravel()]).astype(np.float64)

    def with_vector(self, v):
        v = np.asarray(v, dtype=np.float64)
        t, n_t, n_r = self.theta1.shape
        n = 2 * t * n_t * n_r
        pairs = v[:n].reshape(t, n_t, n_r, 2)
        return FullParams(theta1=pairs[..., 0] + 1j * pairs[..., 1], theta2=v[n:n + t * n_t].reshape(t, n_t).copy())

    def unpack(self, theta):
        t, n_t, n_r = self.theta1.shape
        n = 2 * t * n_t * n_r
        pairs = theta[:n].reshape(t, n_t, n_r, 2)
        return torch.complex(pairs[..., 0], pairs[..., 1]), theta[n:n + t * n_t].reshape(t, n_t)


_PARAM_TYPES = {cls.kind: cls for cls in (IidParams, FullParams, OampNetParams)}


class ForwardTrace(NamedTuple):
    """Per-layer quantities, layer on the first axis.

    z: linear-stage output z_t; x_hat: denoiser output x_{t+1}; sigma2: denoiser
    input variance per element; residual: y - H x_t; gamma: OAMP normalization
    (oamp/oampnet only).
    """
    z: np.ndarray
    x_hat: np.ndarray
    sigma2: np.ndarray
    residual: np.ndarray
    gamma: Optional[np.ndarray] = None

    @property
    def n_layers(self):
        return self.z.shape[0]

    @property
    def final(self):
        return self.x_hat[-1]


class ProblemTensors(NamedTuple):
    y: torch.Tensor
    h: torch.Tensor
    sigma2: torch.Tensor
    batched: bool


def problem_tensors(p):
    y = np.asarray(p.y, dtype=np.complex128)
    batched = y.ndim == 2
    y = np.atleast_2d(y)
    h = np.asarray(p.h, dtype=np.complex128)
    if h.shape[-2] != y.shape[-1] or (h.ndim == 3 and h.shape[0] != y.shape[0]):
        raise ContractViolation(f"Channel shape {h.shape} does not match observations {y.shape}.")
    sigma2 = np.array(np.broadcast_to(np.asarray(p.sigma2, dtype=np.float64), y.shape[:1]))
    return ProblemTensors(torch.from_numpy(np.array(y)), torch.from_numpy(np.array(h)), torch.from_numpy(sigma2), batched)


def levels_tensor(c):
    return torch.from_numpy(np.array(c.levels, dtype=np.float64))


def _mv(a, v):
    return (a @ v[..., None])[..., 0]


def _abs2_sum(a, dims):
    return torch.sum(a.real ** 2 + a.imag ** 2, dim=dims)


def _hermitian(a):
    return a.transpose(-2, -1).conj()


def _noise_var_torch(a, h, h_norm2, residual_norm2, sigma2, theta2, n_r, n_t):
    eye = torch.eye(n_t, dtype=a.dtype)
    lin = _abs2_sum(eye - a @ h, (-2, -1)) / h_norm2
    noise = _abs2_sum(a, (-2, -1)) / h_norm2
    excess = torch.relu(residual_norm2 - n_r * sigma2)
    s = (lin * excess + noise * sigma2)[..., None]
    return theta2 / n_t * s


def _oamp_operator(h, hh, h_norm2, residual_norm2, sigma2):
    b = residual_norm2.shape[0]
    n_r, n_t = h.shape[-2:]
    v2 = torch.clamp((residual_norm2 - n_r * sigma2) / h_norm2, min=V2_FLOOR)
    inner = v2[:, None, None] * (h @ hh) + sigma2[:, None, None] * torch.eye(n_r, dtype=h.dtype)
    try:
        w = v2[:, None, None] * _hermitian(torch.linalg.solve(inner, h.expand(b, n_r, n_t)))
    except RuntimeError as e:
        raise SingularMatrixError(f"OAMP inner matrix is singular: {e}", 0.0)
    gamma = n_t / torch.diagonal(w @ h, dim1=-2, dim2=-1).sum(-1).real
    return w, gamma


def unrolled_forward(kind, theta1, theta2, pt, levels, n_layers):
    """Torch loop shared by every unrolled model; theta1 None runs classic OAMP."""
    y, h, sigma2 = pt.y, pt.h, pt.sigma2
    n_r, n_t = h.shape[-2:]
    hh = _hermitian(h)
    h_norm2 = _abs2_sum(h, (-2, -1))
    if torch.any(h_norm2 == 0):
        raise ContractViolation("Channel matrix must be nonzero.")

    x_hat = torch.zeros(y.shape[0], n_t, dtype=y.dtype)
    zs, xs, ss, rs, gammas = [], [], [], [], []
    for t in range(n_layers):
        r = y - _mv(h, x_hat)
        residual_norm2 = _abs2_sum(r, -1)
        if kind == "mmnet-iid":
            a = theta1[t] * hh
        elif kind == "mmnet":
            a = theta1[t]
        else:
            w, gamma = _oamp_operator(h, hh, h_norm2, residual_norm2, sigma2)
            scale = gamma if theta1 is None else theta1[t] * gamma
            a = scale[:, None, None] * w
            gammas.append(gamma)

        z = x_hat + _mv(a, r)
        s = _noise_var_torch(a, h, h_norm2, residual_norm2, sigma2, theta2[t], n_r, n_t)
        s = torch.clamp(s.expand(z.shape), min=SIGMA2_FLOOR)
        x_hat = gaussian_denoise_torch(z, s, levels)
        if not bool(torch.isfinite(x_hat).all() and torch.isfinite(s).all()):
            raise NumericalError(f"Non-finite value in {kind} layer {t}.", layer=t)

        zs.append(z)
        xs.append(x_hat)
        ss.append(s)
        rs.append(r)

    return ForwardTrace(
        z=torch.stack(zs),
        x_hat=torch.stack(xs),
        sigma2=torch.stack(ss),
        residual=torch.stack(rs),
        gamma=torch.stack(gammas) if gammas else None,
    )


def _to_numpy(trace, batched):
    def convert(t):
        if t is None:
            return None
        a = t.detach().numpy().copy()
        return a if batched else a[:, 0]

    return ForwardTrace(*(convert(t) for t in trace))


def _run(kind, p, c, params, n_layers):
    pt = problem_tensors(p)
    with torch.no_grad():
        if params is None:
            theta1, theta2 = None, torch.ones(n_layers, dtype=torch.float64)
        else:
            theta1, theta2 = params.unpack(torch.from_numpy(params.to_vector()))
        trace = unrolled_forward(kind, theta1, theta2, pt, levels_tensor(c), n_layers)
    return _to_numpy(trace, pt.batched)


def mmnet_iid_forward(p: DetectorProblem, c, params):
    return _run("mmnet-iid", p, c, params, params.n_layers)


def mmnet_forward(p: DetectorProblem, c, params):
    n_r, n_t = np.shape(p.h)[-2:]
    if params.dims != (n_r, n_t):
        raise ContractViolation(f"MMNet parameters are for {params.dims[0]}x{params.dims[1]} but channel is {n_r}x{n_t}.")
    return _run("mmnet", p, c, params, params.n_layers)


def oampnet_forward(p: DetectorProblem, c, params):
    if np.any(np.asarray(p.sigma2) <= 0.0):
        raise ContractViolation("OAMPNet needs a positive noise variance.")
    return _run("oampnet", p, c, params, params.n_layers)


def oamp_forward(p: DetectorProblem, c, n_layers):
    if np.any(np.asarray(p.sigma2) <= 0.0):
        raise ContractViolation("OAMP needs a positive noise variance.")
    return _run("oampnet", p, c, None, n_layers)


def forward(p, c, params):
    return {
        "mmnet-iid": mmnet_iid_forward,
        "mmnet": mmnet_forward,
        "oampnet": oampnet_forward,
    }[params.kind](p, c, params)


def noise_var_estimate(a_t, h, residual_norm2, sigma2, theta2):
    a_t = np.asarray(a_t, dtype=np.complex128)
    h = np.asarray(h, dtype=np.complex128)
    n_r, n_t = h.shape[-2:]
    if a_t.shape[-2:] != (n_t, n_r):
        raise ContractViolation(f"Operator shape {a_t.shape} does not match channel {h.shape}.")
    h_norm2 = frobenius_norm2(h)
    if np.any(h_norm2 == 0):
        raise ContractViolation("Channel matrix must be nonzero.")
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise ContractViolation("Noise variance must be non-negative.")

    lin = frobenius_norm2(np.eye(n_t) - a_t @ h) / h_norm2
    noise = frobenius_norm2(a_t) / h_norm2
    excess = np.maximum(np.asarray(residual_norm2, dtype=np.float64) - n_r * sigma2, 0.0)
    s = lin * excess + noise * sigma2
    return np.broadcast_to(theta2, (n_t,)) / n_t * np.asarray(s)[..., None]


def init_iid_params(n_layers=DEFAULT_LAYERS):
    return IidParams(theta1=np.ones(n_layers), theta2=np.ones(n_layers))


def init_full_params(h, n_layers=DEFAULT_LAYERS):
    h = np.asarray(h, dtype=np.complex128)
    n_t = h.shape[-1]
    theta1 = conj_transpose(h) * (n_t / frobenius_norm2(h))
    return FullParams(
        theta1=np.repeat(theta1[None], n_layers, axis=0),
        theta2=np.ones((n_layers, n_t)),
    )


def init_oampnet_params(n_layers=DEFAULT_LAYERS):
    """Starts at classic OAMP: theta1 scales the normalized operator, theta2 the variance."""
    return OampNetParams(theta1=np.ones(n_layers), theta2=np.ones(n_layers))


def parameter_count(params):
    return params.to_vector().size


def params_to_bytes(params):
    n_r, n_t = params.dims
    header = _MPARM_HEADER.pack(MPARM_MAGIC, MPARM_VERSION, MPARM_KIND_TAGS[params.kind], params.n_layers, n_r, n_t)
    return header + params.to_vector().astype(_VALUE_DTYPE).tobytes()


def params_from_bytes(data):
    if len(data) < _MPARM_HEADER.size:
        raise FormatError(f"Truncated header, expected {_MPARM_HEADER.size} bytes but got {len(data)}.", len(data))
    magic, version, tag, n_layers, n_r, n_t = _MPARM_HEADER.unpack_from(data)
    if magic != MPARM_MAGIC:
        raise FormatError(f"Invalid magic {magic!r}, expected {MPARM_MAGIC!r}.", 0)
    if version != MPARM_VERSION:
        raise FormatError(f"Unsupported version {version}, expected {MPARM_VERSION}.", 6)
    kinds = [k for k, v in MPARM_KIND_TAGS.items() if v == tag]
    if not kinds:
        raise FormatError(f"Unknown model kind tag {tag}.", 8)
    cls = _PARAM_TYPES[kinds[0]]
    if n_layers < 1:
        raise FormatError(f"Invalid layer count {n_layers}.", 9)

    if cls is FullParams:
        if not n_r >= n_t >= 1:
            raise FormatError(f"Invalid dimensions N_r={n_r} N_t={n_t}.", 13)
        count = n_layers * (2 * n_t * n_r + n_t)
        template = FullParams(np.zeros((n_layers, n_t, n_r), dtype=np.complex128), np.zeros((n_layers, n_t)))
    else:
        count = 2 * n_layers
        template = cls(np.zeros(n_layers), np.zeros(n_layers))

    end = _MPARM_HEADER.size + count * _VALUE_DTYPE.itemsize
    if len(data) != end:
        offset = min(len(data), end)
        raise FormatError(f"Parameter data must end at byte {end} but file has {len(data)} bytes.", offset)
    values = np.frombuffer(data, dtype=_VALUE_DTYPE, count=count, offset=_MPARM_HEADER.size)
    try:
        return template.with_vector(values)
    except ContractViolation as e:
        raise FormatError(e.message, _MPARM_HEADER.size)


def save_params(params, path):
    with open(path, "wb") as f:
        f.write(params_to_bytes(params))
    _LOGGER.debug("wrote %s parameters (T=%d) to %s", params.kind, params.n_layers, path)


def load_params(path):
    with open(path, "rb") as f:
        return params_from_bytes(f.read())
