"""Posterior-mean denoiser for a constellation seen through Gaussian noise.

beta(z) = sum_i x_i exp(-|z - x_i|^2 / sigma2) / sum_i exp(-|z - x_i|^2 / sigma2)

Square QAM factorizes into two PAM denoisers, one per real axis, which is
the path every detector uses. The direct M-point sum is kept for checking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import softmax

from .exceptions import ContractViolation


@dataclass(frozen=True)
class DenoiserGrad:
    mean: np.ndarray
    # d(re, im) of the output w.r.t. (re, im) of the input, shape (..., 2, 2)
    jacobian: np.ndarray
    d_sigma2: np.ndarray

    @property
    def half_trace(self):
        return 0.5 * (self.jacobian[..., 0, 0] + self.jacobian[..., 1, 1])


def _check_inputs(z, sigma2):
    z = np.asarray(z, dtype=np.complex128)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(~(sigma2 > 0.0)):
        raise ContractViolation("Denoiser input variance must be positive.")
    return z, np.broadcast_to(sigma2, z.shape)


def _pam_weights(v, sigma2, levels):
    logits = -((v[..., None] - levels) ** 2) / sigma2[..., None]
    return softmax(logits, axis=-1)


def _pam_moments(v, sigma2, levels):
    w = _pam_weights(v, sigma2, levels)
    mean = np.sum(w * levels, axis=-1)
    centered = levels - mean[..., None]
    var = np.sum(w * centered ** 2, axis=-1)
    dist = (v[..., None] - levels) ** 2
    dist_centered = dist - np.sum(w * dist, axis=-1)[..., None]
    cov_dist = np.sum(w * centered * dist_centered, axis=-1)
    return mean, var, cov_dist


def gaussian_denoise(z, sigma2, c):
    z, sigma2 = _check_inputs(z, sigma2)
    re = np.sum(_pam_weights(z.real, sigma2, c.levels) * c.levels, axis=-1)
    im = np.sum(_pam_weights(z.imag, sigma2, c.levels) * c.levels, axis=-1)
    return re + 1j * im


def gaussian_denoise_direct(z, sigma2, c):
    z, sigma2 = _check_inputs(z, sigma2)
    logits = -np.abs(z[..., None] - c.points) ** 2 / sigma2[..., None]
    return np.sum(softmax(logits, axis=-1) * c.points, axis=-1)


def gaussian_denoise_grad(z, sigma2, c):
    """Output, Jacobian (2/sigma2) Cov_w(x) and d/dsigma2 = Cov_w(x, |z-x|^2) / sigma2^2."""
    z, sigma2 = _check_inputs(z, sigma2)
    mean_re, var_re, cov_re = _pam_moments(z.real, sigma2, c.levels)
    mean_im, var_im, cov_im = _pam_moments(z.imag, sigma2, c.levels)

    jacobian = np.zeros(z.shape + (2, 2))
    jacobian[..., 0, 0] = 2.0 * var_re / sigma2
    jacobian[..., 1, 1] = 2.0 * var_im / sigma2
    d_sigma2 = (cov_re + 1j * cov_im) / sigma2 ** 2
    return DenoiserGrad(mean=mean_re + 1j * mean_im, jacobian=jacobian, d_sigma2=d_sigma2)


def gaussian_denoise_torch(z, sigma2, levels):
    """Differentiable separable denoiser; z complex, sigma2 real and broadcastable to z."""
    sigma2 = torch.broadcast_to(sigma2, z.shape)[..., None]
    w_re = torch.softmax(-(z.real[..., None] - levels) ** 2 / sigma2, dim=-1)
    w_im = torch.softmax(-(z.imag[..., None] - levels) ** 2 / sigma2, dim=-1)
    return torch.complex(w_re @ levels, w_im @ levels)
