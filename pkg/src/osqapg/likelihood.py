"""Complex-Gaussian output model and the supervised training losses.

Spectra here are laid out with frames as rows, matching ``MaskPosterior``'s
linear views: pass ``spec.bins.T`` (T, n_bins) or a single frame vector.
Losses are summed over every bin and frame given; normalizing by the frame
count is left to the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import compute_psa


@dataclass
class FrameLikelihoodGrad:
    loss: float
    d_mask_lin: np.ndarray
    d_var_lin: np.ndarray


def _check(S, X, mask, var):
    S, X = np.asarray(S), np.asarray(X)
    mask, var = np.asarray(mask, dtype=np.float64), np.asarray(var, dtype=np.float64)
    if not (S.shape == X.shape == mask.shape == var.shape):
        raise ValueError(f"shape mismatch: {S.shape}, {X.shape}, {mask.shape}, {var.shape}")
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    return S, X, mask, var


def gaussian_log_likelihood(S, X, mask, var) -> float:
    """sum over bins of -ln(2 pi var) - |S - mask X|^2 / (2 var)."""
    S, X, mask, var = _check(S, X, mask, var)
    err = np.abs(S - mask * X) ** 2
    return float(np.sum(-np.log(2.0 * np.pi * var) - err / (2.0 * var)))


def log_likelihood_partials(S, X, mask, var) -> tuple[np.ndarray, np.ndarray]:
    """Partials of the log-likelihood w.r.t. the mask and the variance, per bin."""
    S, X, mask, var = _check(S, X, mask, var)
    resid = S - mask * X
    d_mask = (resid * np.conj(X)).real / var
    d_var = -1.0 / var + np.abs(resid) ** 2 / (2.0 * var ** 2)
    return d_mask, d_var


def ml_loss_and_head_grads(S, X, post) -> FrameLikelihoodGrad:
    """Negative log-likelihood of the clean target under the network posterior."""
    mask, var = post.mask_lin, post.var_lin
    S = np.asarray(S).reshape(mask.shape)
    X = np.asarray(X).reshape(mask.shape)
    d_mask, d_var = log_likelihood_partials(S, X, mask, var)
    return FrameLikelihoodGrad(-gaussian_log_likelihood(S, X, mask, var), -d_mask, -d_var)


def psa_mmse_loss_and_head_grads(S, X, post) -> FrameLikelihoodGrad:
    """sum of (mask |X| - G_psa |X|)^2; the variance head gets no gradient."""
    mask = post.mask_lin
    S = np.asarray(S).reshape(mask.shape)
    X = np.asarray(X).reshape(mask.shape)
    mag = np.abs(X)
    diff = (mask - compute_psa(S, X)) * mag
    return FrameLikelihoodGrad(float(np.sum(diff ** 2)), 2.0 * diff * mag, np.zeros_like(mask))
