"""Unnormalised log target for registration: local-NCC likelihood and
diffusion prior, with analytic gradients w.r.t. the displacement field.

The likelihood treats image similarity as the (negated) energy of a Boltzmann
distribution, log p(I_f | I_m o Z) = NCC(I_f, I_m o Z) / sigma^2 up to a
constant, where NCC is the mean over voxels of the squared local correlation
coefficient over a cube window.  Windows are clipped at the grid boundary and
use the true voxel count, which keeps the score exactly invariant to positive
affine intensity maps.  The prior penalises squared forward differences of the
field; a separate, stronger penalty of the same form applies to the proposal
mean during training only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError, ValidationError
from .grids import (
    DisplacementField,
    Volume,
    forward_diff_adjoint,
    spatial_forward_diff,
    warp_gradient,
    warp_intensity,
)


@dataclass(frozen=True)
class EnergyConfig:
    """Scales of the target density.

    sigma: likelihood temperature; smaller values sharpen the posterior.
    lam / lam_mu: prior weight on sampled fields / on the proposal mean.
    ncc_window: odd edge length of the local correlation window.
    ncc_eps: additive guard on both variance terms.
    """

    sigma: float = 0.5
    lam: float = 1.0
    lam_mu: float = 2.5
    ncc_window: int = 9
    ncc_eps: float = 1e-5

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if self.lam < 0 or self.lam_mu < 0:
            raise ValidationError("prior weights must be non-negative")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValidationError("ncc_window must be odd and >= 3")
        if self.ncc_eps <= 0:
            raise ValidationError("ncc_eps must be positive")


def _box_sum(arr: np.ndarray, half: int) -> np.ndarray:
    """Sum over the clipped cube window of radius ``half`` around each voxel."""
    out = arr
    for ax in range(arr.ndim):
        n = out.shape[ax]
        c = np.cumsum(out, axis=ax)
        pad_shape = list(c.shape)
        pad_shape[ax] = 1
        c = np.concatenate([np.zeros(pad_shape), c], axis=ax)
        hi = np.minimum(np.arange(n) + half + 1, n)
        lo = np.maximum(np.arange(n) - half, 0)
        out = np.take(c, hi, axis=ax) - np.take(c, lo, axis=ax)
    return out


def _ncc_terms(fixed: np.ndarray, warped: np.ndarray, window: int, eps: float):
    half = window // 2
    f = fixed - fixed.mean()
    w = warped - warped.mean()
    cnt = _box_sum(np.ones_like(f), half)
    sf = _box_sum(f, half)
    sw = _box_sum(w, half)
    cross = _box_sum(f * w, half) - sf * sw / cnt
    var_f = _box_sum(f * f, half) - sf * sf / cnt
    var_w = _box_sum(w * w, half) - sw * sw / cnt
    pos_w = var_w > 0.0
    var_f = np.maximum(var_f, 0.0)
    var_w = np.maximum(var_w, 0.0)
    return f, w, cnt, sf, sw, cross, var_f + eps, var_w + eps, pos_w


def local_ncc(fixed: Volume, warped: Volume, cfg: EnergyConfig) -> float:
    """Mean squared local correlation coefficient, in [0, 1]."""
    if fixed.grid != warped.grid:
        raise GridMismatchError("fixed and warped volumes live on different grids")
    if fixed.kind != "intensity" or warped.kind != "intensity":
        raise ValidationError("local_ncc requires intensity volumes")
    _, _, _, _, _, cross, b, c, _ = _ncc_terms(
        fixed.values, warped.values, cfg.ncc_window, cfg.ncc_eps
    )
    return float(np.mean(cross * cross / (b * c)))


def local_ncc_grad(fixed: Volume, warped: Volume, cfg: EnergyConfig):
    """(value, d value / d warped).  The gradient accounts for the clipped
    windows and the global centering used in the forward pass."""
    if fixed.grid != warped.grid:
        raise GridMismatchError("fixed and warped volumes live on different grids")
    half = cfg.ncc_window // 2
    f, w, cnt, sf, sw, cross, b, c, pos_w = _ncc_terms(
        fixed.values, warped.values, cfg.ncc_window, cfg.ncc_eps
    )
    n_vox = f.size
    value = float(np.mean(cross * cross / (b * c)))
    alpha = 2.0 * cross / (b * c)
    beta = (2.0 * cross * cross / (b * c * c)) * pos_w
    f_bar = sf / cnt
    w_bar = sw / cnt
    grad = (
        f * _box_sum(alpha, half)
        - _box_sum(alpha * f_bar, half)
        - w * _box_sum(beta, half)
        + _box_sum(beta * w_bar, half)
    ) / n_vox
    grad -= grad.mean()
    return value, grad


def log_likelihood(fixed: Volume, moving: Volume, z: DisplacementField, cfg: EnergyConfig) -> float:
    """Unnormalised similarity term NCC / sigma^2; higher is better aligned."""
    return local_ncc(fixed, warp_intensity(moving, z), cfg) / cfg.sigma**2


def log_prior(z: DisplacementField, cfg: EnergyConfig) -> float:
    """Diffusion penalty -(lam/2) sum of squared forward differences."""
    d = spatial_forward_diff(z)
    return -0.5 * cfg.lam * float(np.sum(d * d))


def log_prior_grad(z: DisplacementField, cfg: EnergyConfig) -> np.ndarray:
    d = spatial_forward_diff(z)
    return -cfg.lam * forward_diff_adjoint(z.grid, d)


def mu_penalty(mu: DisplacementField, cfg: EnergyConfig) -> float:
    """Same form as the prior with weight lam_mu; training-time term on the
    proposal mean only, never part of a sample's importance weight."""
    d = spatial_forward_diff(mu)
    return -0.5 * cfg.lam_mu * float(np.sum(d * d))


def mu_penalty_grad(mu: DisplacementField, cfg: EnergyConfig) -> np.ndarray:
    d = spatial_forward_diff(mu)
    return -cfg.lam_mu * forward_diff_adjoint(mu.grid, d)


def log_target(fixed: Volume, moving: Volume, z: DisplacementField, cfg: EnergyConfig) -> float:
    """Unnormalised log joint: likelihood plus prior."""
    return log_likelihood(fixed, moving, z, cfg) + log_prior(z, cfg)


def grad_log_target(
    fixed: Volume, moving: Volume, z: DisplacementField, cfg: EnergyConfig
) -> np.ndarray:
    """d log_target / d z as a (D,) + shape array."""
    warped = warp_intensity(moving, z)
    _, g_ncc = local_ncc_grad(fixed, warped, cfg)
    g_like = warp_gradient(moving, z, g_ncc) / cfg.sigma**2
    return g_like + log_prior_grad(z, cfg)


class BaseTarget:
    """Minimal interface the inference engine needs from a target density."""

    def log_target(self, z: DisplacementField) -> float:
        raise NotImplementedError

    def grad_log_target(self, z: DisplacementField) -> np.ndarray:
        raise NotImplementedError

    def mu_penalty(self, mu: DisplacementField) -> float:
        return 0.0

    def mu_penalty_grad(self, mu: DisplacementField) -> np.ndarray:
        return np.zeros((mu.grid.ndim,) + mu.grid.shape)


class RegistrationTarget(BaseTarget):
    """Log target for one image pair under a fixed energy configuration."""

    def __init__(self, fixed: Volume, moving: Volume, cfg: EnergyConfig):
        if fixed.grid != moving.grid:
            raise GridMismatchError("fixed and moving volumes live on different grids")
        self.fixed = fixed
        self.moving = moving
        self.cfg = cfg
        self.grid = fixed.grid

    def log_target(self, z: DisplacementField) -> float:
        return log_target(self.fixed, self.moving, z, self.cfg)

    def grad_log_target(self, z: DisplacementField) -> np.ndarray:
        return grad_log_target(self.fixed, self.moving, z, self.cfg)

    def mu_penalty(self, mu: DisplacementField) -> float:
        return mu_penalty(mu, self.cfg)

    def mu_penalty_grad(self, mu: DisplacementField) -> np.ndarray:
        return mu_penalty_grad(mu, self.cfg)
