"""Two-pass sampled importance resampling and the training losses.

Pass one draws candidates from the proposal without gradients, storing only
their noise streams, and weights each by log target minus log proposal.  The
raw log-weights are tempered by the exponent T / sigma_alpha, where
sigma_alpha tracks the batch standard deviation of the log-weights with an
exponential moving average; pass two resamples survivors multinomially and
redraws them from the stored noise to accumulate pathwise gradients.

Tempering operates on log-weights (w proportional to alpha^(T/sigma_alpha)):
for the weight magnitudes that dense registration produces, exponentiating raw
weights is numerically unusable, and a strictly monotone map on log-weights
never reorders candidates.  A "linear" mode that tracks the moving average in
weight space instead is kept for comparison; note that a plain multiplicative
rescaling of the weights cancels in the normalisation, so that mode only
changes the recorded sigma_alpha trace, not the resampling law.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import BaseTarget
from .errors import DegenerateEnsembleError, ValidationError
from .gaussian import NoiseDraw, StructuredGaussian
from .grids import field_from_vector, vectorize_field
from .rng import stream_rng

SIGMA_FLOOR = 1e-8


@dataclass
class TemperatureState:
    """Dynamic tempering state: exponent T / sigma_alpha with EMA tracking."""

    temperature: float = 3.0
    gamma: float = 0.9
    sigma_alpha: float | None = None
    space: str = "log"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError("gamma must be in [0, 1)")
        if self.space not in ("log", "linear"):
            raise ValidationError("temperature space must be 'log' or 'linear'")

    @property
    def initialized(self) -> bool:
        return self.sigma_alpha is not None

    def _batch_std(self, log_alpha: np.ndarray) -> float:
        finite = log_alpha[np.isfinite(log_alpha)]
        if finite.size < 2:
            return SIGMA_FLOOR
        if self.space == "linear":
            m = finite.max()
            std = float(np.exp(m) * np.std(np.exp(finite - m)))
        else:
            std = float(np.std(finite))
        if not np.isfinite(std):
            return SIGMA_FLOOR
        return max(std, SIGMA_FLOOR)

    def observe(self, log_alpha: np.ndarray) -> None:
        """Advance the EMA with one batch; the first batch sets it directly."""
        std = self._batch_std(np.asarray(log_alpha, dtype=np.float64))
        if self.sigma_alpha is None:
            self.sigma_alpha = std
        else:
            self.sigma_alpha = self.gamma * self.sigma_alpha + (1.0 - self.gamma) * std

    def factor(self) -> float:
        if self.sigma_alpha is None:
            return 1.0
        return self.temperature / max(self.sigma_alpha, SIGMA_FLOOR)


def apply_temperature(
    log_alpha: np.ndarray, state: TemperatureState, update: bool = True
) -> np.ndarray:
    """Temper log-weights; optionally advance the EMA with this batch first."""
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    if update:
        state.observe(log_alpha)
    if state.space == "linear":
        return log_alpha + np.log(state.factor())
    return log_alpha * state.factor()


def normalize_weights(scaled_log_alpha: np.ndarray) -> np.ndarray:
    """Self-normalised weights via max-shifted exponentiation; sums to one."""
    la = np.asarray(scaled_log_alpha, dtype=np.float64)
    finite = np.isfinite(la)
    if not finite.any():
        raise DegenerateEnsembleError("all importance weights are zero")
    m = la[finite].max()
    w = np.where(finite, np.exp(np.where(finite, la, m) - m), 0.0)
    return w / w.sum()


def multinomial_resample(w: np.ndarray, n_k: int, rng: np.random.Generator) -> np.ndarray:
    """n_k independent categorical draws from the normalised weights."""
    w = np.asarray(w, dtype=np.float64)
    if n_k < 1:
        raise ValidationError("n_k must be >= 1")
    if w.min(initial=0.0) < 0 or abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError("weights must be non-negative and sum to one")
    if w.max(initial=0.0) <= 0.0:
        raise DegenerateEnsembleError("all importance weights are zero")
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(n_k), side="right")
    return np.minimum(idx, w.size - 1).astype(np.int64)


def iwae_bound(log_alpha: np.ndarray) -> float:
    """log of the mean raw importance weight (untempered)."""
    la = np.asarray(log_alpha, dtype=np.float64)
    m = la[np.isfinite(la)].max()
    return float(m + np.log(np.mean(np.exp(la - m))))


def effective_sample_size(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


@dataclass
class WeightedEnsemble:
    """Result of a weighting pass.  Candidate samples are not retained; each
    entry of ``noise`` rematerialises its draw bit-exactly."""

    noise: list[NoiseDraw]
    log_alpha: np.ndarray
    scaled_log_alpha: np.ndarray
    weights: np.ndarray
    sigma_alpha: float
    nan_count: int = 0
    resampled_indices: np.ndarray | None = None

    @property
    def n_candidates(self) -> int:
        return len(self.noise)


def weighting_pass(
    q: StructuredGaussian,
    target: BaseTarget,
    n_samples: int,
    seed: int,
    temperature: TemperatureState | None = None,
    update_temperature: bool = True,
    batch_size: int = 64,
) -> WeightedEnsemble:
    """Draw, score and weight ``n_samples`` candidates without gradients.

    Candidates are drawn in batches (one batched triangular solve per batch);
    the proposal density of its own draws uses the collapsed Woodbury vector,
    so the pass costs one solve plus one target evaluation per candidate.
    Non-finite log-weights are forced to -inf (zero weight) and tallied so a
    single bad candidate cannot poison the pass.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if temperature is None:
        temperature = TemperatureState()
    noise = [NoiseDraw(q.n, q.rank, seed=seed, index=i) for i in range(n_samples)]
    log_alpha = np.empty(n_samples)
    nan_count = 0
    for start in range(0, n_samples, batch_size):
        chunk = noise[start : start + batch_size]
        vecs = q.sample_batch_vecs(chunk)
        log_q = q.log_density_own_batch(chunk)
        for j, nd in enumerate(chunk):
            vec = vecs[:, j]
            if np.all(np.isfinite(vec)) and np.isfinite(log_q[j]):
                z = field_from_vector(q.grid, vec)
                la = target.log_target(z) - log_q[j]
            else:
                la = -np.inf
            if not np.isfinite(la):
                la = -np.inf
                nan_count += 1
            log_alpha[start + j] = la
    scaled = apply_temperature(log_alpha, temperature, update=update_temperature)
    weights = normalize_weights(scaled)
    return WeightedEnsemble(
        noise=noise,
        log_alpha=log_alpha,
        scaled_log_alpha=scaled,
        weights=weights,
        sigma_alpha=temperature.sigma_alpha if temperature.initialized else float("nan"),
        nan_count=nan_count,
    )


def resample_ensemble(
    ensemble: WeightedEnsemble, n_k: int, rng: np.random.Generator
) -> np.ndarray:
    """Multinomial survivor selection, recorded on the ensemble."""
    idx = multinomial_resample(ensemble.weights, n_k, rng)
    ensemble.resampled_indices = idx
    return idx


@dataclass
class LossResult:
    """A scalar training loss with parameter gradients and its additive parts.

    ``parts`` exposes each term exactly as summed, so reductions between the
    losses (shared terms) can be asserted bit-for-bit.
    """

    value: float
    grads: dict
    parts: dict = field(default_factory=dict)


def _zero_grads(q: StructuredGaussian) -> dict:
    return {
        "mu": np.zeros(q.n),
        "raw_diag": np.zeros(q.n),
        "off_diag": np.zeros(q.chol.pattern.n_off),
        "lowrank": np.zeros((q.n, q.rank)),
    }


def _penalty_terms(q: StructuredGaussian, target: BaseTarget, offdiag_l2: float):
    pen_mu = -target.mu_penalty(q.mean)
    pen_l2 = offdiag_l2 * float(np.sum(q.chol.off_diag**2))
    g_mu = -target.mu_penalty_grad(q.mean).reshape(q.grid.ndim, -1).T.ravel()
    g_off = 2.0 * offdiag_l2 * q.chol.off_diag
    return pen_mu, pen_l2, g_mu, g_off


def sir_loss(
    q: StructuredGaussian,
    target: BaseTarget,
    ensemble: WeightedEnsemble,
    indices: np.ndarray,
    offdiag_l2: float = 0.05,
) -> LossResult:
    """Mean negative log-target over the resampled survivors.

    Survivors are redrawn from their stored noise, so the gradient refers to
    exactly the points that were weighted.  The mean-smoothness penalty and
    the off-diagonal L2 penalty are training-only additions.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size < 1:
        raise ValidationError("need at least one resampled index")
    if indices.min() < 0 or indices.max() >= ensemble.n_candidates:
        raise ValidationError("resampled index out of range")

    unique, counts = np.unique(indices, return_counts=True)
    n_k = indices.size
    survivors = [ensemble.noise[i] for i in unique]
    vecs = q.sample_batch_vecs(survivors)
    upstreams = np.empty_like(vecs)
    neg_log_target = 0.0
    for j, (count, nd) in enumerate(zip(counts, survivors)):
        z = field_from_vector(q.grid, vecs[:, j])
        lt = target.log_target(z)
        upstreams[:, j] = -target.grad_log_target(z).reshape(q.grid.ndim, -1).T.ravel()
        neg_log_target += (count / n_k) * (-lt)
    grads = q.grad_sample_path_batch(survivors, upstreams, counts / n_k)

    pen_mu, pen_l2, g_mu, g_off = _penalty_terms(q, target, offdiag_l2)
    grads["mu"] += g_mu
    grads["off_diag"] += g_off
    parts = {
        "neg_log_target": neg_log_target,
        "mu_penalty": pen_mu,
        "offdiag_l2": pen_l2,
    }
    value = neg_log_target + pen_mu + pen_l2
    return LossResult(value=value, grads=grads, parts=parts)


def elbo_loss(
    q: StructuredGaussian,
    target: BaseTarget,
    noise: NoiseDraw,
    offdiag_l2: float = 0.05,
) -> LossResult:
    """Single-sample negative evidence bound -[log target - log q].

    Pathwise gradients flow through the reparameterised sample; the direct
    parameter gradients of log q supply the entropy term.  With the same
    noise, every term other than log q is computed by the identical code path
    as :func:`sir_loss`, so the two agree bit-for-bit on shared terms.
    """
    z = q.sample(noise)
    lt = target.log_target(z)
    g = -target.grad_log_target(z).reshape(q.grid.ndim, -1).T.ravel()
    grads = q.grad_sample_path(noise, g)
    neg_log_target = -lt

    log_q = q.log_density(z)
    g_path_q = q.grad_log_density_x(z)
    pq = q.grad_sample_path(noise, g_path_q)
    dq = q.grad_log_density_params(z)
    for key in grads:
        grads[key] = grads[key] + pq[key] + dq[key]

    pen_mu, pen_l2, g_mu, g_off = _penalty_terms(q, target, offdiag_l2)
    grads["mu"] += g_mu
    grads["off_diag"] += g_off
    parts = {
        "neg_log_target": neg_log_target,
        "mu_penalty": pen_mu,
        "offdiag_l2": pen_l2,
        "log_q": log_q,
    }
    value = (neg_log_target + pen_mu + pen_l2) + log_q
    return LossResult(value=value, grads=grads, parts=parts)


class GaussianDensityTarget(BaseTarget):
    """Target equal to the exact density of a frozen structured Gaussian.

    Importance weights against a proposal with the same parameters are then
    constant; used for sanity checks of the weighting machinery.
    """

    def __init__(self, q: StructuredGaussian):
        self.q = q
        self.grid = q.grid

    def log_target(self, z):
        return self.q.log_density(z)

    def grad_log_target(self, z):
        vec = self.q.grad_log_density_x(z)
        d = self.grid.ndim
        return vec.reshape(self.grid.n_voxels, d).T.reshape((d,) + self.grid.shape)


class IsotropicGaussianTarget(BaseTarget):
    """log p(Z) = -0.5 ||vec(Z) - c||^2: a quadratic toy with known optimum."""

    def __init__(self, grid, center_vec: np.ndarray):
        self.grid = grid
        self.center = np.asarray(center_vec, dtype=np.float64)

    def log_target(self, z):
        x = vectorize_field(z) - self.center
        return -0.5 * float(x @ x)

    def grad_log_target(self, z):
        x = vectorize_field(z) - self.center
        d = self.grid.ndim
        return (-x).reshape(self.grid.n_voxels, d).T.reshape((d,) + self.grid.shape)
