"""Per-pair optimisation of the proposal parameters and the gradient checker.

One parameter set (mean, precision-factor diagonal and off-diagonals, low-rank
columns) is fitted to a single image pair under either the resampling loss or
the single-sample variational loss, using Adam-style per-parameter second
moment scaling with a cosine learning-rate schedule and global-norm gradient
clipping.  Everything is driven by one seed; the same seed and config yield a
bit-identical trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import BaseTarget, EnergyConfig, RegistrationTarget
from .errors import ValidationError
from .gaussian import (
    CholeskyFactor,
    LowRankFactor,
    NoiseDraw,
    StructuredGaussian,
    softplus_inverse,
)
from .grids import DisplacementField, Grid, Volume, field_from_vector, jacobian_fold_fraction
from .pattern import build_pattern
from .rng import derive_seed, stream_rng
from .sir import (
    LossResult,
    TemperatureState,
    effective_sample_size,
    elbo_loss,
    resample_ensemble,
    sir_loss,
    weighting_pass,
)

VARIANTS = ("D", "LD", "C", "LC")


@dataclass(frozen=True)
class FitConfig:
    """Optimisation settings.  ``variant`` selects the covariance structure:
    D = diagonal factor, C = stencil factor, a leading L adds the low-rank
    term.  ``n_l``/``n_k`` are the per-step candidate and survivor counts of
    the resampling mode."""

    mode: str = "sir"
    variant: str = "LC"
    steps: int = 2000
    lr: float = 1e-2
    lr_floor: float | None = None
    decay_start: int = 0
    decay_span: int | None = None
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    clip_norm: float = 1e3
    n_l: int = 24
    n_k: int = 6
    rank: int = 25
    kernel_radius: int = 1
    init_diag: float = 1.0
    offdiag_l2: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("variational", "sir"):
            raise ValidationError(f"unknown fit mode {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.lr <= 0 or (self.lr_floor is not None and self.lr_floor <= 0):
            raise ValidationError("learning rates must be positive")
        if self.n_l < 1 or self.n_k < 1:
            raise ValidationError("n_l and n_k must be >= 1")

    def structure(self) -> tuple[int, bool, int]:
        """(kernel_radius, cross_channel, rank) implied by the variant."""
        radius = self.kernel_radius if self.variant in ("C", "LC") else 0
        cross = self.variant in ("C", "LC")
        rank = self.rank if self.variant in ("LD", "LC") else 0
        return radius, cross, rank


@dataclass
class FitTrace:
    """Per-step diagnostics plus the final tempering scale."""

    loss: np.ndarray
    ess: np.ndarray
    sigma_alpha: np.ndarray
    max_weight: np.ndarray
    fold_mu: np.ndarray
    final_sigma_alpha: float = float("nan")

    def __len__(self):
        return len(self.loss)

    COLUMNS = ("step", "loss", "ess", "sigma_alpha", "max_weight", "fold_mu")

    def rows(self):
        for t in range(len(self.loss)):
            yield (
                t,
                self.loss[t],
                self.ess[t],
                self.sigma_alpha[t],
                self.max_weight[t],
                self.fold_mu[t],
            )


def _build_q(grid: Grid, pattern, params: dict) -> StructuredGaussian:
    mean = field_from_vector(grid, params["mu"], validate=False)
    chol = CholeskyFactor(pattern, params["raw_diag"], params["off_diag"])
    return StructuredGaussian(mean, chol, LowRankFactor(params["lowrank"]))


def initial_params(grid: Grid, pattern, rank: int, init_diag: float = 1.0) -> dict:
    n = pattern.n
    return {
        "mu": np.zeros(n),
        "raw_diag": np.full(n, softplus_inverse(init_diag)),
        "off_diag": np.zeros(pattern.n_off),
        "lowrank": np.zeros((n, rank)),
    }


class AdamState:
    def __init__(self, params: dict, beta1: float, beta2: float, eps: float):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            np.square(g, out=g)  # grads are consumed; reuse as scratch
            g *= 1.0 - self.beta2
            v += g
            np.sqrt(v / b2c, out=g)
            g += self.eps
            np.divide(m, g, out=g)
            g *= lr / b1c
            params[k] -= g


def _clip_grads(grads: dict, clip_norm: float) -> dict:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > clip_norm > 0:
        scale = clip_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


def _lr_at(cfg: FitConfig, step: int) -> float:
    """Constant until decay_start, cosine over decay_span steps, then floor."""
    floor = cfg.lr_floor if cfg.lr_floor is not None else cfg.lr / 10.0
    if step < cfg.decay_start:
        return cfg.lr
    span = cfg.decay_span if cfg.decay_span is not None else cfg.steps - cfg.decay_start
    span = max(1, span)
    frac = min(1.0, (step - cfg.decay_start) / span)
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * frac))


def fit_target(
    target: BaseTarget,
    grid: Grid,
    cfg: FitConfig,
    temperature: TemperatureState | None = None,
) -> tuple[StructuredGaussian, FitTrace]:
    """Optimise proposal parameters against an arbitrary target density."""
    radius, cross, rank = cfg.structure()
    pattern = build_pattern(grid, channels=grid.ndim, kernel_radius=radius, cross_channel=cross)
    params = initial_params(grid, pattern, rank, cfg.init_diag)
    adam = AdamState(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    temp = temperature if temperature is not None else TemperatureState()

    trace = FitTrace(
        loss=np.full(cfg.steps, np.nan),
        ess=np.full(cfg.steps, np.nan),
        sigma_alpha=np.full(cfg.steps, np.nan),
        max_weight=np.full(cfg.steps, np.nan),
        fold_mu=np.full(cfg.steps, np.nan),
    )
    bad_streak = 0
    for step in range(cfg.steps):
        q = _build_q(grid, pattern, params)
        step_seed = derive_seed(cfg.seed, "step", step)
        if cfg.mode == "sir":
            ensemble = weighting_pass(q, target, cfg.n_l, step_seed, temp, update_temperature=True)
            rng = stream_rng(cfg.seed, "resample", step)
            indices = resample_ensemble(ensemble, cfg.n_k, rng)
            result = sir_loss(q, target, ensemble, indices, cfg.offdiag_l2)
            trace.ess[step] = effective_sample_size(ensemble.weights)
            trace.sigma_alpha[step] = ensemble.sigma_alpha
            trace.max_weight[step] = float(ensemble.weights.max())
        else:
            noise = NoiseDraw(q.n, q.rank, seed=step_seed, index=0)
            result = elbo_loss(q, target, noise, cfg.offdiag_l2)
            trace.ess[step] = 1.0
            trace.max_weight[step] = 1.0
        trace.loss[step] = result.value
        trace.fold_mu[step] = jacobian_fold_fraction(q.mean)

        if not np.isfinite(result.value):
            bad_streak += 1
            if bad_streak >= 10:
                raise ValidationError(
                    f"loss non-finite for {bad_streak} consecutive steps (step {step})"
                )
            continue
        bad_streak = 0
        grads = _clip_grads(result.grads, cfg.clip_norm)
        adam.update(params, grads, _lr_at(cfg, step))

    trace.final_sigma_alpha = temp.sigma_alpha if temp.initialized else float("nan")
    return _build_q(grid, pattern, params), trace


def fit(
    fixed: Volume,
    moving: Volume,
    energy_cfg: EnergyConfig,
    fit_cfg: FitConfig,
    temperature: TemperatureState | None = None,
) -> tuple[StructuredGaussian, FitTrace]:
    """Fit the proposal for one image pair."""
    target = RegistrationTarget(fixed, moving, energy_cfg)
    return fit_target(target, fixed.grid, fit_cfg, temperature)


# ----- finite-difference validation ----------------------------------------


@dataclass
class GradCheckProblem:
    """A differentiable scalar objective over named parameter blocks."""

    params: dict
    fn: "callable"  # dict -> LossResult
    name: str = "problem"


@dataclass
class GradCheckReport:
    block_errors: dict
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def summary(self) -> str:
        lines = [f"gradient check ({'PASS' if self.passed else 'FAIL'}), tol {self.tolerance:g}"]
        for k, v in self.block_errors.items():
            lines.append(f"  {k:10s} max rel err {v:.3e}")
        lines.append(f"  overall max rel err {self.max_rel_err:.3e}")
        return "\n".join(lines)


def check_gradients(
    problem: GradCheckProblem,
    tolerance: float = 1e-4,
    step_scale: float = 1e-4,
    max_coords_per_block: int = 20,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences against the analytic gradients.

    Each block is probed at up to ``max_coords_per_block`` coordinates; the
    per-block error is the largest observed deviation relative to the larger
    of the analytic and numeric gradient magnitudes over the probed set.
    """
    rng = stream_rng(seed, "gradcheck")
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in problem.params.items()}
    analytic = problem.fn(base).grads
    block_errors: dict[str, float] = {}
    for key, arr in base.items():
        flat = arr.ravel()
        if flat.size == 0:
            block_errors[key] = 0.0
            continue
        size = min(max_coords_per_block, flat.size)
        coords = rng.choice(flat.size, size=size, replace=False)
        an = analytic[key].ravel()[coords]
        fd = np.empty(size)
        for j, i in enumerate(coords):
            h = step_scale * max(1.0, abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + h
            fp = problem.fn(base).value
            flat[i] = orig - h
            fm = problem.fn(base).value
            flat[i] = orig
            fd[j] = (fp - fm) / (2.0 * h)
        denom = max(np.abs(an).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-12)
        block_errors[key] = float(np.abs(an - fd).max() / denom)
    max_err = max(block_errors.values()) if block_errors else 0.0
    return GradCheckReport(block_errors=block_errors, max_rel_err=max_err, tolerance=tolerance)


def loss_problem(
    grid: Grid,
    target: BaseTarget,
    cfg: FitConfig,
    params: dict | None = None,
    perturb: float = 0.1,
    seed: int = 0,
) -> GradCheckProblem:
    """Freeze one loss evaluation (noise and survivor indices fixed) into a
    params -> LossResult closure suitable for :func:`check_gradients`."""
    radius, cross, rank = cfg.structure()
    pattern = build_pattern(grid, channels=grid.ndim, kernel_radius=radius, cross_channel=cross)
    if params is None:
        rng = stream_rng(seed, "problem-params")
        params = initial_params(grid, pattern, rank, cfg.init_diag)
        params["mu"] = perturb * rng.standard_normal(pattern.n)
        params["raw_diag"] += perturb * rng.standard_normal(pattern.n)
        params["off_diag"] = perturb * rng.standard_normal(pattern.n_off)
        if rank > 0:
            params["lowrank"] = perturb * rng.standard_normal((pattern.n, rank))

    n = pattern.n
    if cfg.mode == "sir":
        noise = [NoiseDraw(n, rank, seed=derive_seed(seed, "probe"), index=i) for i in range(cfg.n_l)]
        rng = stream_rng(seed, "probe-resample")
        indices = rng.integers(0, cfg.n_l, size=cfg.n_k)

        def fn(p: dict) -> LossResult:
            q = _build_q(grid, pattern, p)
            ens_weights = np.full(cfg.n_l, 1.0 / cfg.n_l)
            from .sir import WeightedEnsemble

            ens = WeightedEnsemble(
                noise=noise,
                log_alpha=np.zeros(cfg.n_l),
                scaled_log_alpha=np.zeros(cfg.n_l),
                weights=ens_weights,
                sigma_alpha=float("nan"),
            )
            return sir_loss(q, target, ens, indices, cfg.offdiag_l2)

    else:
        noise = NoiseDraw(n, rank, seed=derive_seed(seed, "probe"), index=0)

        def fn(p: dict) -> LossResult:
            q = _build_q(grid, pattern, p)
            return elbo_loss(q, target, noise, cfg.offdiag_l2)

    return GradCheckProblem(params=params, fn=fn, name=f"{cfg.mode}-{cfg.variant}")
