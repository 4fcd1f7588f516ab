"""Segmentation accuracy, calibration and multi-modality metrics.

Per-structure quantities follow the usual conventions: Dice overlap of
propagated labels, expected calibration error over equal-width confidence
bins inside a dilated structure mask, area under the sparsification-error
curve for an uncertainty map, per-voxel label entropy of the averaged warped
one-hot labels, and the Gaussian-fit differential entropy of the displacement
samples.  Entropies are in nats; displacement entropy uses mm units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .energy import EnergyConfig, RegistrationTarget
from .errors import ValidationError
from .gaussian import StructuredGaussian
from .grids import DisplacementField, Grid, Volume, jacobian_fold_fraction, warp_labels
from .rng import stream_rng
from .sir import TemperatureState, resample_ensemble, weighting_pass

DET_FLOOR = 1e-12
AUSE_FRACTIONS = np.arange(0.0, 0.9999, 0.05)  # 0.00 .. 0.95


def dice(a: Volume, b: Volume, label: int) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as perfect overlap."""
    ma = a.values == label
    mb = b.values == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom


def _label_ids(*volumes: Volume) -> list[int]:
    ids: set[int] = set()
    for v in volumes:
        ids.update(np.unique(v.values).tolist())
    return sorted(int(i) for i in ids)


def mean_dice(warped_labels: Volume, fixed_labels: Volume, labels=None) -> float:
    """Average Dice over the non-background structures."""
    if labels is None:
        labels = [l for l in _label_ids(fixed_labels, warped_labels) if l != 0]
    if not labels:
        return 1.0
    return float(np.mean([dice(warped_labels, fixed_labels, l) for l in labels]))


def oracle_select(
    samples: list[DisplacementField],
    fixed_labels: Volume,
    moving_labels: Volume,
    labels=None,
) -> int:
    """Index of the sample whose label warp scores the best mean Dice.

    Ties break to the lowest index.
    """
    if not samples:
        raise ValidationError("oracle_select needs at least one sample")
    if labels is None:
        labels = [l for l in _label_ids(fixed_labels, moving_labels) if l != 0]
    scores = [
        mean_dice(warp_labels(moving_labels, z), fixed_labels, labels) for z in samples
    ]
    return int(np.argmax(scores))


def label_entropy(probs: np.ndarray) -> np.ndarray:
    """Per-voxel entropy -sum p log p of a (K, ...) probability stack."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=0)


def displacement_entropy(cov: np.ndarray, spacing) -> np.ndarray:
    """Gaussian differential entropy 0.5 log((2 pi e)^D det C) per voxel.

    ``cov`` is (D, D, ...) in voxel units; spacing converts to mm^2 and the
    determinant is floored so degenerate (zero-spread) voxels stay finite.
    """
    d = cov.shape[0]
    s = np.asarray(spacing, dtype=np.float64)
    tail = (1,) * (cov.ndim - 2)
    scaled = cov * s.reshape((d, 1) + tail) * s.reshape((1, d) + tail)
    mats = np.moveaxis(scaled.reshape(d, d, -1), -1, 0)
    det = np.maximum(np.linalg.det(mats), DET_FLOOR)
    ent = 0.5 * (d * np.log(2.0 * np.pi * np.e) + np.log(det))
    return ent.reshape(cov.shape[2:])


def dilate_mask(mask: np.ndarray, radius: int = 3) -> np.ndarray:
    """Binary dilation with the full-cube (26-neighbourhood) structure."""
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    structure = np.ones((3,) * mask.ndim, dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure, iterations=radius)


def ece(probs: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None, bins: int = 10) -> float:
    """Binary expected calibration error.

    ``probs`` is the predicted probability of the event, ``truth`` its 0/1
    outcome.  Confidences are grouped into equal-width bins on [0, 1]; empty
    bins are skipped.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        p, y = p[m], y[m]
    if p.size == 0:
        return 0.0
    idx = np.clip((p * bins).astype(np.int64), 0, bins - 1)
    total = p.size
    err = 0.0
    for b in range(bins):
        sel = idx == b
        n_b = int(sel.sum())
        if n_b == 0:
            continue
        conf = p[sel].mean()
        acc = y[sel].mean()
        err += (n_b / total) * abs(acc - conf)
    return float(err)


def sparsification_curve(uncertainty: np.ndarray, errors: np.ndarray) -> np.ndarray:
    """Mean error of the kept voxels as the most-uncertain are removed.

    Fractions removed run 0.00 to 0.95 in steps of 0.05; ties in the
    uncertainty break by voxel index (stable sort).
    """
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    e = np.asarray(errors, dtype=np.float64).ravel()
    order = np.argsort(u, kind="stable")
    e_sorted = e[order]
    csum = np.concatenate([[0.0], np.cumsum(e_sorted)])
    n = e.size
    out = np.empty(AUSE_FRACTIONS.size)
    for i, f in enumerate(AUSE_FRACTIONS):
        keep = max(1, int(np.ceil((1.0 - f) * n)))
        out[i] = csum[keep] / keep
    return out


def ause(uncertainty: np.ndarray, errors: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Area between the uncertainty-ordered and error-ordered (oracle)
    sparsification curves, averaged over the removal fractions."""
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    e = np.asarray(errors, dtype=np.float64).ravel()
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        u, e = u[m], e[m]
    if u.size == 0:
        return 0.0
    curve = sparsification_curve(u, e)
    oracle = sparsification_curve(e, e)
    return float(np.mean(curve - oracle))


def _rankdata(x: np.ndarray) -> np.ndarray:
    """Average ranks with ties."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks on ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.size < 2:
        raise ValidationError("spearman needs two equal-length sequences of size >= 2")
    rx = _rankdata(xs)
    ry = _rankdata(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0.0:
        return float("nan")
    return float(np.sum(rx * ry) / denom)


# ----- multi-modality -------------------------------------------------------


@dataclass
class ModesResult:
    assignments: np.ndarray
    representatives: list[int]
    explained_variance: np.ndarray
    coords: np.ndarray


def _kmeans(points: np.ndarray, k: int, n_restarts: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    best_inertia = np.inf
    best = None
    n = points.shape[0]
    for restart in range(n_restarts):
        rng = stream_rng(seed, "kmeans", restart)
        centers = points[rng.choice(n, size=k, replace=False)].copy()
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(100):
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_assign = d2.argmin(axis=1)
            for c in range(k):
                sel = new_assign == c
                if sel.any():
                    centers[c] = points[sel].mean(axis=0)
            if np.array_equal(new_assign, assign):
                break
            assign = new_assign
        inertia = float(((points - centers[assign]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia = inertia
            best = (assign.copy(), centers.copy())
    return best


def analyze_modes(
    samples: list[DisplacementField],
    n_clusters: int = 2,
    var_threshold: float = 0.95,
    max_components: int = 10,
    n_restarts: int = 20,
    seed: int = 0,
) -> ModesResult:
    """PCA (via the Gram matrix of the sample deformations) plus k-means.

    Keeps the leading components covering ``var_threshold`` of the variance
    (capped), clusters the scores, and reports the sample nearest to each
    cluster mean as that mode's representative.
    """
    k = len(samples)
    if k < n_clusters:
        raise ValidationError(f"need at least {n_clusters} samples, got {k}")
    x = np.stack([s.components.ravel() for s in samples])
    xc = x - x.mean(axis=0)
    gram = xc @ xc.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0.0:
        # all samples identical; a single zero coordinate
        coords = np.zeros((k, 1))
        explained = np.ones(1)
    else:
        ratio = evals / total
        n_comp = int(np.searchsorted(np.cumsum(ratio), var_threshold) + 1)
        n_comp = min(max(n_comp, 1), max_components, k)
        coords = evecs[:, :n_comp] * np.sqrt(evals[:n_comp])
        explained = ratio[:n_comp]
    assign, centers = _kmeans(coords, n_clusters, n_restarts, seed)
    reps = []
    for c in range(n_clusters):
        d2 = ((coords - centers[c]) ** 2).sum(axis=1)
        sel = assign == c
        if not sel.any():
            reps.append(int(d2.argmin()))
            continue
        idx = np.flatnonzero(sel)
        reps.append(int(idx[d2[idx].argmin()]))
    return ModesResult(
        assignments=assign, representatives=reps, explained_variance=explained, coords=coords
    )


# ----- posterior characterisation -------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    ece_bins: int = 10
    dilate_radius: int = 3
    n_clusters: int = 2
    pca_var_threshold: float = 0.95
    pca_max_components: int = 10
    kmeans_restarts: int = 20


@dataclass
class PosteriorCharacterization:
    """Resampled posterior summary for one image pair."""

    fields: list[DisplacementField]
    weights: np.ndarray
    resampled_indices: np.ndarray
    log_alpha: np.ndarray
    label_ids: list[int]
    label_probs: np.ndarray  # (K,) + shape
    disp_cov: np.ndarray  # (D, D) + shape
    label_entropy_map: np.ndarray
    disp_entropy_map: np.ndarray
    mean_field: DisplacementField
    oracle_index: int
    nan_count: int = 0


@dataclass
class CalibrationRow:
    """One CSV row of the per-structure report."""

    structure: int
    dsc_mu: float
    dsc_zbar: float
    dsc_oracle: float
    fold_mu: float
    fold_zbar: float
    fold_oracle: float
    ece: float
    ause_label: float
    ause_disp: float
    label_entropy: float
    disp_entropy: float
    spearman_r: float = float("nan")

    FIELDS = (
        "structure",
        "dsc_mu",
        "dsc_zbar",
        "dsc_oracle",
        "fold_mu",
        "fold_zbar",
        "fold_oracle",
        "ece",
        "ause_label",
        "ause_disp",
        "label_entropy",
        "disp_entropy",
        "spearman_r",
    )

    def astuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def characterize(
    q: StructuredGaussian,
    fixed: Volume,
    moving: Volume,
    labels_fixed: Volume,
    labels_moving: Volume,
    energy_cfg: EnergyConfig,
    n_l: int = 1200,
    n_k: int = 80,
    seed: int = 0,
    temperature: TemperatureState | None = None,
    eval_cfg: EvalConfig = EvalConfig(),
) -> tuple[PosteriorCharacterization, list[CalibrationRow]]:
    """Weight, resample and summarise the posterior for one pair.

    The tempering scale is frozen during this pass (the state observed at
    training time is reused); a fresh state initialises itself from this
    single batch.
    """
    target = RegistrationTarget(fixed, moving, energy_cfg)
    if temperature is None:
        temperature = TemperatureState()
    update = not temperature.initialized
    ensemble = weighting_pass(q, target, n_l, seed, temperature, update_temperature=update)
    rng = stream_rng(seed, "characterize-resample")
    indices = resample_ensemble(ensemble, n_k, rng)

    cache: dict[int, DisplacementField] = {}
    fields = []
    for idx in indices:
        i = int(idx)
        if i not in cache:
            cache[i] = q.sample(ensemble.noise[i])
        fields.append(cache[i])

    label_ids = _label_ids(labels_fixed, labels_moving)
    shape = fixed.grid.shape
    probs = np.zeros((len(label_ids),) + shape)
    id_to_chan = {l: i for i, l in enumerate(label_ids)}
    d = fixed.grid.ndim
    stack = np.empty((n_k, d) + shape)
    for s_i, z in enumerate(fields):
        warped = warp_labels(labels_moving, z)
        for l, chan in id_to_chan.items():
            probs[chan] += warped.values == l
        stack[s_i] = z.components
    probs /= n_k

    mean_comp = stack.mean(axis=0)
    centered = stack - mean_comp[None]
    ddof = 1 if n_k > 1 else 0
    cov = np.einsum("sa...,sb...->ab...", centered, centered) / max(n_k - ddof, 1)

    char = PosteriorCharacterization(
        fields=fields,
        weights=ensemble.weights,
        resampled_indices=indices,
        log_alpha=ensemble.log_alpha,
        label_ids=label_ids,
        label_probs=probs,
        disp_cov=cov,
        label_entropy_map=label_entropy(probs),
        disp_entropy_map=displacement_entropy(cov, fixed.grid.spacing),
        mean_field=DisplacementField(fixed.grid, mean_comp),
        oracle_index=oracle_select(fields, labels_fixed, labels_moving),
        nan_count=ensemble.nan_count,
    )
    rows = build_report(char, q, labels_fixed, labels_moving, eval_cfg)
    return char, rows


def build_report(
    char: PosteriorCharacterization,
    q: StructuredGaussian,
    labels_fixed: Volume,
    labels_moving: Volume,
    eval_cfg: EvalConfig = EvalConfig(),
) -> list[CalibrationRow]:
    """Per-structure metric rows.

    The Spearman column correlates entropy and Dice across pairs, so it is
    left NaN here and filled by :func:`spearman_across` once several pairs
    have been characterised.
    """
    structures = [l for l in char.label_ids if l != 0]
    mu_field = q.mean
    zbar = char.mean_field
    oracle = char.fields[char.oracle_index]
    warped_mu = warp_labels(labels_moving, mu_field)
    warped_zbar = warp_labels(labels_moving, zbar)
    warped_oracle = warp_labels(labels_moving, oracle)
    fold_mu = jacobian_fold_fraction(mu_field)
    fold_zbar = jacobian_fold_fraction(zbar)
    fold_oracle = jacobian_fold_fraction(oracle)
    pred_label = np.asarray(char.label_ids)[np.argmax(char.label_probs, axis=0)]
    err = (pred_label != labels_fixed.values).astype(np.float64)

    rows = []
    for s in structures:
        chan = char.label_ids.index(s)
        mask = dilate_mask(labels_fixed.values == s, eval_cfg.dilate_radius)
        rows.append(
            CalibrationRow(
                structure=s,
                dsc_mu=dice(warped_mu, labels_fixed, s),
                dsc_zbar=dice(warped_zbar, labels_fixed, s),
                dsc_oracle=dice(warped_oracle, labels_fixed, s),
                fold_mu=fold_mu,
                fold_zbar=fold_zbar,
                fold_oracle=fold_oracle,
                ece=ece(
                    char.label_probs[chan],
                    labels_fixed.values == s,
                    mask,
                    eval_cfg.ece_bins,
                ),
                ause_label=ause(char.label_entropy_map, err, mask),
                ause_disp=ause(char.disp_entropy_map, err, mask),
                label_entropy=float(char.label_entropy_map[mask].mean()) if mask.any() else 0.0,
                disp_entropy=float(char.disp_entropy_map[mask].mean()) if mask.any() else 0.0,
            )
        )
    return rows


def spearman_across(reports: list[list[CalibrationRow]]) -> dict[int, float]:
    """Per-structure Spearman correlation of label entropy and Dice across
    several characterised pairs (at least two)."""
    by_structure: dict[int, list[tuple[float, float]]] = {}
    for rows in reports:
        for row in rows:
            by_structure.setdefault(row.structure, []).append(
                (row.label_entropy, row.dsc_zbar)
            )
    out = {}
    for s, pairs in by_structure.items():
        if len(pairs) < 2:
            out[s] = float("nan")
            continue
        xs, ys = zip(*pairs)
        out[s] = spearman(xs, ys)
    return out
