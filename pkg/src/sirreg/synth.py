"""Synthetic registration pairs with known ground truth.

Two generators:

* ``smooth``: a moving image of random Gaussian blobs over a smooth
  background, a smooth fold-free ground-truth displacement built from a few
  vector-valued radial bumps (max magnitude <= 4 voxels), and the fixed image
  produced by warping the moving image with that field.  Blob support masks
  (half peak) provide per-structure labels.

* ``bimodal``: the fixed image holds one blob at the grid centre while the
  moving image holds two identical blobs placed symmetrically at +-offset
  along x.  Either blob can be pulled onto the fixed blob by a smooth bump
  field; the two constructed fields are exact mirror images, so both
  alignments carry the same prior cost and the correspondence posterior is
  two-moded by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy import ndimage

from .errors import ValidationError
from .grids import (
    DisplacementField,
    Grid,
    Volume,
    jacobian_fold_fraction,
    warp_intensity,
    warp_labels,
)
from .rng import stream_rng

MIN_DIM = 16
MAX_DISPLACEMENT = 4.0


@dataclass
class SynthPair:
    fixed: Volume
    moving: Volume
    z_true: DisplacementField
    labels_fixed: Volume
    labels_moving: Volume
    kind: str
    modes: tuple[DisplacementField, DisplacementField] | None = None


def _coords(grid: Grid) -> list[np.ndarray]:
    idx = np.indices(grid.shape, dtype=np.float64)
    return [idx[grid.ndim - 1 - c] for c in range(grid.ndim)]


def _gaussian_blob(grid: Grid, center, radius: float) -> np.ndarray:
    coords = _coords(grid)
    r2 = np.zeros(grid.shape)
    for c, coord in enumerate(coords):
        r2 += (coord - center[c]) ** 2
    return np.exp(-0.5 * r2 / radius**2)


def synth_pair(kind: str, dims, seed: int = 0, spacing=None) -> SynthPair:
    dims = tuple(int(d) for d in dims)
    if any(d < MIN_DIM for d in dims):
        raise ValidationError(f"synthetic dims must be >= {MIN_DIM} per axis, got {dims}")
    grid = Grid(dims, spacing)
    if kind == "smooth":
        return _synth_smooth(grid, seed)
    if kind == "bimodal":
        return _synth_bimodal(grid, seed)
    raise ValidationError(f"unknown synthetic kind {kind!r}")


def _synth_smooth(grid: Grid, seed: int) -> SynthPair:
    rng = stream_rng(seed, "synth-smooth")
    d = grid.ndim
    scale = min(grid.dims)

    # smooth background plus band-limited texture; the texture decorrelates
    # under voxel-scale shifts, which is what makes alignment identifiable
    background = np.zeros(grid.shape)
    for _ in range(3):
        center = [rng.uniform(0.0, n - 1.0) for n in grid.dims]
        background += rng.uniform(-0.25, 0.25) * _gaussian_blob(grid, center, rng.uniform(0.5, 0.9) * scale)
    texture = ndimage.gaussian_filter(rng.normal(size=grid.shape), sigma=1.5)
    texture *= 0.35 / max(texture.std(), 1e-12)
    background = background + texture
    background -= background.min()

    # non-overlapping blobs; each becomes one labelled structure
    n_blobs = int(rng.integers(4, 9))
    centers: list[np.ndarray] = []
    radii: list[float] = []
    attempts = 0
    while len(centers) < n_blobs and attempts < 500:
        attempts += 1
        radius = rng.uniform(0.09, 0.16) * scale
        center = np.array([rng.uniform(0.22 * n, 0.78 * n) for n in grid.dims])
        if all(np.linalg.norm(center - c) > 1.35 * (radius + r) for c, r in zip(centers, radii)):
            centers.append(center)
            radii.append(radius)
    moving_vals = background.copy()
    labels = np.zeros(grid.shape, dtype=np.int64)
    for i, (center, radius) in enumerate(zip(centers, radii)):
        amp = rng.uniform(0.6, 1.0)
        blob = _gaussian_blob(grid, center, radius)
        moving_vals += amp * blob
        labels[blob >= 0.5] = i + 1
    moving = Volume(grid, moving_vals, "intensity")
    labels_moving = Volume(grid, labels, "label")

    # ground-truth field: few radial bumps, rescaled until fold-free
    comp = np.zeros((d,) + grid.shape)
    for _ in range(3):
        center = [rng.uniform(0.25 * n, 0.75 * n) for n in grid.dims]
        width = rng.uniform(0.25, 0.4) * scale
        direction = rng.normal(size=d)
        direction *= rng.uniform(0.5, 1.0) * MAX_DISPLACEMENT / np.linalg.norm(direction)
        envelope = _gaussian_blob(grid, center, width)
        for c in range(d):
            comp[c] += direction[c] * envelope
    norms = np.sqrt((comp**2).sum(axis=0))
    peak = norms.max()
    if peak > MAX_DISPLACEMENT:
        comp *= MAX_DISPLACEMENT / peak
    z_true = DisplacementField(grid, comp)
    for _ in range(20):
        if jacobian_fold_fraction(z_true) == 0.0:
            break
        comp = comp * 0.8
        z_true = DisplacementField(grid, comp)
    else:
        raise ValidationError("could not build a fold-free ground-truth field")

    fixed = warp_intensity(moving, z_true)
    labels_fixed = warp_labels(labels_moving, z_true)
    return SynthPair(fixed, moving, z_true, labels_fixed, labels_moving, "smooth")


def _synth_bimodal(grid: Grid, seed: int) -> SynthPair:
    rng = stream_rng(seed, "synth-bimodal")
    d = grid.ndim
    nx = grid.dims[0]
    center = np.array([(n - 1) / 2.0 for n in grid.dims])
    offset = 0.20 * nx
    blob_radius = 0.13 * nx
    envelope_width = 0.22 * nx

    center_a = center.copy()
    center_a[0] -= offset
    center_b = center.copy()
    center_b[0] += offset

    # independent speckle keeps windows non-degenerate without rewarding any
    # particular alignment; mirror-symmetrising it along x keeps the two
    # constructed alignments exactly balanced
    def _sym_speckle() -> np.ndarray:
        s = rng.normal(size=grid.shape)
        return 0.02 * (s + s[..., ::-1]) / np.sqrt(2.0)

    fixed_vals = _gaussian_blob(grid, center, blob_radius) + _sym_speckle()
    blob_a = _gaussian_blob(grid, center_a, blob_radius)
    blob_b = _gaussian_blob(grid, center_b, blob_radius)
    moving_vals = blob_a + blob_b + _sym_speckle()
    fixed = Volume(grid, fixed_vals, "intensity")
    moving = Volume(grid, moving_vals, "intensity")

    labels_fixed = Volume(grid, (_gaussian_blob(grid, center, blob_radius) >= 0.5).astype(np.int64), "label")
    labels_moving = Volume(grid, ((blob_a >= 0.5) | (blob_b >= 0.5)).astype(np.int64), "label")

    envelope = _gaussian_blob(grid, center, envelope_width)
    comp_a = np.zeros((d,) + grid.shape)
    comp_a[0] = offset * envelope  # pulls blob B (at +offset) onto the centre
    comp_b = np.zeros((d,) + grid.shape)
    comp_b[0] = -offset * envelope  # pulls blob A
    mode_a = DisplacementField(grid, comp_a)
    mode_b = DisplacementField(grid, comp_b)

    return SynthPair(
        fixed=fixed,
        moving=moving,
        z_true=mode_a,
        labels_fixed=labels_fixed,
        labels_moving=labels_moving,
        kind="bimodal",
        modes=(mode_a, mode_b),
    )
