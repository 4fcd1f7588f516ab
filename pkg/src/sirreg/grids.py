"""Regular voxel grids, volumes, displacement fields, and their operators.

Conventions used everywhere in the package:

* ``Grid.dims`` lists extents as ``(nx, ny)`` or ``(nx, ny, nz)``.  Arrays are
  stored C-contiguous with the x axis fastest, i.e. ``values[z, y, x]``, so a
  raveled volume has linear index ``(z * ny + y) * nx + x``.
* Displacements are in voxel units.  ``components[c]`` holds the displacement
  along spatial axis ``c`` where ``c = 0`` is x.  Physical spacing enters only
  when a metric is reported in millimetres.
* The parameter vector of a field interleaves channels per voxel:
  ``vec[v * D + c]`` with ``v`` the linear voxel index.  The sparse-precision
  machinery depends on this ordering.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError, ValidationError


@dataclass(frozen=True)
class Grid:
    """A regular 2D or 3D voxel lattice with physical spacing in mm."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise ValidationError(f"grid must be 2D or 3D, got dims={dims}")
        if any(d < 2 for d in dims):
            raise ValidationError(f"all grid dims must be >= 2, got {dims}")
        spacing = self.spacing
        if spacing is None:
            spacing = (1.0,) * len(dims)
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != len(dims):
            raise ValidationError("spacing must have one entry per axis")
        if any(s <= 0 for s in spacing):
            raise ValidationError(f"spacings must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def shape(self) -> tuple[int, ...]:
        """Numpy array shape: axes reversed so x is the fastest (last) axis."""
        return self.dims[::-1]


class Volume:
    """Scalar field on a grid: real intensities or non-negative integer labels."""

    def __init__(self, grid: Grid, values: np.ndarray, kind: str = "intensity"):
        if kind not in ("intensity", "label"):
            raise ValidationError(f"unknown volume kind {kind!r}")
        values = np.asarray(values)
        if values.shape != grid.shape:
            raise ValidationError(
                f"values shape {values.shape} does not match grid shape {grid.shape}"
            )
        if kind == "label":
            if not np.issubdtype(values.dtype, np.integer):
                rounded = np.rint(values)
                if not np.array_equal(rounded, values):
                    raise ValidationError("label volume must contain integers")
                values = rounded
            values = np.ascontiguousarray(values, dtype=np.int64)
            if values.min(initial=0) < 0:
                raise ValidationError("label values must be non-negative")
        else:
            values = np.ascontiguousarray(values, dtype=np.float64)
        self.grid = grid
        self.values = values
        self.kind = kind

    def __repr__(self):
        return f"Volume(kind={self.kind!r}, dims={self.grid.dims})"


class DisplacementField:
    """Dense per-voxel displacement with one channel per spatial axis."""

    def __init__(self, grid: Grid, components: np.ndarray, validate: bool = True):
        components = np.ascontiguousarray(components, dtype=np.float64)
        expected = (grid.ndim,) + grid.shape
        if components.shape != expected:
            raise ValidationError(
                f"components shape {components.shape} does not match {expected}"
            )
        if validate and not np.all(np.isfinite(components)):
            raise ValidationError("displacement field contains non-finite values")
        self.grid = grid
        self.components = components

    @classmethod
    def zeros(cls, grid: Grid) -> "DisplacementField":
        return cls(grid, np.zeros((grid.ndim,) + grid.shape), validate=False)

    def copy(self) -> "DisplacementField":
        return DisplacementField(self.grid, self.components.copy(), validate=False)

    def __repr__(self):
        return f"DisplacementField(dims={self.grid.dims})"


def vectorize_field(field: DisplacementField) -> np.ndarray:
    """Flatten to the canonical parameter ordering ``vec[v * D + c]``."""
    d = field.grid.ndim
    return np.ascontiguousarray(field.components.reshape(d, -1).T).ravel()


def field_from_vector(grid: Grid, vec: np.ndarray, validate: bool = False) -> DisplacementField:
    """Inverse of :func:`vectorize_field`."""
    d = grid.ndim
    comp = np.ascontiguousarray(vec.reshape(grid.n_voxels, d).T).reshape((d,) + grid.shape)
    return DisplacementField(grid, comp, validate=validate)


def _require_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError(f"grids differ: {a.grid.dims} vs {b.grid.dims}")


def _sample_positions(field: DisplacementField) -> list[np.ndarray]:
    """Per-axis sample positions x + z(x), ordered x, y[, z]."""
    idx = np.indices(field.grid.shape, dtype=np.float64)
    d = field.grid.ndim
    # numpy axis for spatial axis c is (ndim - 1 - c)
    return [idx[d - 1 - c] + field.components[c] for c in range(d)]


def _interp_setup(grid: Grid, positions: list[np.ndarray]):
    """Clamped integer base indices, fractional offsets and clamp masks."""
    i0s, fracs, masks = [], [], []
    for c, pos in enumerate(positions):
        n = grid.dims[c]
        clamped = np.clip(pos, 0.0, n - 1.0)
        i0 = np.minimum(clamped.astype(np.int64), n - 2)
        i0s.append(i0)
        fracs.append(clamped - i0)
        masks.append((pos >= 0.0) & (pos <= n - 1.0))
    return i0s, fracs, masks


def _flat_index(grid: Grid, axis_indices: list[np.ndarray]) -> np.ndarray:
    """Linear index from per-axis indices ordered x, y[, z]."""
    out = axis_indices[-1]
    for c in range(grid.ndim - 2, -1, -1):
        out = out * grid.dims[c] + axis_indices[c]
    return out


def warp_intensity(moving: Volume, field: DisplacementField) -> Volume:
    """Resample ``moving`` at x + z(x) with (bi/tri)linear interpolation.

    Out-of-bounds sample positions clamp to the boundary voxel, so the result
    is defined everywhere and warping by the zero field is an exact identity.
    """
    _require_same_grid(moving, field)
    if moving.kind != "intensity":
        raise ValidationError("warp_intensity requires an intensity volume")
    d = field.grid.ndim
    i0s, fracs, _ = _interp_setup(field.grid, _sample_positions(field))
    flat = moving.values.ravel()
    out = np.zeros(field.grid.shape)
    for corner in itertools.product((0, 1), repeat=d):
        idx = _flat_index(field.grid, [i0s[c] + corner[c] for c in range(d)])
        w = np.ones(field.grid.shape)
        for c in range(d):
            w = w * (fracs[c] if corner[c] else 1.0 - fracs[c])
        out += w * flat[idx]
    return Volume(field.grid, out, "intensity")


def warp_labels(moving: Volume, field: DisplacementField) -> Volume:
    """Nearest-neighbour label propagation; rounding ties go to the lower index."""
    _require_same_grid(moving, field)
    if moving.kind != "label":
        raise ValidationError("warp_labels requires a label volume")
    d = field.grid.ndim
    nearest = []
    for c, pos in enumerate(_sample_positions(field)):
        n = field.grid.dims[c]
        clamped = np.clip(pos, 0.0, n - 1.0)
        nearest.append(np.ceil(clamped - 0.5).astype(np.int64))
    idx = _flat_index(field.grid, nearest)
    return Volume(field.grid, moving.values.ravel()[idx], "label")


def warp_gradient(
    moving: Volume, field: DisplacementField, upstream: np.ndarray
) -> np.ndarray:
    """Backpropagate a per-voxel sensitivity through the warp.

    Returns d(sum_x upstream(x) * warped(x)) / dz as a ``(D,) + shape`` array.
    The interpolation is differentiated at the clamped sample position; the
    derivative is zero across a clamp boundary.
    """
    _require_same_grid(moving, field)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != field.grid.shape:
        raise ValidationError("upstream must be volume-shaped")
    d = field.grid.ndim
    i0s, fracs, masks = _interp_setup(field.grid, _sample_positions(field))
    flat = moving.values.ravel()
    out = np.zeros((d,) + field.grid.shape)
    for corner in itertools.product((0, 1), repeat=d):
        idx = _flat_index(field.grid, [i0s[c] + corner[c] for c in range(d)])
        vals = flat[idx]
        for a in range(d):
            w = np.ones(field.grid.shape)
            for c in range(d):
                if c == a:
                    continue
                w = w * (fracs[c] if corner[c] else 1.0 - fracs[c])
            sign = 1.0 if corner[a] else -1.0
            out[a] += sign * w * vals
    for a in range(d):
        out[a] *= masks[a]
        out[a] *= upstream
    return out


def spatial_forward_diff(field: DisplacementField) -> np.ndarray:
    """Forward differences z(x + e_a) - z(x) per channel and axis.

    Shape ``(D_channels, D_axes) + grid.shape``; the final slice along each
    axis is zero (no wraparound).
    """
    d = field.grid.ndim
    out = np.zeros((d, d) + field.grid.shape)
    for c in range(d):
        comp = field.components[c]
        for a in range(d):
            ax = field.grid.ndim - 1 - a
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[ax] = slice(None, -1)
            hi[ax] = slice(1, None)
            out[c, a][tuple(lo)] = comp[tuple(hi)] - comp[tuple(lo)]
    return out


def forward_diff_adjoint(grid: Grid, diffs: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`spatial_forward_diff`: maps a (D, D, ...) tensor back
    to a (D, ...) field-shaped array.  The structurally-zero last slice of each
    axis is ignored."""
    d = grid.ndim
    out = np.zeros((d,) + grid.shape)
    for c in range(d):
        for a in range(d):
            ax = d - 1 - a
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[ax] = slice(None, -1)
            hi[ax] = slice(1, None)
            t = diffs[c, a][tuple(lo)]
            out[c][tuple(hi)] += t
            out[c][tuple(lo)] -= t
    return out


def _det_stack(j: np.ndarray) -> np.ndarray:
    """Determinant of a stack of small square matrices, shape (D, D, ...)."""
    if j.shape[0] == 2:
        return j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0]
    return (
        j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
        - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
        + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0])
    )


def jacobian_fold_fraction(field: DisplacementField) -> float:
    """Fraction of voxels where det(d(x + z)/dx) <= 0.

    Derivatives use central differences in the interior and one-sided stencils
    at the boundary, in voxel units.
    """
    d = field.grid.ndim
    jac = np.zeros((d, d) + field.grid.shape)
    for a in range(d):
        for b in range(d):
            jac[a, b] = np.gradient(field.components[a], axis=d - 1 - b)
            if a == b:
                jac[a, b] += 1.0
    det = _det_stack(jac)
    return float(np.count_nonzero(det <= 0.0) / field.grid.n_voxels)
