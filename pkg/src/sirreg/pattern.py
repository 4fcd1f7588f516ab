"""Sparsity pattern of the lower-triangular precision factor.

The factor couples each (voxel, channel) unknown to the unknowns of every
voxel inside a cube-shaped stencil, optionally across channels.  Unknowns are
ordered voxel-lexicographically (x fastest) with channels consecutive inside a
voxel, so index = voxel * D + channel.  Only the lower half of each symmetric
stencil pair is stored, which together with the per-voxel diagonal makes the
stored matrix lower triangular.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ValidationError
from .grids import Grid


class SparsityPattern:
    """Fixed (row, col) support of the sparse Cholesky factor.

    Entries are kept in CSR order (sorted by row, then column).  Each row ends
    with its diagonal; the transposed CSR view (used for back-substitution and
    for products with the transpose) starts each row with its diagonal.
    """

    def __init__(self, dims, channels, kernel_radius=1, cross_channel=True):
        dims = tuple(int(x) for x in dims)
        if any(d < 1 for d in dims):
            raise ValidationError(f"pattern dims must be positive, got {dims}")
        if channels < 1:
            raise ValidationError("channels must be >= 1")
        if kernel_radius < 0:
            raise ValidationError("kernel_radius must be >= 0")
        self.dims = dims
        self.channels = int(channels)
        self.kernel_radius = int(kernel_radius)
        self.cross_channel = bool(cross_channel)

        rows, cols = _build_entries(dims, self.channels, self.kernel_radius, self.cross_channel)
        order = np.lexsort((cols, rows))
        self.rows = np.ascontiguousarray(rows[order])
        self.cols = np.ascontiguousarray(cols[order])

        n = int(np.prod(dims)) * self.channels
        self.n = n
        self.nnz = int(self.rows.size)
        counts = np.bincount(self.rows, minlength=n)
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])

        self.diag_pos = np.flatnonzero(self.rows == self.cols)
        self.off_pos = np.flatnonzero(self.rows != self.cols)
        self.n_off = int(self.off_pos.size)
        if self.diag_pos.size != n:
            raise AssertionError("every diagonal entry must be present")
        # diagonal is the last entry of each CSR row (col <= row)
        if not np.array_equal(self.diag_pos, self.indptr[1:] - 1):
            raise AssertionError("diagonal must close each CSR row")

        # CSR view of the transpose: sort entries by (col, row)
        self.t_perm = np.lexsort((self.rows, self.cols))
        self.t_indices = np.ascontiguousarray(self.rows[self.t_perm])
        t_counts = np.bincount(self.cols, minlength=n)
        self.t_indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(t_counts, out=self.t_indptr[1:])
        # diagonal opens each row of the transpose (row >= col)
        t_rows = self.cols[self.t_perm]
        if not np.array_equal(
            np.flatnonzero(t_rows == self.t_indices), self.t_indptr[:-1]
        ):
            raise AssertionError("diagonal must open each transposed CSR row")

    def entry_pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def to_dense_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        mask[self.rows, self.cols] = True
        return mask

    def __repr__(self):
        return (
            f"SparsityPattern(dims={self.dims}, channels={self.channels}, "
            f"radius={self.kernel_radius}, cross={self.cross_channel}, nnz={self.nnz})"
        )


def build_pattern(grid, channels, kernel_radius=1, cross_channel=True) -> SparsityPattern:
    """Construct the stencil pattern for a grid (or a raw dims tuple)."""
    dims = grid.dims if isinstance(grid, Grid) else tuple(grid)
    return SparsityPattern(dims, channels, kernel_radius, cross_channel)


def _build_entries(dims, channels, radius, cross_channel):
    ndim = len(dims)
    shape = dims[::-1]
    n_vox = int(np.prod(dims))
    vox = np.arange(n_vox, dtype=np.int64).reshape(shape)
    d = channels

    row_parts: list[np.ndarray] = []
    col_parts: list[np.ndarray] = []

    # strictly lower neighbour voxels: offsets (dx, dy, dz) with the reversed
    # tuple (dz, dy, dx) lexicographically negative, matching the voxel order
    for off in itertools.product(range(-radius, radius + 1), repeat=ndim):
        key = off[::-1]
        if key >= (0,) * ndim:
            continue
        v_sl, u_sl = [], []
        ok = True
        for ax in range(ndim):
            o = off[::-1][ax]  # offset along numpy axis ax
            n_ax = shape[ax]
            lo = max(0, -o)
            hi = n_ax - max(0, o)
            if hi <= lo:
                ok = False
                break
            v_sl.append(slice(lo, hi))
            u_sl.append(slice(lo + o, hi + o))
        if not ok:
            continue
        vb = vox[tuple(v_sl)].ravel()
        ub = vox[tuple(u_sl)].ravel()
        pairs = itertools.product(range(d), range(d)) if cross_channel else ((c, c) for c in range(d))
        for c, cc in pairs:
            row_parts.append(vb * d + c)
            col_parts.append(ub * d + cc)

    # same-voxel strictly-lower channel pairs
    if cross_channel and d > 1:
        base = np.arange(n_vox, dtype=np.int64) * d
        for c in range(d):
            for cc in range(c):
                row_parts.append(base + c)
                col_parts.append(base + cc)

    diag = np.arange(n_vox * d, dtype=np.int64)
    row_parts.append(diag)
    col_parts.append(diag)

    return np.concatenate(row_parts), np.concatenate(col_parts)
