"""Checkpoints, CSV reports and PGM slice export."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .fitting import FitTrace
from .gaussian import CholeskyFactor, LowRankFactor, StructuredGaussian
from .grids import Grid, field_from_vector
from .metrics import CalibrationRow
from .pattern import build_pattern

_FLOAT_FMT = "%.12g"


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if np.isnan(v):
        return "nan"
    return _FLOAT_FMT % v


def write_csv(path, columns, rows) -> None:
    """Deterministically formatted CSV (fixed float precision, '\\n' endings)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def write_trace_csv(path, trace: FitTrace) -> None:
    write_csv(path, FitTrace.COLUMNS, trace.rows())


def write_report_csv(path, rows: list[CalibrationRow]) -> None:
    write_csv(path, CalibrationRow.FIELDS, [r.astuple() for r in rows])


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM, min-max normalised."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError("PGM export needs a 2D array")
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.round((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# ----- checkpoints -----------------------------------------------------------


def save_checkpoint(path, q: StructuredGaussian, sigma_alpha: float, extra: dict | None = None):
    """Parameters plus the pattern recipe and final tempering scale (.npz)."""
    pat = q.chol.pattern
    meta = {
        "dims": list(q.grid.dims),
        "spacing": list(q.grid.spacing),
        "kernel_radius": pat.kernel_radius,
        "cross_channel": pat.cross_channel,
        "rank": q.rank,
        "sigma_alpha": float(sigma_alpha) if sigma_alpha == sigma_alpha else None,
    }
    if extra:
        meta.update(extra)
    np.savez(
        path,
        mu=q.mu_vec,
        raw_diag=q.chol.raw_diag,
        off_diag=q.chol.off_diag,
        lowrank=q.lowrank.columns,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
    )


def load_checkpoint(path) -> tuple[StructuredGaussian, dict]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        try:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            mu = data["mu"]
            raw_diag = data["raw_diag"]
            off_diag = data["off_diag"]
            lowrank = data["lowrank"]
        except KeyError as exc:
            raise ValidationError(f"checkpoint {path} is missing array {exc}") from exc
    grid = Grid(tuple(meta["dims"]), tuple(meta["spacing"]))
    pattern = build_pattern(
        grid, channels=grid.ndim,
        kernel_radius=int(meta["kernel_radius"]),
        cross_channel=bool(meta["cross_channel"]),
    )
    q = StructuredGaussian(
        field_from_vector(grid, mu),
        CholeskyFactor(pattern, raw_diag, off_diag),
        LowRankFactor(lowrank),
    )
    return q, meta
