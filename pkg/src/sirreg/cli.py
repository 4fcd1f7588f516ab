"""Command-line pipeline: synth -> fit -> sample/metrics/modes, plus slice
export and the gradient self-check.

Every command that writes into an output directory also echoes the fully
resolved configuration (config.json), so re-running from that file reproduces
the outputs bit for bit.  Exit codes: 0 success, 1 invalid input or config,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .errors import ValidationError
from .fitting import FitConfig, check_gradients, fit, loss_problem
from .grids import Volume, jacobian_fold_fraction
from .metrics import analyze_modes, characterize, spearman_across
from .reports import (
    load_checkpoint,
    save_checkpoint,
    write_csv,
    write_pgm,
    write_report_csv,
    write_trace_csv,
)
from .sir import TemperatureState
from .svol import VolumeContainer, read_svol, write_svol
from .synth import synth_pair


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=int(args.seed))
    if getattr(args, "mode", None):
        cfg = dataclasses.replace(cfg, fit=dataclasses.replace(cfg.fit, mode=args.mode))
    if getattr(args, "variant", None):
        cfg = dataclasses.replace(cfg, fit=dataclasses.replace(cfg.fit, variant=args.variant))
    return cfg


def _read_volume(path) -> Volume:
    return read_svol(path).to_volume()


def _pair_paths(pair_dir):
    pair = Path(pair_dir)
    if not pair.is_dir():
        raise ValidationError(f"pair directory not found: {pair}")
    return pair


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    dims = tuple(int(d) for d in args.dims.split(","))
    pair = synth_pair(args.kind, dims, seed=cfg.seed)
    write_svol(out / "fixed.svol", VolumeContainer.from_volume(pair.fixed))
    write_svol(out / "moving.svol", VolumeContainer.from_volume(pair.moving))
    write_svol(out / "ztrue.svol", VolumeContainer.from_field(pair.z_true))
    write_svol(out / "labels_fixed.svol", VolumeContainer.from_volume(pair.labels_fixed))
    write_svol(out / "labels_moving.svol", VolumeContainer.from_volume(pair.labels_moving))
    if pair.modes is not None:
        write_svol(out / "mode_a.svol", VolumeContainer.from_field(pair.modes[0]))
        write_svol(out / "mode_b.svol", VolumeContainer.from_field(pair.modes[1]))
    dump_config(cfg, out / "config.json")
    print(f"wrote {args.kind} pair ({'x'.join(map(str, dims))}) to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    pair = _pair_paths(args.pair)
    fixed = _read_volume(pair / "fixed.svol")
    moving = _read_volume(pair / "moving.svol")
    fit_cfg = dataclasses.replace(cfg.fit, seed=cfg.seed)
    temp = TemperatureState(cfg.sir.temperature, cfg.sir.gamma, space=cfg.sir.space)
    q, trace = fit(fixed, moving, cfg.energy, fit_cfg, temp)
    save_checkpoint(out / "checkpoint.npz", q, trace.final_sigma_alpha,
                    extra={"mode": fit_cfg.mode, "variant": fit_cfg.variant})
    write_trace_csv(out / "trace.csv", trace)
    dump_config(cfg, out / "config.json")
    print(
        f"fit {fit_cfg.mode}/{fit_cfg.variant}: final loss {trace.loss[-1]:.4f}, "
        f"fold {trace.fold_mu[-1]:.4%}, checkpoint in {out}"
    )
    return 0


def _frozen_temperature(cfg: RunConfig, meta: dict) -> TemperatureState:
    sigma = meta.get("sigma_alpha")
    return TemperatureState(
        cfg.sir.temperature, cfg.sir.gamma, sigma_alpha=sigma, space=cfg.sir.space
    )


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    pair = _pair_paths(args.pair)
    q, meta = load_checkpoint(args.checkpoint)
    fixed = _read_volume(pair / "fixed.svol")
    moving = _read_volume(pair / "moving.svol")
    labels_fixed = _read_volume(pair / "labels_fixed.svol")
    labels_moving = _read_volume(pair / "labels_moving.svol")
    n_k = args.n if args.n else cfg.sir.n_k
    char, _ = characterize(
        q, fixed, moving, labels_fixed, labels_moving, cfg.energy,
        n_l=cfg.sir.n_l, n_k=n_k, seed=cfg.seed,
        temperature=_frozen_temperature(cfg, meta), eval_cfg=cfg.eval,
    )
    for i, field in enumerate(char.fields):
        write_svol(out / f"sample_{i:03d}.svol", VolumeContainer.from_field(field))
    write_csv(
        out / "weights.csv",
        ("sample", "candidate_index", "weight", "log_alpha"),
        (
            (i, int(idx), char.weights[int(idx)], char.log_alpha[int(idx)])
            for i, idx in enumerate(char.resampled_indices)
        ),
    )
    dump_config(cfg, out / "config.json")
    print(f"wrote {len(char.fields)} resampled fields to {out}")
    return 0


def cmd_metrics(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    pair = _pair_paths(args.pair)
    q, meta = load_checkpoint(args.checkpoint)
    fixed = _read_volume(pair / "fixed.svol")
    moving = _read_volume(pair / "moving.svol")
    labels_fixed = _read_volume(pair / "labels_fixed.svol")
    labels_moving = _read_volume(pair / "labels_moving.svol")
    char, rows = characterize(
        q, fixed, moving, labels_fixed, labels_moving, cfg.energy,
        n_l=cfg.sir.n_l, n_k=cfg.sir.n_k, seed=cfg.seed,
        temperature=_frozen_temperature(cfg, meta), eval_cfg=cfg.eval,
    )
    write_report_csv(out / "report.csv", rows)
    dump_config(cfg, out / "config.json")
    mean_dsc = np.mean([r.dsc_zbar for r in rows]) if rows else float("nan")
    print(f"wrote report.csv ({len(rows)} structures, mean resampled DSC {mean_dsc:.3f}) to {out}")
    return 0


def cmd_modes(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    sample_dir = Path(args.samples)
    paths = sorted(sample_dir.glob("sample_*.svol"))
    if not paths:
        raise ValidationError(f"no sample_*.svol files in {sample_dir}")
    fields = [read_svol(p).to_field() for p in paths]
    result = analyze_modes(
        fields,
        n_clusters=cfg.eval.n_clusters,
        var_threshold=cfg.eval.pca_var_threshold,
        max_components=cfg.eval.pca_max_components,
        n_restarts=cfg.eval.kmeans_restarts,
        seed=cfg.seed,
    )
    write_csv(
        out / "clusters.csv",
        ("sample", "cluster"),
        ((i, int(c)) for i, c in enumerate(result.assignments)),
    )
    for c, rep in enumerate(result.representatives):
        write_svol(out / f"representative_{c}.svol", VolumeContainer.from_field(fields[rep]))
    write_csv(
        out / "explained_variance.csv",
        ("component", "variance_ratio"),
        ((i, v) for i, v in enumerate(result.explained_variance)),
    )
    dump_config(cfg, out / "config.json")
    print(
        f"clustered {len(fields)} samples into {cfg.eval.n_clusters} modes; "
        f"representatives {result.representatives}"
    )
    return 0


def cmd_slice(args) -> int:
    container = read_svol(args.input)
    if container.kind == "field":
        comp = container.to_field().components
        values = np.sqrt((comp.astype(np.float64) ** 2).sum(axis=0))
    else:
        values = container.to_volume().values.astype(np.float64)
    axis_names = {"z": 0, "y": 1, "x": 2} if values.ndim == 3 else {"y": 0, "x": 1}
    if args.axis not in axis_names:
        raise ValidationError(f"axis must be one of {sorted(axis_names)} for this volume")
    ax = axis_names[args.axis]
    index = args.index if args.index is not None else values.shape[ax] // 2
    if not 0 <= index < values.shape[ax]:
        raise ValidationError(f"slice index {index} out of range for axis {args.axis}")
    plane = np.take(values, index, axis=ax)
    write_pgm(args.output, plane)
    print(f"wrote {args.output}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    from .energy import RegistrationTarget
    from .grids import Grid
    from .rng import stream_rng
    from .synth import _gaussian_blob  # tiny textured pair below min synth size

    grid = Grid((6, 6, 6))
    rng = stream_rng(cfg.seed, "gradcheck-pair")
    moving = Volume(grid, rng.normal(0.0, 1.0, grid.shape) + _gaussian_blob(grid, (2.5, 3.0, 2.0), 1.5))
    fixed = Volume(grid, rng.normal(0.0, 1.0, grid.shape) + _gaussian_blob(grid, (3.5, 2.5, 3.0), 1.5))
    energy = dataclasses.replace(cfg.energy, ncc_window=3, lam=1e-2, lam_mu=2.5e-2)
    target = RegistrationTarget(fixed, moving, energy)
    report = None
    worst = 0.0
    for mode in ("sir", "variational"):
        fit_cfg = FitConfig(mode=mode, variant="LC", rank=2, n_l=3, n_k=2, steps=1)
        problem = loss_problem(grid, target, fit_cfg, seed=cfg.seed)
        report = check_gradients(problem, tolerance=args.tol, seed=cfg.seed)
        print(f"[{mode}] {report.summary()}")
        worst = max(worst, report.max_rel_err)
        if not report.passed:
            print("gradient check FAILED", file=sys.stderr)
            return 2
    print(f"max rel err {worst:.3e} <= {args.tol:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sirreg",
        description="Probabilistic image registration with a structured Gaussian proposal",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic pair with ground truth")
    common(p)
    p.add_argument("--kind", choices=("smooth", "bimodal"), default="smooth")
    p.add_argument("--dims", default="32,32,32", help="comma-separated grid dims")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fit", help="fit the proposal distribution for one pair")
    common(p)
    p.add_argument("--pair", required=True, help="directory from `synth`")
    p.add_argument("--mode", choices=("variational", "sir"))
    p.add_argument("--variant", choices=("D", "LD", "C", "LC"))
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("sample", help="draw resampled posterior fields")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--n", type=int, help="number of resampled fields")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("metrics", help="calibration report for a fitted pair")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("modes", help="cluster resampled fields into modes")
    common(p)
    p.add_argument("--samples", required=True, help="directory from `sample`")
    p.set_defaults(fn=cmd_modes)

    p = sub.add_parser("slice", help="export an axial slice as 8-bit PGM")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--axis", default="z")
    p.add_argument("--index", type=int)
    p.set_defaults(fn=cmd_slice)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    common(p, out=False)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
