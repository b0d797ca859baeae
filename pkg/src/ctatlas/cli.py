"""Command-line interface: per-stage subcommands and the full cohort pipeline."""
from __future__ import annotations

import json
import logging
import os
import sys

import click

from . import __version__

log = logging.getLogger("ctatlas")


class CliError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("ATLAS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("numba").setLevel(logging.WARNING)


def _config(ctx):
    from .pipeline import PipelineConfig

    obj = ctx.obj
    cfg = PipelineConfig.load(obj["config"]) if obj["config"] else PipelineConfig()
    overrides = {}
    if obj["threads"] is not None:
        overrides["threads"] = obj["threads"]
    if obj["out"] is not None:
        overrides["out_dir"] = obj["out"]
    if overrides:
        cfg = PipelineConfig(**{**cfg.__dict__, **overrides})
    if cfg.threads:
        import numba
        numba.set_num_threads(min(cfg.threads, numba.config.NUMBA_NUM_THREADS))
    return cfg


def _need(value, name):
    if value is None:
        raise CliError(f"missing required option {name}")
    return value


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        click.echo(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _scorer(volume_path, scores, weights, cfg, geometry):
    from .pipeline import make_scorer
    from .voi import FileScorer

    if scores is None and weights is None:
        side = FileScorer.sidecar_path(volume_path)
        scores = side if os.path.exists(side) else None
    if weights is not None:
        cfg = type(cfg)(**{**cfg.__dict__, "scorer_weights": weights})
        scores = None
    return make_scorer(scores, cfg, geometry)


@click.group()
@click.version_option(__version__)
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), help="Pipeline config JSON.")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), help="Cohort manifest JSON.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--threads", type=click.IntRange(min=1), help="Worker threads (default: all cores).")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for phantom generation.")
@click.pass_context
def cli(ctx, config, manifest, out, threads, seed):
    """Multi-contrast CT kidney atlas toolkit."""
    ctx.ensure_object(dict)
    ctx.obj.update(config=config, manifest=manifest, out=out, threads=threads, seed=seed)


@cli.command()
@click.argument("volume", type=click.Path(exists=True, dir_okay=False))
@click.option("--scores", type=click.Path(exists=True, dir_okay=False), help="Score sidecar JSON.")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), help="Linear scorer weights JSON.")
@click.option("-o", "--output", default="-", help="Output JSON (default stdout).")
@click.pass_context
def score(ctx, volume, scores, weights, output):
    """Per-slice raw and fitted scores in canonical slice order."""
    from .nifti import read_nifti
    from .voi import compute_slice_features, fit_linear_correction, score_slices
    from .volume import reorient_canonical

    cfg = _config(ctx)
    v = read_nifti(volume, kind="volume")
    scorer = _scorer(volume, scores, weights, cfg, v.geometry)
    raw = score_slices(compute_slice_features(reorient_canonical(v)), scorer)
    s = fit_linear_correction(raw)
    _write_json({"raw": raw.tolist(), "fitted": s.fitted.tolist(), "slope": s.slope,
                 "intercept": s.intercept}, output)


@cli.command()
@click.argument("volume", type=click.Path(exists=True, dir_okay=False))
@click.option("--scores", type=click.Path(exists=True, dir_okay=False))
@click.option("--weights", type=click.Path(exists=True, dir_okay=False))
@click.option("--window", nargs=2, type=float, help="Score window LO HI (default from config).")
@click.option("--atlas", type=click.Path(exists=True, dir_okay=False),
              help="Also resample the VOI onto an atlas-sized grid centred on it.")
@click.option("-o", "--output", required=True)
@click.pass_context
def crop(ctx, volume, scores, weights, window, atlas, output):
    """Crop a volume to the score window (and optionally place it on the atlas grid)."""
    from .nifti import read_nifti, write_nifti
    from .pipeline import extract_voi, place_on_atlas_grid

    cfg = _config(ctx)
    if window:
        cfg = type(cfg)(**{**cfg.__dict__, "window": tuple(window)})
    v = read_nifti(volume, kind="volume")
    voi, _ = extract_voi(v, _scorer(volume, scores, weights, cfg, v.geometry), cfg)
    if atlas:
        voi = place_on_atlas_grid(voi, read_nifti(atlas, kind="volume").geometry)
    write_nifti(voi, output)


@cli.command("reg-affine")
@click.argument("fixed", type=click.Path(exists=True, dir_okay=False))
@click.argument("moving", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, help="Affine JSON.")
@click.pass_context
def reg_affine(ctx, fixed, moving, output):
    """Affine registration; the result maps fixed world mm into moving space."""
    from .affine import register_affine
    from .nifti import read_nifti

    cfg = _config(ctx)
    aff = register_affine(read_nifti(fixed, kind="volume"), read_nifti(moving, kind="volume"),
                          config=cfg.affine)
    aff.save(output)


@cli.command("reg-deform")
@click.argument("fixed", type=click.Path(exists=True, dir_okay=False))
@click.argument("moving", type=click.Path(exists=True, dir_okay=False))
@click.option("--affine", type=click.Path(exists=True, dir_okay=False),
              help="Affine applied to the moving volume first.")
@click.option("-o", "--output", required=True, help="DFLD field file.")
@click.pass_context
def reg_deform(ctx, fixed, moving, affine, output):
    """Deformable registration on the fixed grid."""
    from .deform import register_deform
    from .fields import warp_volume, write_dfld
    from .nifti import read_nifti
    from .transform import AffineTransform

    cfg = _config(ctx)
    f = read_nifti(fixed, kind="volume")
    m = read_nifti(moving, kind="volume")
    aff = AffineTransform.load(affine) if affine else None
    if aff is not None or m.geometry.dims != f.geometry.dims:
        m = warp_volume(m, affine=aff, geometry=f.geometry)
    write_dfld(register_deform(f, m, cfg.schedule, cfg.alpha), output)


@cli.command()
@click.argument("moving", type=click.Path(exists=True, dir_okay=False))
@click.option("--reference", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Volume whose grid defines the output.")
@click.option("--affine", type=click.Path(exists=True, dir_okay=False))
@click.option("--field", "field_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--nearest", is_flag=True, help="Nearest-neighbour interpolation (forced for labels).")
@click.option("-o", "--output", required=True)
@click.pass_context
def warp(ctx, moving, reference, affine, field_path, nearest, output):
    """Pull-back warp of a volume or label map onto the reference grid."""
    from .fields import read_dfld, warp_volume
    from .nifti import read_nifti, write_nifti
    from .transform import AffineTransform

    _config(ctx)
    ref = read_nifti(reference, kind="volume")
    mov = read_nifti(moving)
    fld = read_dfld(field_path, ref.geometry) if field_path else None
    aff = AffineTransform.load(affine) if affine else None
    interp = "nearest" if (nearest or mov.is_label) else "trilinear"
    write_nifti(warp_volume(mov, fld, aff, interp, ref.geometry), output)


@cli.command()
@click.argument("field_path", metavar="FIELD", type=click.Path(exists=True, dir_okay=False))
@click.option("--reference", type=click.Path(exists=True, dir_okay=False), help="Grid of the field.")
@click.option("--max-iter", default=30, show_default=True)
@click.option("--tol", default=0.01, show_default=True)
@click.option("-o", "--output", required=True)
@click.option("--report", default="-", help="Convergence report JSON (default stdout).")
@click.pass_context
def invert(ctx, field_path, reference, max_iter, tol, output, report):
    """Fixed-point inversion of a displacement field."""
    from .fields import invert_field, read_dfld, write_dfld
    from .nifti import read_nifti

    _config(ctx)
    geom = read_nifti(reference, kind="volume").geometry if reference else None
    res = invert_field(read_dfld(field_path, geom), max_iter, tol)
    write_dfld(res.field, output)
    _write_json({"converged": res.converged, "iterations": res.iterations,
                 "residual_mean": res.residual_mean, "residual_max": res.residual_max}, report)


@cli.command("transfer-labels")
@click.argument("atlas_label", type=click.Path(exists=True, dir_okay=False))
@click.option("--affine", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--field", "field_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--inverse", type=click.Path(exists=True, dir_okay=False), help="Precomputed inverse field.")
@click.option("--subject", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Subject volume defining the native output grid.")
@click.option("-o", "--output", required=True)
@click.pass_context
def transfer_labels_cmd(ctx, atlas_label, affine, field_path, inverse, subject, output):
    """Map atlas labels into a subject's native space."""
    from .fields import read_dfld, transfer_labels
    from .nifti import read_nifti, write_nifti
    from .transform import AffineTransform

    _config(ctx)
    lab = read_nifti(atlas_label, kind="label")
    fld = read_dfld(field_path, lab.geometry)
    inv = read_dfld(inverse, lab.geometry) if inverse else None
    subj = read_nifti(subject, kind="volume")
    write_nifti(transfer_labels(lab, AffineTransform.load(affine), fld, subj.geometry, inv), output)


def _manifest(ctx):
    from .pipeline import CohortManifest

    return CohortManifest.load(_need(ctx.obj["manifest"], "--manifest"))


@cli.command("atlas-build")
@click.pass_context
def atlas_build(ctx):
    """Register the manifest cohort and write per-phase mean/variance bundles."""
    from .atlas import write_bundle
    from .pipeline import build_phase_atlases

    cfg = _config(ctx)
    _need(ctx.obj["out"], "--out")
    cfg = type(cfg)(**{**cfg.__dict__, "out_dir": os.path.abspath(cfg.out_dir)})
    bundles, rows = build_phase_atlases(_manifest(ctx), cfg)
    for b in bundles.values():
        write_bundle(b, cfg.out_dir)
    if not any(r["success"] for r in rows):
        raise CliError("no subject registered successfully")


@cli.command()
@click.argument("pred", required=False, type=click.Path(exists=True, dir_okay=False))
@click.argument("truth", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--subject", default=None, help="Subject id for the rows.")
@click.option("--symmetric", is_flag=True, help="Symmetric instead of directed surface distances.")
@click.option("-o", "--output", default="-")
@click.pass_context
def evaluate(ctx, pred, truth, subject, symmetric, output):
    """Per-organ Dice, MSD and HD rows.

    With PRED and TRUTH, compares two label maps. Otherwise uses --manifest
    and --out from a pipeline run, comparing each subject's transferred
    labels with its ground-truth label map.
    """
    from .metrics import organ_metrics
    from .nifti import read_nifti

    _config(ctx)
    pairs = []
    if pred and truth:
        pairs.append((subject or os.path.basename(pred), pred, truth))
    elif pred or truth:
        raise CliError("give both PRED and TRUTH, or neither")
    else:
        out = _need(ctx.obj["out"], "--out")
        for s in _manifest(ctx).subjects:
            p = os.path.join(out, "subjects", s.id, "label.nii")
            if s.label and os.path.exists(p):
                pairs.append((s.id, p, s.label))
    rows = []
    for sid, p, t in pairs:
        rows += [dict(subject=sid, **r) for r in organ_metrics(read_nifti(p, kind="label"),
                                                               read_nifti(t, kind="label"),
                                                               symmetric=symmetric)]
    _write_json(rows, output)


@cli.command()
@click.argument("kind", type=click.Choice(["montage", "heatmap", "checkerboard"]))
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--plane", type=click.Choice(["axial", "coronal", "sagittal"]), default="axial", show_default=True)
@click.option("--slice-frac", type=click.FloatRange(0, 1), default=0.5, show_default=True)
@click.option("--window", nargs=2, type=float, default=(-160.0, 240.0), show_default=True)
@click.option("--vmax", type=float, help="Heatmap saturation value (default: data max).")
@click.option("--axis", type=click.IntRange(0, 2), default=2, show_default=True)
@click.option("--index", type=int, help="Checkerboard slice index (default: middle).")
@click.option("--cell-px", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--reference", type=click.Path(exists=True, dir_okay=False), help="Grid for a field input.")
@click.option("-o", "--output", required=True, help="PNG path.")
@click.pass_context
def render(ctx, kind, inputs, plane, slice_frac, window, vmax, axis, index, cell_px, reference, output):
    """Montage of volumes, variance heatmap or deformation checkerboard."""
    from . import render as rd
    from .fields import read_dfld
    from .nifti import read_nifti

    _config(ctx)
    if kind == "montage":
        rd.render_montage([read_nifti(p, kind="volume") for p in inputs], plane, slice_frac, window, output)
    elif kind == "heatmap":
        rd.render_variance_heatmap(read_nifti(inputs[0], kind="volume"), plane, slice_frac, vmax, output)
    else:
        geom = read_nifti(reference, kind="volume").geometry if reference else None
        rd.render_checkerboard_deformation(read_dfld(inputs[0], geom), axis, index, cell_px, output)


@cli.command("phantom-cohort")
@click.option("--n", "n", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--phases", default="portal_venous", show_default=True, help="Comma-separated phase tags.")
@click.option("--kidney-cc", nargs=2, type=float, default=(100.0, 308.0), show_default=True)
@click.option("--flip-every", type=click.IntRange(min=0), default=0,
              help="Store every k-th subject with a flipped slice axis.")
@click.pass_context
def phantom_cohort(ctx, n, phases, kidney_cc, flip_every):
    """Write a synthetic cohort (atlas target, subjects, manifest) to --out."""
    from .atlas import PhaseTag
    from .phantom import write_cohort

    out = _need(ctx.obj["out"], "--out")
    tags = tuple(PhaseTag.parse(p.strip()).value for p in phases.split(",") if p.strip())
    path = write_cohort(out, n, ctx.obj["seed"], tags, tuple(kidney_cc), flip_every=flip_every)
    click.echo(path)


@cli.command()
@click.pass_context
def pipeline(ctx):
    """Crop, resample, affine, deform, label transfer, atlas accumulation and reports."""
    from .pipeline import run_pipeline

    cfg = _config(ctx)
    _need(ctx.obj["out"], "--out")
    report = run_pipeline(_manifest(ctx), cfg)
    if report["n_success"] == 0:
        raise CliError("no subject registered successfully")


def main(argv=None):
    _setup_logging()
    try:
        cli.main(args=argv, prog_name="ctatlas", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": exc.format_message()}) + "\n")
        return 1
    except click.exceptions.Abort:
        sys.stderr.write(json.dumps({"error": "Abort", "message": "aborted"}) + "\n")
        return 1
    except Exception as exc:  # every failure becomes a JSON error line
        log.debug("command failed", exc_info=True)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
