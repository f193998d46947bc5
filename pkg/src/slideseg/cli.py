"""Command-line entry points. Thin wrappers over the library; every command
exits 0 on success, 2 on validation errors, 1 on runtime failures, with a
machine-readable `ERROR <code>: <msg>` line on stderr."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import annotations as ann
from . import imagescope
from .backends import BackendConfig
from .errors import FormatError, SlidesegError, ValidationError
from .metrics import doc_layer_confusion, micro_average
from .pipeline import append_timing, segment_slide
from .pyramid import SlidePyramid, build_pyramid
from .report import (read_timing_csv, render_metrics_figure,
                     render_timing_figure, write_fit_csv)
from .synthetic import make_synthetic
from .tissue import detect_tissue
from .training import export_training_patches


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValidationError, FormatError) as exc:
            click.echo(f"ERROR 2: {exc}", err=True)
            sys.exit(2)
        except SlidesegError as exc:
            click.echo(f"ERROR 1: {exc}", err=True)
            sys.exit(1)
        except OSError as exc:
            click.echo(f"ERROR 1: {exc}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON file of per-command option defaults.")
@click.pass_context
def main(ctx, config):
    """Whole-slide segmentation workbench."""
    if config:
        try:
            ctx.default_map = json.loads(Path(config).read_text())
        except json.JSONDecodeError as exc:
            click.echo(f"ERROR 2: bad config JSON: {exc.msg}", err=True)
            sys.exit(2)


@main.command("build-pyramid")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path())
@click.option("--tile-size", default=512, show_default=True,
              type=click.Choice(["256", "512", "1024"]))
@click.option("--mpp", default=None, type=float,
              help="Microns per pixel, recorded in metadata.")
@guarded
def build_pyramid_cmd(src, out_dir, tile_size, mpp):
    """Build a tile pyramid from a raster image."""
    pyramid = build_pyramid(src, out_dir, tile_size=int(tile_size), mpp=mpp)
    click.echo(f"pyramid {pyramid.slide_id}: {pyramid.width0}x{pyramid.height0} "
               f"levels={pyramid.levels} tile={pyramid.tile_size}")


@main.command("segment")
@click.argument("pyramid_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", "backend_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Backend config JSON; defaults to the builtin segmenter.")
@click.option("--tile-size", default=512, show_default=True, type=int)
@click.option("--overlap", default=64, show_default=True, type=int)
@click.option("--min-area", default=400, show_default=True, type=int)
@click.option("--epsilon", default=2.0, show_default=True, type=float)
@click.option("--workers", default=4, show_default=True, type=int)
@click.option("--full-grid", is_flag=True,
              help="Disable tissue gating; process every tile.")
@click.option("--out", "out_path", default="predictions.json",
              show_default=True, type=click.Path())
@click.option("--timing", "timing_path", default=None, type=click.Path(),
              help="Append a row to this timing CSV.")
@guarded
def segment_cmd(pyramid_dir, backend_path, tile_size, overlap, min_area,
                epsilon, workers, full_grid, out_path, timing_path):
    """Segment a slide and write predicted annotations as JSON."""
    pyramid = SlidePyramid(pyramid_dir)
    cfg = BackendConfig.load(backend_path) if backend_path else BackendConfig()
    result = segment_slide(pyramid, cfg, tile_size=tile_size, overlap=overlap,
                           min_area_px=min_area, epsilon_px=epsilon,
                           workers=workers, full_grid=full_grid)
    Path(out_path).write_bytes(ann.to_json(result.doc))
    if timing_path:
        append_timing(timing_path, result.timing)
    for warning in result.warnings:
        click.echo(f"warning: {warning}", err=True)
    t = result.timing
    click.echo(f"tiles={t.tile_count} analyzed_pixels={t.analyzed_pixels} "
               f"wall_seconds={t.wall_seconds:.3f} "
               f"elements={result.doc.element_count()}")


@main.command("tissue")
@click.argument("pyramid_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--thumb-max-dim", default=2048, show_default=True, type=int)
@click.option("--min-component", default=64, show_default=True, type=int)
@guarded
def tissue_cmd(pyramid_dir, out_path, thumb_max_dim, min_component):
    """Write the detected tissue mask as a binary PNG."""
    pyramid = SlidePyramid(pyramid_dir)
    tissue = detect_tissue(pyramid, thumb_max_dim=thumb_max_dim,
                           min_component_px=min_component)
    Image.fromarray(tissue.mask.astype(np.uint8) * 255).save(out_path)
    for warning in tissue.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"level={tissue.level} tissue_pixels={tissue.tissue_pixel_count}")


def _load_doc(path: Path) -> ann.AnnotationDocument:
    suffix = path.suffix.lower()
    if suffix == ".json":
        return ann.from_json(path.read_bytes())
    if suffix == ".xml":
        return imagescope.from_xml(path.read_bytes(), slide_id=path.stem)
    raise ValidationError(f"unsupported annotation format {suffix!r}")


def _save_doc(doc: ann.AnnotationDocument, path: Path) -> None:
    suffix = path.suffix.lower()
    if suffix == ".json":
        path.write_bytes(ann.to_json(doc))
    elif suffix == ".xml":
        path.write_bytes(imagescope.to_xml(doc))
    else:
        raise ValidationError(f"unsupported annotation format {suffix!r}")


@main.command("convert")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path())
@guarded
def convert_cmd(src, dst):
    """Convert annotations between JSON and ImageScope XML."""
    src, dst = Path(src), Path(dst)
    doc = _load_doc(src)
    _save_doc(doc, dst)
    click.echo(f"wrote {dst} ({doc.element_count()} elements, "
               f"{len(doc.layers)} layers)")


@main.command("mask-export")
@click.argument("doc_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("pyramid_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--level", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--layers", "layer_csv", default=None,
              help="Comma-separated layer names (default: all).")
@guarded
def mask_export_cmd(doc_path, pyramid_dir, level, out_path, layer_csv):
    """Rasterize annotation layers to a class-index PNG mask."""
    pyramid = SlidePyramid(pyramid_dir)
    doc = _load_doc(Path(doc_path))
    if not 0 <= level < pyramid.levels:
        raise ValidationError(f"level {level} out of range 0..{pyramid.levels - 1}")
    layer_names = layer_csv.split(",") if layer_csv else None
    mask = ann.rasterize(doc, level, layer_names=layer_names,
                         level_dims=pyramid.level_dims(level))
    Image.fromarray(mask).save(out_path)
    click.echo(f"wrote {out_path} ({mask.shape[1]}x{mask.shape[0]}, "
               f"{int(np.count_nonzero(mask))} labeled pixels)")


def _layer_pairs(gt: ann.AnnotationDocument, pred: ann.AnnotationDocument):
    names = [la.name for la in gt.layers if any(p.name == la.name
                                                for p in pred.layers)]
    if names:
        return [(n, n) for n in names]
    if len(gt.layers) == 1 and len(pred.layers) == 1:
        return [(gt.layers[0].name, pred.layers[0].name)]
    raise ValidationError("no layer names in common between gt and pred")


@main.command("metrics")
@click.argument("gt_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("pred_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--pyramid", "pyramid_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--batch", "batch_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="TSV of extra gt<TAB>pred<TAB>pyramid rows to micro-average.")
@click.option("--out-dir", "out_dir", default=None, type=click.Path(),
              help="Write metrics.json, metrics.csv, and metrics.png here.")
@guarded
def metrics_cmd(gt_path, pred_path, pyramid_dir, batch_path, out_dir):
    """Evaluate predicted vs ground-truth annotations (micro-averaged)."""
    triples = [(Path(gt_path), Path(pred_path), Path(pyramid_dir))]
    if batch_path:
        for i, line in enumerate(Path(batch_path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError("batch rows need gt<TAB>pred<TAB>pyramid",
                                  f"{batch_path}:{i}")
            triples.append((Path(parts[0]), Path(parts[1]), Path(parts[2])))
    counts = []
    for gt_file, pred_file, pyr_dir in triples:
        gt = _load_doc(gt_file)
        pred = _load_doc(pred_file)
        pyramid = SlidePyramid(pyr_dir)
        for gt_layer, pred_layer in _layer_pairs(gt, pred):
            counts.append(doc_layer_confusion(
                gt, pred, gt_layer, pred_layer,
                (pyramid.width0, pyramid.height0)))
    report = micro_average(counts)
    click.echo(report.summary())
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(
            json.dumps(report.to_jsonable(), indent=1))
        with (out / "metrics.csv").open("w") as fh:
            fh.write("metric,value\n")
            from .metrics import METRIC_NAMES
            for name in METRIC_NAMES:
                fh.write(f"{name},{getattr(report, name):.6f}\n")
        render_metrics_figure(report, out / "metrics.png")
        click.echo(f"report written to {out}", err=True)


@main.command("export-patches")
@click.argument("doc_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("pyramid_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--layers", "layer_csv", required=True,
              help="Comma-separated layer names to export.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--patch-size", default=512, show_default=True, type=int)
@click.option("--ratio", default=0.0, show_default=True, type=float,
              help="Background tiles per positive tile.")
@click.option("--overlap", default=0, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@guarded
def export_patches_cmd(doc_path, pyramid_dir, layer_csv, out_dir, patch_size,
                       ratio, overlap, seed):
    """Export (patch, mask) training pairs plus a manifest."""
    pyramid = SlidePyramid(pyramid_dir)
    doc = _load_doc(Path(doc_path))
    manifest = export_training_patches(doc, pyramid, layer_csv.split(","),
                                       out_dir, patch_size=patch_size,
                                       background_ratio=ratio, overlap=overlap,
                                       seed=seed)
    click.echo(f"wrote {len(manifest.entries)} pairs to {out_dir}")


@main.command("make-synthetic")
@click.option("--size", required=True, type=int)
@click.option("--blobs", required=True, type=int)
@click.option("--seed", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--truth", "truth_path", required=True, type=click.Path())
@guarded
def make_synthetic_cmd(size, blobs, seed, out_path, truth_path):
    """Generate a synthetic slide image and its ground-truth annotations."""
    image, doc = make_synthetic(size, blobs, seed)
    Image.fromarray(image).save(out_path, compress_level=1)
    Path(truth_path).write_bytes(ann.to_json(doc))
    click.echo(f"wrote {out_path} ({size}x{size}, {blobs} blobs) "
               f"and {truth_path}")


@main.command("timing-report")
@click.argument("timing_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
@guarded
def timing_report_cmd(timing_csv, out_dir):
    """Fit wall time vs analyzed pixels and render the scaling figure."""
    records = read_timing_csv(timing_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fit = render_timing_figure(records, out / "timing.png")
    write_fit_csv(fit, out / "fit.csv")
    click.echo(f"slope={fit.slope:.6g} intercept={fit.intercept:.6f} "
               f"r2={fit.r2:.6f} n={fit.n}")


@main.command("serve")
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True, type=int)
@click.option("--workers", default=None, type=int,
              help="Inference worker threads per job (default: cpu count).")
@click.option("--max-jobs", default=2, show_default=True, type=int)
@click.option("--static", "static_dir", default=None,
              type=click.Path(file_okay=False),
              help="Directory of built frontend assets to serve at /.")
@guarded
def serve_cmd(data_dir, host, port, workers, max_jobs, static_dir):
    """Run the HTTP workbench service."""
    import uvicorn

    from .service import create_app

    app = create_app(data_dir, max_jobs=max_jobs, workers=workers,
                     static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
