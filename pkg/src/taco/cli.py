"""Command-line entry points for training, coding, and evaluation.

Exit codes: 0 on success, 1 on operational failures (missing files, coding
errors, unavailable backends), 2 on usage errors (unknown flags, bad values).
"""

from __future__ import annotations

import functools
import glob as globlib
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .codec import CODER_NAMES, compress, decompress
from .config import load_config, replace
from .errors import TacoError
from .evaluation import (
    PROTOCOLS,
    REFERENCE_LATENCY,
    bench_latency,
    emit_rd_curve,
    evaluate_dataset,
    load_image,
    save_image,
)
from .model import ensure_text_embedder, load_checkpoint
from .training import fit, load_manifest

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def _handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (TacoError, OSError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _seed_option(fn):
    return click.option("--seed", type=int, default=None,
                        help="Override the global random seed.")(fn)


def _apply_seed(seed):
    if seed is not None:
        torch.manual_seed(seed)
        np.random.seed(seed % 2**32)


def _load_model(path: str):
    model, _ = load_checkpoint(path)
    return ensure_text_embedder(model)


@click.group()
@click.version_option(package_name="taco")
def main() -> None:
    """Text-guided learned image compression toolkit."""


# ---------------------------------------------------------------------------
# training


def _run_training(config_path, manifest_path, out_dir, resume, seed, ablation):
    codec_cfg, train_cfg = load_config(config_path)
    if seed is not None:
        codec_cfg = replace(codec_cfg, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
    if ablation is not None:
        train_cfg = replace(train_cfg, ablation=ablation)
    _apply_seed(seed)
    entries = load_manifest(manifest_path)
    click.echo(f"training on {len(entries)} images "
               f"(ablation: {train_cfg.ablation})")
    result = fit(codec_cfg, train_cfg, entries, out_dir, resume=resume)
    if result.history:
        click.echo(f"final loss: {result.history[-1].total:.6g}")
    click.echo(f"completed {result.steps} steps")
    click.echo(f"checkpoint: {result.checkpoint_path}")
    click.echo(f"metrics:    {result.metrics_path}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="YAML file with 'model' and 'train' sections.")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSONL manifest of images and captions.")
@click.option("--out-dir", default="runs", show_default=True,
              type=click.Path(file_okay=False),
              help="Directory for checkpoints and metrics.")
@click.option("--resume/--fresh", default=True, show_default=True,
              help="Continue from latest.pt in the output directory if present.")
@_seed_option
@_handles_errors
def train(config_path, manifest_path, out_dir, resume, seed):
    """Train a codec from a config and a dataset manifest."""
    _run_training(config_path, manifest_path, out_dir, resume, seed, None)


@main.command()
@click.option("--mode", required=True,
              type=click.Choice(["no_adapter", "no_joint_loss", "frozen_backbone"]),
              help="Which component to ablate.")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", default="runs", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--resume/--fresh", default=True, show_default=True)
@_seed_option
@_handles_errors
def ablate(mode, config_path, manifest_path, out_dir, resume, seed):
    """Train with one component ablated (otherwise identical to 'train')."""
    _run_training(config_path, manifest_path, out_dir, resume, seed, mode)


# ---------------------------------------------------------------------------
# coding


@main.command(name="compress")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Trained checkpoint (.pt).")
@click.option("--image", "image_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--caption", default=None, help="Caption text for the encoder.")
@click.option("--caption-file", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Read the caption from a file instead.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--coder", type=click.Choice(sorted(CODER_NAMES)), default="ref",
              show_default=True, help="Entropy coder backend.")
@_seed_option
@_handles_errors
def compress_cmd(model_path, image_path, caption, caption_file, out_path,
                 coder, seed):
    """Compress one image to a container file."""
    if caption is not None and caption_file is not None:
        raise click.UsageError("--caption and --caption-file are mutually exclusive")
    _apply_seed(seed)
    if caption_file is not None:
        caption = Path(caption_file).read_text(encoding="utf-8").strip()
    model = _load_model(model_path)
    if model.cfg.adapter.enabled and caption is None:
        click.echo("warning: no caption given; encoding with the empty caption",
                   err=True)
    image = load_image(image_path)
    blob = compress(model, image, caption=caption, coder=coder)
    Path(out_path).write_bytes(blob)
    pixels = image.shape[-2] * image.shape[-1]
    click.echo(f"{len(blob)} bytes ({len(blob) * 8 / pixels:.4f} bpp) "
               f"-> {out_path}")


@main.command(name="decompress")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--in", "in_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Compressed container file.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_seed_option
@_handles_errors
def decompress_cmd(model_path, in_path, out_path, seed):
    """Decompress a container file back to an image."""
    _apply_seed(seed)
    model = _load_model(model_path)
    blob = Path(in_path).read_bytes()
    image = decompress(model, blob)
    save_image(image, out_path)
    click.echo(f"{tuple(image.shape[-2:])} image -> {out_path}")


# ---------------------------------------------------------------------------
# evaluation


@main.command(name="eval")
@click.option("--model-glob", required=True,
              help="Glob matching one checkpoint per rate point.")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--protocol", type=click.Choice(PROTOCOLS),
              default="center_crop_256", show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--coder", type=click.Choice(sorted(CODER_NAMES)), default="ref",
              show_default=True)
@click.option("--json", "json_output", is_flag=True,
              help="Print results as JSON instead of a table.")
@_seed_option
@_handles_errors
def eval_cmd(model_glob, manifest_path, protocol, out_dir, workers, coder,
             json_output, seed):
    """Measure rate-distortion over a dataset and emit the curve."""
    _apply_seed(seed)
    checkpoints = sorted(globlib.glob(model_glob))
    if not checkpoints:
        raise TacoError(f"no checkpoints match {model_glob!r}")
    entries = load_manifest(manifest_path)

    results = []
    for ckpt in checkpoints:
        model = _load_model(ckpt)
        report = evaluate_dataset(model, entries, protocol=protocol,
                                  coder=coder, workers=workers)
        if not report.records:
            raise TacoError(
                f"every image failed for {ckpt}: "
                + "; ".join(reason for _, reason in report.failures[:3])
            )
        results.append((ckpt, report))

    aggregates = [report.aggregate() for _, report in results]
    outputs = emit_rd_curve(aggregates, out_dir)

    if json_output:
        click.echo(json.dumps({
            "protocol": protocol,
            "models": [
                {
                    "checkpoint": ckpt,
                    "aggregate": report.aggregate(),
                    "num_images": len(report.records),
                    "failures": [{"image": p, "reason": r}
                                 for p, r in report.failures],
                }
                for ckpt, report in results
            ],
            "outputs": {k: str(v) for k, v in outputs.items()},
        }, indent=2))
        return

    click.echo(f"{'lambda':>10} {'bpp':>8} {'psnr':>8} {'lpips':>8} {'ms_ssim':>8}")
    for row in sorted(aggregates, key=lambda r: r["bpp"]):
        click.echo(f"{row['lambda']:>10.4g} {row['bpp']:>8.4f} "
                   f"{row['psnr']:>8.3f} {row['lpips']:>8.4f} "
                   f"{row['ms_ssim']:>8.4f}")
    failures = [(ckpt, p, r) for ckpt, rep in results for p, r in rep.failures]
    for ckpt, image, reason in failures:
        click.echo(f"warning: {image} failed under {Path(ckpt).name}: {reason}",
                   err=True)
    click.echo(f"wrote {outputs['csv']} and "
               f"{len(outputs) - 1} plots to {out_dir}")


@main.command(name="bench")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--images", "images_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of benchmark images.")
@click.option("--repeats", type=int, default=10, show_default=True)
@click.option("--warmup", type=int, default=5, show_default=True)
@click.option("--coder", type=click.Choice(sorted(CODER_NAMES)), default="ref",
              show_default=True)
@click.option("--json", "json_output", is_flag=True)
@_seed_option
@_handles_errors
def bench_cmd(model_path, images_dir, repeats, warmup, coder, json_output, seed):
    """Measure wall-clock compression and decompression latency."""
    _apply_seed(seed)
    paths = sorted(p for p in Path(images_dir).iterdir()
                   if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not paths:
        raise TacoError(f"no images found in {images_dir}")
    model = _load_model(model_path)
    images = [load_image(p) for p in paths]
    stats = bench_latency(model, images, repeats=repeats, warmup=warmup,
                          coder=coder)
    if json_output:
        click.echo(json.dumps({"measured": stats,
                               "reference": REFERENCE_LATENCY}, indent=2))
        return
    click.echo(f"encode: {stats['enc_ms_mean']:.2f} ms   "
               f"decode: {stats['dec_ms_mean']:.2f} ms   "
               f"total: {stats['total_ms']:.2f} ms")
    click.echo(f"text-conditioning encoder overhead: "
               f"{stats['overhead_vs_no_text_pct']:+.1f}%")
    click.echo(f"(reference setup: {REFERENCE_LATENCY['enc_ms_mean']:.2f} ms encode, "
               f"{REFERENCE_LATENCY['overhead_vs_no_text_pct']:+.1f}% overhead; "
               f"informational only)")


if __name__ == "__main__":
    main()
