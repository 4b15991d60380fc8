"""Quality metrics, rate-distortion evaluation, and latency benchmarking.

Metrics operate on float images in [0, 1] (peak signal 1.0).  Dataset
evaluation measures bits per pixel from the actual compressed byte stream,
never from entropy estimates, and reports per-image failures separately so a
bad file cannot silently skew aggregates.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .codec import compress, decompress
from .errors import ShapeError
from .losses import build_perceptual_provider, perceptual_distance
from .model import TextGuidedCodec
from .training import ManifestEntry

PROTOCOLS = ("center_crop_256", "full_resolution")

# Scale weights from the canonical multi-scale SSIM formulation.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_MIN_SIDE = 160  # five dyadic scales with an 11-tap window
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


# ---------------------------------------------------------------------------
# metrics


def _as_batched(x: torch.Tensor, name: str) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() == 4:
        return x
    raise ShapeError(f"{name} must be (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")


def psnr(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB against a peak of 1.0.

    Identical inputs yield ``float('inf')``.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    err = torch.mean((x.double() - x_hat.double()) ** 2).item()
    if err == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    half = (_WIN_SIZE - 1) / 2
    coords = torch.arange(_WIN_SIZE, dtype=dtype) - half
    g = torch.exp(-(coords ** 2) / (2 * _WIN_SIGMA ** 2))
    return g / g.sum()


def _blur(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian filter with reflection padding (edge not repeated)."""
    channels = x.shape[1]
    pad = _WIN_SIZE // 2
    kernel_row = window.view(1, 1, 1, -1).expand(channels, 1, 1, -1)
    kernel_col = window.view(1, 1, -1, 1).expand(channels, 1, -1, 1)
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, kernel_row, groups=channels)
    return F.conv2d(x, kernel_col, groups=channels)


def _ssim_components(x: torch.Tensor, y: torch.Tensor,
                     window: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    c1 = _K1 ** 2
    c2 = _K2 ** 2
    mu_x = _blur(x, window)
    mu_y = _blur(y, window)
    sigma_x = _blur(x * x, window) - mu_x * mu_x
    sigma_y = _blur(y * y, window) - mu_y * mu_y
    sigma_xy = _blur(x * y, window) - mu_x * mu_y
    luminance = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    contrast = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
    return luminance.mean(), contrast.mean()


def ms_ssim(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """Five-scale multi-scale SSIM (data range 1.0).

    Contrast-structure terms are pooled at every scale and the luminance term
    at the coarsest; each factor carries its canonical exponent.  Both
    spatial sides must be at least ``MS_SSIM_MIN_SIDE``.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    a = _as_batched(x, "x").double()
    b = _as_batched(x_hat, "x_hat").double()
    if min(a.shape[-2:]) < MS_SSIM_MIN_SIDE:
        raise ShapeError(
            f"multi-scale SSIM needs both sides >= {MS_SSIM_MIN_SIDE}, "
            f"got {tuple(a.shape[-2:])}"
        )
    window = _gaussian_window(a.dtype)
    value = torch.ones((), dtype=a.dtype)
    for scale, weight in enumerate(MS_SSIM_WEIGHTS):
        luminance, contrast = _ssim_components(a, b, window)
        if scale < len(MS_SSIM_WEIGHTS) - 1:
            value = value * torch.relu(contrast) ** weight
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
        else:
            value = value * (torch.relu(luminance) * torch.relu(contrast)) ** weight
    return float(value)


def center_crop(image: torch.Tensor, size: int) -> torch.Tensor:
    """Crop the central ``size`` x ``size`` window (offsets round down).

    Never pads: an image smaller than ``size`` on either side is an error.
    Applying the same crop twice is the identity.
    """
    if size <= 0:
        raise ValueError(f"crop size must be positive, got {size}")
    h, w = image.shape[-2:]
    if h < size or w < size:
        raise ShapeError(f"cannot crop {size}x{size} from a {h}x{w} image")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[..., top:top + size, left:left + size]


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class RDRecord:
    """Rate and quality measurements for one compressed image."""

    image_path: str
    lam: float
    bpp: float
    psnr: float
    lpips: float
    ms_ssim: float


@dataclass
class EvalReport:
    lam: float
    protocol: str
    records: list[RDRecord] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        """Mean of each metric over the successful images."""
        if not self.records:
            return {"lambda": self.lam, "bpp": float("nan"), "psnr": float("nan"),
                    "lpips": float("nan"), "ms_ssim": float("nan")}
        n = len(self.records)
        return {
            "lambda": self.lam,
            "bpp": sum(r.bpp for r in self.records) / n,
            "psnr": sum(r.psnr for r in self.records) / n,
            "lpips": sum(r.lpips for r in self.records) / n,
            "ms_ssim": sum(r.ms_ssim for r in self.records) / n,
        }


def load_image(path: str | Path) -> torch.Tensor:
    """Read an image file as a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def save_image(image: torch.Tensor, path: str | Path) -> None:
    """Write a (3, H, W) float tensor in [0, 1] as an 8-bit image file."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3,H,W) image, got {tuple(image.shape)}")
    arr = (image.clamp(0, 1) * 255).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(arr).save(path)


def evaluate_dataset(
    model: TextGuidedCodec,
    entries: Sequence[ManifestEntry],
    protocol: str = "center_crop_256",
    coder: str = "ref",
    perceptual: Optional[torch.nn.Module] = None,
    workers: int = 1,
) -> EvalReport:
    """Compress and reconstruct every manifest image, measuring real rates.

    ``center_crop_256`` evaluates the central 256x256 window of each image;
    ``full_resolution`` codes images as-is.  Bits per pixel always come from
    the container byte length over the coded image's pixel count.  The first
    caption of each entry conditions the encoder when the model has a text
    adapter.  Images that fail (unreadable, too small to crop, too small for
    the multi-scale metric) are collected in ``failures`` and left out of
    the aggregate.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(
            f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}"
        )
    if perceptual is None:
        perceptual = build_perceptual_provider(model.cfg.perceptual)
    use_captions = model.cfg.adapter.enabled
    report = EvalReport(lam=model.cfg.loss.lam, protocol=protocol)

    def measure(entry: ManifestEntry) -> RDRecord:
        image = load_image(entry.image_path)
        if protocol == "center_crop_256":
            image = center_crop(image, 256)
        caption = entry.captions[0] if (use_captions and entry.captions) else None
        blob = compress(model, image, caption=caption, coder=coder)
        x_hat = decompress(model, blob)
        pixels = image.shape[-2] * image.shape[-1]
        with torch.no_grad():
            lpips_value = float(perceptual_distance(perceptual, image, x_hat))
        return RDRecord(
            image_path=str(entry.image_path),
            lam=model.cfg.loss.lam,
            bpp=len(blob) * 8 / pixels,
            psnr=psnr(image, x_hat),
            lpips=lpips_value,
            ms_ssim=ms_ssim(image, x_hat),
        )

    def run(entry: ManifestEntry):
        try:
            return measure(entry), None
        except Exception as exc:  # per-image isolation is the point here
            return None, (str(entry.image_path), f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, entries))
    else:
        outcomes = [run(e) for e in entries]

    for record, failure in outcomes:
        if record is not None:
            report.records.append(record)
        else:
            report.failures.append(failure)
    return report


# ---------------------------------------------------------------------------
# rate-distortion curve emission


_CURVE_METRICS = ("psnr", "lpips", "ms_ssim")


def emit_rd_curve(aggregates: Sequence[Mapping[str, float]],
                  out_dir: str | Path) -> dict[str, Path]:
    """Write the rate-distortion table and one plot per quality metric.

    ``aggregates`` is one row per operating point with keys ``lambda``,
    ``bpp``, ``psnr``, ``lpips``, ``ms_ssim`` (as produced by
    :meth:`EvalReport.aggregate`).  Produces ``rd_curve.csv`` sorted by bpp
    plus ``<metric>_vs_bpp.svg`` for each metric; returns the paths keyed by
    ``"csv"`` and the metric names.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sorted(aggregates, key=lambda r: r["bpp"])

    paths: dict[str, Path] = {}
    csv_path = out_dir / "rd_curve.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "bpp", "psnr", "lpips", "ms_ssim"])
        for row in rows:
            writer.writerow([f"{row['lambda']:.6g}", f"{row['bpp']:.6g}",
                             f"{row['psnr']:.6g}", f"{row['lpips']:.6g}",
                             f"{row['ms_ssim']:.6g}"])
    paths["csv"] = csv_path

    for metric in _CURVE_METRICS:
        points = [(r["bpp"], r[metric]) for r in rows
                  if math.isfinite(r["bpp"]) and math.isfinite(r[metric])]
        fig, ax = plt.subplots(figsize=(5, 4))
        if points:
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker="o")
        ax.set_xlabel("bits per pixel")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} vs bpp")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        svg_path = out_dir / f"{metric}_vs_bpp.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        paths[metric] = svg_path
    return paths


# ---------------------------------------------------------------------------
# latency


# Timings reported for the original evaluation setup; informational only —
# absolute numbers depend entirely on hardware and are never asserted.
REFERENCE_LATENCY = {"enc_ms_mean": 78.60, "overhead_vs_no_text_pct": 10.2}


def bench_latency(
    model: TextGuidedCodec,
    images: Sequence[torch.Tensor],
    repeats: int = 10,
    warmup: int = 5,
    caption: str = "a photograph",
    coder: str = "ref",
) -> dict[str, float]:
    """Wall-clock compression and decompression latency in milliseconds.

    Runs ``warmup`` untimed round trips, then ``repeats`` timed ones over the
    image list.  The text overhead compares the encoder forward pass with and
    without caption conditioning (the only stage the text path touches); it
    is 0 for models without an adapter.
    """
    if repeats <= 0:
        raise ValueError("repeats must be positive")
    if not images:
        raise ValueError("need at least one image to benchmark")
    use_caption = caption if model.cfg.adapter.enabled else None

    def round_trip() -> tuple[float, float]:
        enc = dec = 0.0
        for image in images:
            t0 = time.perf_counter()
            blob = compress(model, image, caption=use_caption, coder=coder)
            t1 = time.perf_counter()
            decompress(model, blob)
            t2 = time.perf_counter()
            enc += t1 - t0
            dec += t2 - t1
        n = len(images)
        return enc / n, dec / n

    for _ in range(warmup):
        round_trip()
    enc_times, dec_times = zip(*(round_trip() for _ in range(repeats)))
    enc_ms = 1000 * sum(enc_times) / repeats
    dec_ms = 1000 * sum(dec_times) / repeats

    overhead = 0.0
    if model.cfg.adapter.enabled and model.text_embedder is not None:
        from .codec import pad_image

        tokens = model.text_embedder.embed(caption).tokens.unsqueeze(0)
        with torch.no_grad():
            sample = pad_image(images[0].unsqueeze(0),
                               model.cfg.backbone.pad_multiple)
            for _ in range(warmup):
                model.encode(sample, tokens)
                model.encode(sample, None)
            t_text = t_plain = 0.0
            for _ in range(repeats):
                t0 = time.perf_counter()
                model.encode(sample, tokens)
                t1 = time.perf_counter()
                model.encode(sample, None)
                t2 = time.perf_counter()
                t_text += t1 - t0
                t_plain += t2 - t1
        if t_plain > 0:
            overhead = 100.0 * (t_text - t_plain) / t_plain

    return {
        "enc_ms_mean": enc_ms,
        "dec_ms_mean": dec_ms,
        "total_ms": enc_ms + dec_ms,
        "overhead_vs_no_text_pct": overhead,
    }
