"""Evaluation metrics: transient IoU, PSNR, SSIM, and report assembly.

Transient comparisons happen in raw count space: rendered videos that were
trained against gamma-compressed targets must be expanded (``x ** gamma``)
before calling into this module; ``evaluate`` handles that when given the
training gamma.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .core import ShapeError, TransientHistogram, TransientVideo

PSNR_INFINITE = float("inf")
# pixels whose ground-truth mass falls below this fraction of the video
# maximum are excluded from per-video IoU aggregation (0/0 pixels)
IOU_MASS_FLOOR = 1e-6

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _as_bins(h) -> np.ndarray:
    if isinstance(h, TransientHistogram):
        return h.bins
    arr = np.asarray(h, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected a 1-d histogram, got shape {arr.shape}")
    return arr


def transient_iou(a, b) -> float:
    """Intersection over union of two histograms: sum(min) / sum(max).

    Both inputs must be non-negative with equal length. Two identically
    zero histograms count as a perfect match (1.0).
    """
    av = _as_bins(a)
    bv = _as_bins(b)
    if av.shape != bv.shape:
        raise ShapeError(f"histogram lengths differ: {av.shape} vs {bv.shape}")
    denom = float(np.maximum(av, bv).sum())
    if denom == 0.0:
        return 1.0
    return float(np.minimum(av, bv).sum() / denom)


def video_iou(a: TransientVideo | np.ndarray, b: TransientVideo | np.ndarray) -> float:
    """Mean per-pixel transient IoU over pixels that carry ground truth.

    ``a`` is the reference: pixels whose total mass in ``a`` is below
    IOU_MASS_FLOOR times the largest per-pixel mass are skipped so empty
    pixels (0/0, defined as 1) do not inflate the score. If no pixel
    qualifies the result falls back to plain full-frame IoU.
    """
    av = a.data if isinstance(a, TransientVideo) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, TransientVideo) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise ShapeError(f"video shapes differ: {av.shape} vs {bv.shape}")
    av = av.astype(np.float64).reshape(-1, av.shape[-1])
    bv = bv.astype(np.float64).reshape(-1, bv.shape[-1])
    mass = av.sum(axis=-1)
    keep = mass > IOU_MASS_FLOOR * float(mass.max(initial=0.0))
    if not np.any(keep):
        return transient_iou(av.ravel(), bv.ravel())
    num = np.minimum(av[keep], bv[keep]).sum(axis=-1)
    den = np.maximum(av[keep], bv[keep]).sum(axis=-1)
    per_pixel = np.where(den > 0, num / np.maximum(den, 1e-300), 1.0)
    return float(per_pixel.mean())


def integrate_and_tonemap(video: TransientVideo | np.ndarray) -> np.ndarray:
    """Collapse a transient video to a display image.

    Per-pixel mean over time bins, normalized by the image maximum, then
    gamma corrected with exponent 1/2.2. All-zero videos map to all-zero
    images. Returns (height, width, channels) float64 in [0, 1].
    """
    data = video.data if isinstance(video, TransientVideo) else np.asarray(video)
    img = data.astype(np.float64).mean(axis=-1)
    peak = float(img.max(initial=0.0))
    if peak <= 0.0:
        return np.zeros_like(img)
    return (img / peak) ** (1.0 / 2.2)


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images return inf.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter2(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = convolve1d(img, window, axis=0, mode="reflect")
    return convolve1d(out, window, axis=1, mode="reflect")


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Structural similarity on [0, 1] images, 11x11 Gaussian window.

    Grayscale inputs (H, W); multichannel inputs (H, W, C) are averaged over
    channels. Standard constants K1=0.01, K2=0.03 with dynamic range 1.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c]) for c in range(a.shape[2])]))
    if a.ndim != 2:
        raise ShapeError(f"images must be 2-d or 3-d, got {a.ndim}-d")

    window = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    mu_a = _filter2(a, window)
    mu_b = _filter2(b, window)
    var_a = _filter2(a * a, window) - mu_a * mu_a
    var_b = _filter2(b * b, window) - mu_b * mu_b
    cov = _filter2(a * b, window) - mu_a * mu_b
    # clamp tiny negative variances from floating-point cancellation
    var_a = np.maximum(var_a, 0.0)
    var_b = np.maximum(var_b, 0.0)
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    """Aggregate metrics plus the per-view breakdown behind them."""

    psnr_db: float
    ssim: float
    transient_iou: float
    views: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0.0 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError(f"ssim must be in [0, 1], got {self.ssim}")
        if not 0.0 <= self.transient_iou <= 1.0 + 1e-12:
            raise ValueError(f"transient IoU must be in [0, 1], got {self.transient_iou}")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["view_id", "psnr_db", "ssim", "t_iou"])
            for row in self.views:
                writer.writerow(
                    [row["view"], f"{row['psnr_db']:.6g}", f"{row['ssim']:.6g}", f"{row['transient_iou']:.6g}"]
                )
            writer.writerow(["mean", f"{self.psnr_db:.6g}", f"{self.ssim:.6g}", f"{self.transient_iou:.6g}"])

    def pretty(self) -> str:
        lines = [f"{'view':>6} {'PSNR(dB)':>10} {'SSIM':>8} {'T-IoU':>8}"]
        for row in self.views:
            lines.append(
                f"{row['view']:>6} {row['psnr_db']:>10.3f} {row['ssim']:>8.4f} {row['transient_iou']:>8.4f}"
            )
        lines.append(f"{'mean':>6} {self.psnr_db:>10.3f} {self.ssim:>8.4f} {self.transient_iou:>8.4f}")
        return "\n".join(lines)


def evaluate(
    rendered: list[TransientVideo],
    reference: list[TransientVideo],
    gamma: float = 1.0,
    view_names: list | None = None,
) -> EvalReport:
    """Score rendered views against references in raw count space.

    ``gamma`` undoes the training-time compression on the rendered videos
    (reference videos are assumed raw). PSNR/SSIM run on time-integrated
    tonemapped images; IoU on the raw transients. Infinite PSNR values are
    kept per view but excluded from the mean when finite views exist.
    """
    if len(rendered) != len(reference):
        raise ShapeError(f"got {len(rendered)} rendered vs {len(reference)} reference views")
    if not rendered:
        raise ShapeError("need at least one view to evaluate")
    rows = []
    for i, (ren, ref) in enumerate(zip(rendered, reference)):
        ren_raw = ren.data.astype(np.float64)
        if gamma != 1.0:
            ren_raw = np.maximum(ren_raw, 0.0) ** gamma
        ref_raw = ref.data.astype(np.float64)
        img_ren = integrate_and_tonemap(ren_raw)
        img_ref = integrate_and_tonemap(ref_raw)
        name = view_names[i] if view_names else i
        rows.append(
            {
                "view": name,
                "psnr_db": psnr(img_ren, img_ref),
                "ssim": ssim(img_ren, img_ref),
                "transient_iou": video_iou(ref_raw, ren_raw),
            }
        )
    finite = [r["psnr_db"] for r in rows if math.isfinite(r["psnr_db"])]
    mean_psnr = float(np.mean(finite)) if finite else PSNR_INFINITE
    return EvalReport(
        psnr_db=mean_psnr,
        ssim=float(np.mean([r["ssim"] for r in rows])),
        transient_iou=float(np.mean([r["transient_iou"] for r in rows])),
        views=rows,
    )
