"""Visualization: peak-time images, isochrone bands, composites, PNG output.

A peak-time image encodes when each pixel saw its brightest light: hue is
the argmax bin through a cyclic colormap, brightness the (normalized) peak
magnitude, optionally modulated into bands of equal total path time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ConfigError, ShapeError, TransientVideo

DEFAULT_ISOCHRONE_PERIOD = 16
# screen-blend weight of the transient frame in composites
COMPOSITE_WEIGHT = 0.7
# isochrone bands scale brightness between these bounds
BAND_FLOOR = 0.55


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV to RGB, all components in [0, 1]. Returns (..., 3)."""
    h = np.asarray(h, dtype=np.float64) % 1.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


@dataclass
class PeakTimeImage:
    """Per-pixel peak timing (hue) and magnitude (value) of a transient video.

    hue is argmax_bin / n_bins, so it depends only on timing; value is the
    peak magnitude normalized to [0, 1]. isochrone_period_bins controls the
    spacing of equal-path-time brightness bands in ``to_rgb``.
    """

    hue: np.ndarray
    value: np.ndarray
    peak_bin: np.ndarray
    isochrone_period_bins: int = DEFAULT_ISOCHRONE_PERIOD

    def __post_init__(self) -> None:
        if self.isochrone_period_bins < 1:
            raise ConfigError(
                f"isochrone period must be a positive bin count, got {self.isochrone_period_bins}"
            )
        if self.value.size and (self.value.min() < 0.0 or self.value.max() > 1.0):
            raise ShapeError("peak values must be normalized to [0, 1]")

    def to_rgb(self, isochrones: bool = False) -> np.ndarray:
        """Render to an RGB array in [0, 1], optionally with time bands."""
        value = self.value
        if isochrones:
            phase = 2.0 * np.pi * self.peak_bin / self.isochrone_period_bins
            band = 0.5 * (1.0 + np.cos(phase))
            value = value * (BAND_FLOOR + (1.0 - BAND_FLOOR) * band)
        return hsv_to_rgb(self.hue, np.ones_like(self.hue), value)


def peak_time_image(
    video: TransientVideo | np.ndarray,
    isochrone_period_bins: int = DEFAULT_ISOCHRONE_PERIOD,
) -> PeakTimeImage:
    """Reduce a transient video to its per-pixel peak time and magnitude.

    Multi-channel videos are reduced over the channel mean. Hue comes only
    from the argmax bin, so it is invariant to any positive global scaling
    of the video.
    """
    data = video.data if isinstance(video, TransientVideo) else np.asarray(video)
    if data.ndim != 4:
        raise ShapeError(f"expected (h, w, c, n) video data, got shape {data.shape}")
    mean = data.astype(np.float64).mean(axis=2)
    n_bins = mean.shape[-1]
    peak_bin = np.argmax(mean, axis=-1)
    peak_val = np.take_along_axis(mean, peak_bin[..., None], axis=-1)[..., 0]
    top = float(peak_val.max(initial=0.0))
    value = peak_val / top if top > 0 else np.zeros_like(peak_val)
    return PeakTimeImage(
        hue=peak_bin.astype(np.float64) / n_bins,
        value=value,
        peak_bin=peak_bin,
        isochrone_period_bins=isochrone_period_bins,
    )


def composite_over_image(
    frame: np.ndarray,
    base: np.ndarray,
    weight: float = COMPOSITE_WEIGHT,
) -> np.ndarray:
    """Screen-blend a transient frame over a background image.

    Both inputs are in [0, 1]; the frame is scaled by ``weight`` first, so
    dark frame regions leave the background untouched. Grayscale inputs
    broadcast against RGB ones.
    """
    frame = np.asarray(frame, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if frame.ndim == 2 and base.ndim == 3:
        frame = frame[..., None]
    if base.ndim == 2 and frame.ndim == 3:
        base = base[..., None]
    return 1.0 - (1.0 - np.clip(weight * frame, 0.0, 1.0)) * (1.0 - np.clip(base, 0.0, 1.0))


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """Scale a frame stack to [0, 1] by its global maximum (zeros stay zero)."""
    frames = np.asarray(frames, dtype=np.float64)
    top = float(frames.max(initial=0.0))
    return frames / top if top > 0 else np.zeros_like(frames)


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] float image (H, W) or (H, W, 3) as an 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3):
        raise ShapeError(f"image must be (h, w) or (h, w, 3), got shape {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(Path(path))


def save_frame_sequence(
    frames: np.ndarray,
    out_dir: str | Path,
    prefix: str = "frame",
) -> list[Path]:
    """Write a (n, h, w) or (n, h, w, c) stack as zero-padded PNG frames."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    paths = []
    for i, frame in enumerate(frames):
        p = out_dir / f"{prefix}_{i:06d}.png"
        save_png(p, frame)
        paths.append(p)
    return paths
