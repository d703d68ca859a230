"""Peak-time imaging and PNG output tests.

Hand oracles:
    hsv(0, 1, 1) = red, hsv(1/3, 1, 1) = green, hsv(1/6, 1, 1) = yellow.
    Screen blend: 1 - (1 - 0.7*1)(1 - 0.5) = 0.85.
    Isochrone band at half period: 0.5*(1 + cos(pi)) = 0, so the value
    factor bottoms out at BAND_FLOOR = 0.55.
"""

import numpy as np
import pytest
from PIL import Image

from tfield.core import ConfigError, ShapeError, TransientVideo
from tfield.viz import (
    PeakTimeImage,
    composite_over_image,
    hsv_to_rgb,
    normalize_frames,
    peak_time_image,
    save_frame_sequence,
    save_png,
)


# ── HSV conversion ───────────────────────────────────────────────────────

def test_hsv_primary_hues():
    h = np.array([0.0, 1.0 / 6.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0])
    ones = np.ones_like(h)
    rgb = hsv_to_rgb(h, ones, ones)
    expect = np.array([
        [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 1, 1], [0, 0, 1], [1, 0, 0],  # h=1 wraps back to red
    ], dtype=np.float64)
    assert np.allclose(rgb, expect, atol=1e-12)


def test_hsv_zero_saturation_is_gray():
    rgb = hsv_to_rgb(np.array([0.37]), np.array([0.0]), np.array([0.6]))
    assert np.allclose(rgb, [[0.6, 0.6, 0.6]])


# ── peak-time reduction ──────────────────────────────────────────────────

def _pulse_video():
    data = np.zeros((2, 2, 1, 8), dtype=np.float64)
    data[0, 0, 0, 2] = 4.0   # global peak
    data[0, 1, 0, 5] = 2.0
    data[1, 1, 0, 0] = 1.0   # pixel (1, 0) stays dark
    return data


def test_peak_time_hue_and_value():
    img = peak_time_image(_pulse_video())
    assert np.array_equal(img.peak_bin, [[2, 5], [0, 0]])
    assert np.allclose(img.hue, np.array([[2, 5], [0, 0]]) / 8.0)
    assert np.allclose(img.value, [[1.0, 0.5], [0.0, 0.25]])


def test_peak_time_invariant_to_global_scale():
    a = peak_time_image(_pulse_video())
    b = peak_time_image(17.0 * _pulse_video())
    assert np.array_equal(a.peak_bin, b.peak_bin)
    assert np.allclose(a.hue, b.hue) and np.allclose(a.value, b.value)


def test_peak_time_reduces_channels_by_mean():
    data = np.zeros((1, 1, 2, 4))
    data[0, 0, 0, 0] = 3.0
    data[0, 0, 1, 1] = 4.0
    # channel mean is [1.5, 2.0, 0, 0]: the joint peak sits in bin 1 even
    # though channel 0 alone peaks in bin 0
    img = peak_time_image(data)
    assert img.peak_bin[0, 0] == 1


def test_peak_time_accepts_video_objects_and_rejects_bad_rank():
    video = TransientVideo(_pulse_video().astype(np.float32), 16e-12)
    img = peak_time_image(video, isochrone_period_bins=4)
    assert img.isochrone_period_bins == 4
    with pytest.raises(ShapeError):
        peak_time_image(np.zeros((2, 2, 8)))


def test_peak_time_image_validation():
    with pytest.raises(ConfigError):
        PeakTimeImage(hue=np.zeros((1, 1)), value=np.zeros((1, 1)),
                      peak_bin=np.zeros((1, 1), dtype=int),
                      isochrone_period_bins=0)
    with pytest.raises(ShapeError):
        PeakTimeImage(hue=np.zeros((1, 1)), value=np.full((1, 1), 1.5),
                      peak_bin=np.zeros((1, 1), dtype=int))


def test_to_rgb_full_value_peak_is_pure_hue():
    img = peak_time_image(_pulse_video())
    rgb = img.to_rgb()
    # pixel (0, 0): hue 2/8 = 1/4, value 1
    assert np.allclose(rgb[0, 0], hsv_to_rgb(0.25, 1.0, 1.0), atol=1e-12)
    # the dark pixel renders black
    assert np.allclose(rgb[1, 0], 0.0)


def test_isochrone_band_floor_at_half_period():
    value = np.ones((1, 2))
    peak = np.array([[0, 8]])
    img = PeakTimeImage(hue=np.zeros((1, 2)), value=value, peak_bin=peak,
                        isochrone_period_bins=16)
    rgb = img.to_rgb(isochrones=True)
    # band = 1 at peak_bin 0 (full value), cos(pi) = -1 at bin 8 (floor)
    assert np.isclose(rgb[0, 0].max(), 1.0)
    assert np.isclose(rgb[0, 1].max(), 0.55)


# ── compositing and normalization ────────────────────────────────────────

def test_screen_blend_hand_value():
    out = composite_over_image(np.array([[1.0]]), np.array([[0.5]]), weight=0.7)
    assert np.isclose(out[0, 0], 0.85)


def test_screen_blend_identity_edges():
    base = np.random.default_rng(0).random((3, 3))
    assert np.allclose(composite_over_image(np.zeros((3, 3)), base), base)
    frame = np.random.default_rng(1).random((3, 3))
    assert np.allclose(composite_over_image(frame, np.zeros((3, 3)), weight=1.0),
                       frame)


def test_screen_blend_broadcasts_gray_over_rgb():
    frame = np.full((2, 2), 0.5)
    base = np.zeros((2, 2, 3))
    out = composite_over_image(frame, base, weight=1.0)
    assert out.shape == (2, 2, 3)
    assert np.allclose(out, 0.5)


def test_normalize_frames():
    frames = np.array([[[0.0, 2.0]], [[4.0, 1.0]]])
    out = normalize_frames(frames)
    assert out.max() == 1.0 and np.allclose(out, frames / 4.0)
    assert np.all(normalize_frames(np.zeros((2, 2, 2))) == 0.0)


# ── PNG output ───────────────────────────────────────────────────────────

def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.random((5, 4, 3))
    path = tmp_path / "img.png"
    save_png(path, img)
    back = np.asarray(Image.open(path))
    assert back.shape == (5, 4, 3)
    assert np.array_equal(back, np.round(img * 255.0).astype(np.uint8))


def test_png_squeezes_single_channel_and_rejects_bad_rank(tmp_path):
    save_png(tmp_path / "gray.png", np.zeros((4, 4, 1)))
    assert np.asarray(Image.open(tmp_path / "gray.png")).shape == (4, 4)
    with pytest.raises(ShapeError):
        save_png(tmp_path / "bad.png", np.zeros((2, 2, 2, 2)))


def test_frame_sequence_names_and_content(tmp_path):
    frames = np.stack([np.full((3, 3), 0.0), np.full((3, 3), 0.5),
                       np.full((3, 3), 1.0)])
    paths = save_frame_sequence(frames, tmp_path / "seq", prefix="f")
    assert [p.name for p in paths] == ["f_000000.png", "f_000001.png",
                                       "f_000002.png"]
    assert all(p.exists() for p in paths)
    mid = np.asarray(Image.open(paths[1]))
    assert np.all(mid == 128)  # round(0.5 * 255)
