"""Core type and geometry tests.

Pixel-to-ray math used as the hand oracle throughout:
    dir_cam = [(u + 0.5 - cx)/fx, (v + 0.5 - cy)/fy, 1],  normalized,
    dir_world = R @ dir_cam  with R = cam_to_world[:3, :3].
"""

import numpy as np
import pytest

from tfield.core import (
    CONSTANTS,
    CameraError,
    CameraModel,
    InvalidDataError,
    ShapeError,
    TransientHistogram,
    TransientVideo,
    camera_ray_grid,
    look_at_pose,
    pixel_to_ray,
    shift_bins,
)


def _camera(width=8, height=6, fx=10.0, fy=10.0, pose=None):
    if pose is None:
        pose = np.eye(4)
    return CameraModel(fx=fx, fy=fy, cx=width / 2, cy=height / 2,
                       width=width, height=height, cam_to_world=pose)


# ── constants ────────────────────────────────────────────────────────────

def test_speed_of_light_is_exact_si_value():
    assert CONSTANTS.c == 299792458.0


# ── TransientHistogram ───────────────────────────────────────────────────

def test_histogram_total_and_peak():
    h = TransientHistogram(bins=np.array([0.0, 2.0, 5.0, 1.0]), bin_width_s=16e-12)
    assert h.total() == 8.0
    assert h.peak_bin() == 2


def test_histogram_rejects_negative_bin_width():
    with pytest.raises(ValueError):
        TransientHistogram(bins=np.zeros(4), bin_width_s=-1e-12)


def test_histogram_rejects_non_finite():
    with pytest.raises(InvalidDataError):
        TransientHistogram(bins=np.array([1.0, np.nan]), bin_width_s=1e-12)


# ── shift_bins ───────────────────────────────────────────────────────────

def test_integer_shift_moves_mass_exactly():
    v = np.array([0.0, 1.0, 0.0, 0.0])
    out = shift_bins(v, 2.0)
    assert np.allclose(out, [0.0, 0.0, 0.0, 1.0])


def test_fractional_shift_splits_linearly():
    # unit mass at bin 1 shifted by 0.25 puts 0.75 in bin 1, 0.25 in bin 2
    v = np.array([0.0, 1.0, 0.0, 0.0])
    out = shift_bins(v, 0.25)
    assert np.allclose(out, [0.0, 0.75, 0.25, 0.0])


def test_shift_clips_mass_past_the_window():
    v = np.array([0.0, 0.0, 0.0, 1.0])
    out = shift_bins(v, 1.0)
    assert np.allclose(out, 0.0)


def test_negative_shift_moves_mass_earlier():
    v = np.array([0.0, 0.0, 1.0, 0.0])
    out = shift_bins(v, -1.0)
    assert np.allclose(out, [0.0, 1.0, 0.0, 0.0])


def test_shift_by_zero_is_identity():
    rng = np.random.default_rng(3)
    v = rng.random(16)
    assert np.allclose(shift_bins(v, 0.0), v)


def test_shift_preserves_mass_in_interior():
    # shifts that keep all mass inside the window conserve the total
    rng = np.random.default_rng(4)
    v = np.zeros(32)
    v[10:14] = rng.random(4)
    for delta in (0.3, 2.7, -1.5, 5.0):
        assert np.isclose(shift_bins(v, delta).sum(), v.sum())


def test_shift_broadcasts_per_row_deltas():
    v = np.zeros((2, 8))
    v[:, 3] = 1.0
    out = shift_bins(v, np.array([[1.0], [2.0]]))
    assert np.allclose(out[0], np.eye(8)[4])
    assert np.allclose(out[1], np.eye(8)[5])


# ── TransientVideo ───────────────────────────────────────────────────────

def test_video_shape_accessors():
    tv = TransientVideo(np.zeros((4, 6, 1, 16), dtype=np.float32), 16e-12)
    assert (tv.height, tv.width, tv.channels, tv.n_bins) == (4, 6, 1, 16)


def test_video_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        TransientVideo(np.zeros((4, 6, 16)), 16e-12)


# ── cameras and rays ─────────────────────────────────────────────────────

def test_center_pixel_ray_points_down_optical_axis():
    cam = _camera(width=8, height=8, fx=11.0, fy=11.0)
    # coordinates are continuous: the on-axis point is exactly (cx, cy)
    ray = pixel_to_ray(cam, cam.cx, cam.cy)
    assert np.allclose(ray.direction, [0.0, 0.0, 1.0])
    assert np.allclose(ray.origin, 0.0)


def test_pixel_ray_matches_hand_computed_direction():
    cam = _camera(width=8, height=6, fx=10.0, fy=12.0)
    u, v = 6.5, 1.5
    d = np.array([(u - cam.cx) / 10.0, (v - cam.cy) / 12.0, 1.0])
    d /= np.linalg.norm(d)
    ray = pixel_to_ray(cam, u, v)
    assert np.allclose(ray.direction, d, atol=1e-12)


def test_pose_rotates_and_translates_rays():
    # 90 deg rotation about +y maps camera +z to world +x
    pose = np.eye(4)
    pose[:3, :3] = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    pose[:3, 3] = [1.0, 2.0, 3.0]
    cam = _camera(width=8, height=8, pose=pose)
    ray = pixel_to_ray(cam, cam.cx, cam.cy)
    assert np.allclose(ray.direction, [1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(ray.origin, [1.0, 2.0, 3.0])


def test_camera_ray_grid_matches_pixelwise_calls():
    cam = _camera(width=5, height=4)
    origin, dirs = camera_ray_grid(cam)
    assert dirs.shape == (4, 5, 3)
    for v in range(4):
        for u in range(5):
            ray = pixel_to_ray(cam, u + 0.5, v + 0.5)
            assert np.allclose(dirs[v, u], ray.direction, atol=1e-12)
            assert np.allclose(origin, ray.origin)


def test_ray_directions_are_unit_norm():
    cam = _camera(width=9, height=7, fx=4.0, fy=4.0)
    _, dirs = camera_ray_grid(cam)
    assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)


def test_camera_rejects_bad_pose_shape():
    with pytest.raises(CameraError):
        _camera(pose=np.eye(3))


def test_camera_dict_round_trip():
    pose = look_at_pose(np.array([0.1, -0.2, 0.3]), np.zeros(3))
    cam = _camera(pose=pose)
    back = CameraModel.from_dict(cam.to_dict())
    assert np.allclose(back.cam_to_world, cam.cam_to_world)
    assert (back.fx, back.fy, back.cx, back.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)
    assert (back.width, back.height) == (cam.width, cam.height)


def test_look_at_pose_aims_camera_z_at_target():
    eye = np.array([0.2, 0.1, 0.4])
    target = np.array([0.0, 0.0, 0.0])
    pose = look_at_pose(eye, target)
    fwd = (target - eye) / np.linalg.norm(target - eye)
    assert np.allclose(pose[:3, 2], fwd, atol=1e-12)
    assert np.allclose(pose[:3, 3], eye)
    # orthonormal rotation
    r = pose[:3, :3]
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
