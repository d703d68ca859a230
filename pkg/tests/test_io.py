"""I/O round-trip and corruption tests for every on-disk format."""

import numpy as np
import pytest

from tfield.core import CameraModel, InvalidDataError, TransientVideo, look_at_pose
from tfield.io import (
    load_dataset,
    load_train_sidecar,
    load_yaml_config,
    read_camera,
    read_loss_log,
    read_manifest,
    read_trajectory,
    read_transient_video,
    save_train_sidecar,
    write_camera,
    write_loss_log,
    write_manifest,
    write_trajectory,
    write_transient_video,
)


def _video(seed=0, h=3, w=4, c=1, n=6, t0=0.0):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.0, 9.0, (h, w, c, n)).astype(np.float32)
    return TransientVideo(data, 16e-12, t0_offset_bins=t0)


def _camera(eye=(0.1, -0.2, 0.4)):
    pose = look_at_pose(eye, (0.0, 0.0, 0.0))
    return CameraModel(fx=20.0, fy=21.0, cx=8.0, cy=7.5, width=16, height=15,
                       cam_to_world=pose)


# ── transient video binary format ────────────────────────────────────────

def test_video_round_trip(tmp_path):
    v = _video(t0=2.5)
    p = tmp_path / "v.trv"
    write_transient_video(p, v)
    back = read_transient_video(p)
    assert np.array_equal(back.data, v.data)
    assert back.bin_width_s == v.bin_width_s
    assert back.t0_offset_bins == 2.5


def test_video_write_is_deterministic(tmp_path):
    v = _video()
    a, b = tmp_path / "a.trv", tmp_path / "b.trv"
    write_transient_video(a, v)
    write_transient_video(b, v)
    assert a.read_bytes() == b.read_bytes()


def test_video_rejects_bad_magic(tmp_path):
    p = tmp_path / "v.trv"
    write_transient_video(p, _video())
    raw = bytearray(p.read_bytes())
    raw[:4] = b"JUNK"
    p.write_bytes(bytes(raw))
    with pytest.raises(InvalidDataError, match="magic"):
        read_transient_video(p)


def test_video_rejects_truncation(tmp_path):
    p = tmp_path / "v.trv"
    write_transient_video(p, _video())
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(InvalidDataError):
        read_transient_video(p)
    p.write_bytes(raw[:10])  # shorter than the header
    with pytest.raises(InvalidDataError, match="short"):
        read_transient_video(p)


# ── cameras and trajectories ─────────────────────────────────────────────

def test_camera_round_trip(tmp_path):
    cam = _camera()
    p = tmp_path / "cam.json"
    write_camera(p, cam)
    back = read_camera(p)
    assert back.fx == cam.fx and back.fy == cam.fy
    assert back.width == cam.width and back.height == cam.height
    assert np.allclose(back.cam_to_world, cam.cam_to_world)


def test_trajectory_round_trip(tmp_path):
    cams = [_camera(eye=(0.3 * k, -0.2, 0.4)) for k in range(1, 5)]
    p = tmp_path / "traj.json"
    write_trajectory(p, cams)
    back = read_trajectory(p)
    assert len(back) == 4
    for orig, got in zip(cams, back):
        assert np.allclose(got.cam_to_world, orig.cam_to_world)
        assert got.fx == orig.fx and got.width == orig.width


def test_empty_trajectory_rejected(tmp_path):
    with pytest.raises(InvalidDataError):
        write_trajectory(tmp_path / "traj.json", [])


def test_trajectory_without_poses_rejected(tmp_path):
    p = tmp_path / "traj.json"
    p.write_text('{"intrinsics": {}}')
    with pytest.raises(InvalidDataError, match="poses"):
        read_trajectory(p)


# ── manifest and dataset loading ─────────────────────────────────────────

def test_dataset_loads_views_relative_to_manifest(tmp_path):
    videos = [_video(seed=k) for k in range(3)]
    cams = [_camera(eye=(0.4, 0.1 * k, 0.3)) for k in range(1, 4)]
    views = []
    for k, (v, cam) in enumerate(zip(videos, cams)):
        write_transient_video(tmp_path / f"view_{k}.trv", v)
        write_camera(tmp_path / f"cam_{k}.json", cam)
        views.append({"video": f"view_{k}.trv", "camera": f"cam_{k}.json"})
    write_manifest(tmp_path / "manifest.json",
                   {"views": views, "normalization_scale": 7.5})

    got_videos, got_cams, manifest = load_dataset(tmp_path / "manifest.json")
    assert len(got_videos) == 3 and len(got_cams) == 3
    assert manifest["normalization_scale"] == 7.5
    for orig, got in zip(videos, got_videos):
        assert np.array_equal(got.data, orig.data)


def test_manifest_round_trip(tmp_path):
    doc = {"views": [], "seed": 3, "nested": {"a": [1, 2]}}
    p = tmp_path / "manifest.json"
    write_manifest(p, doc)
    assert read_manifest(p) == doc


# ── yaml config ──────────────────────────────────────────────────────────

def test_yaml_config_reads_mapping(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("grid:\n  resolution: [4, 4, 4]\ntrain:\n  lr: 0.1\n")
    cfg = load_yaml_config(p)
    assert cfg["grid"]["resolution"] == [4, 4, 4]
    assert cfg["train"]["lr"] == 0.1


def test_yaml_config_empty_file_is_empty_dict(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_yaml_config(p) == {}


def test_yaml_config_rejects_non_mapping(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(InvalidDataError):
        load_yaml_config(p)


# ── loss log ─────────────────────────────────────────────────────────────

def test_loss_log_round_trip(tmp_path):
    log = [(10, 1.25, 0.1), (20, 0.5, 0.1), (30, 0.03125, 0.033)]
    p = tmp_path / "loss.csv"
    write_loss_log(p, log)
    assert read_loss_log(p) == log
    header = p.read_text().splitlines()[0]
    assert header == "iteration,loss,lr"


def test_loss_log_rejects_foreign_csv(tmp_path):
    p = tmp_path / "other.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(InvalidDataError):
        read_loss_log(p)


# ── training sidecar ─────────────────────────────────────────────────────

def test_sidecar_round_trip(tmp_path):
    ck = tmp_path / "model.tfg"
    ck.write_bytes(b"placeholder")
    meta = {"iteration": 40, "normalization_scale": 2.5, "lr": 0.01}
    adam = {
        "m": {"density_raw": np.arange(4.0), "transient_raw": np.ones(3)},
        "v": {"density_raw": np.arange(4.0) ** 2, "transient_raw": np.full(3, 0.5)},
        "step": 40,
    }
    save_train_sidecar(ck, meta, adam)
    got_meta, got_adam = load_train_sidecar(ck)
    assert got_meta == meta
    assert got_adam["step"] == 40
    assert np.array_equal(got_adam["m"]["density_raw"], np.arange(4.0))
    assert np.array_equal(got_adam["v"]["transient_raw"], np.full(3, 0.5))


def test_sidecar_without_adam(tmp_path):
    ck = tmp_path / "model.tfg"
    ck.write_bytes(b"placeholder")
    save_train_sidecar(ck, {"iteration": 1})
    meta, adam = load_train_sidecar(ck)
    assert meta == {"iteration": 1}
    assert adam is None
    assert not (tmp_path / "model.tfg.adam.npz").exists()


def test_sidecar_adam_bytes_are_deterministic(tmp_path):
    """Rewriting the same moments must give identical bytes (no timestamps)."""
    adam = {
        "m": {"w": np.linspace(0, 1, 5)},
        "v": {"w": np.linspace(1, 2, 5)},
        "step": 7,
    }
    ck_a = tmp_path / "a.tfg"
    ck_b = tmp_path / "b.tfg"
    for ck in (ck_a, ck_b):
        ck.write_bytes(b"x")
        save_train_sidecar(ck, {"k": 1}, adam)
    a = (tmp_path / "a.tfg.adam.npz").read_bytes()
    b = (tmp_path / "b.tfg.adam.npz").read_bytes()
    assert a == b
