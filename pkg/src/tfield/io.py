"""File formats: transient videos, cameras, trajectories, manifests, configs.

Binary formats are little-endian with fixed magic tags so a truncated or
mislabeled file fails loudly instead of decoding to garbage:

* ``TRV1`` transient video: header ``<4s4Idd`` holding magic, height, width,
  channels, n_bins, bin_width_s, t0_offset_bins, followed by float32 sample
  data in C order with shape (height, width, channels, n_bins).

Everything else is JSON, YAML, or CSV so it can be inspected and edited by
hand.
"""

from __future__ import annotations

import csv
import json
import struct
import zipfile
from io import BytesIO
from pathlib import Path

import numpy as np
import yaml

from .core import CameraModel, InvalidDataError, TransientVideo

VIDEO_MAGIC = b"TRV1"
_VIDEO_HEADER = struct.Struct("<4s4Idd")


def write_transient_video(path: str | Path, video: TransientVideo) -> None:
    """Write a transient video to a TRV1 binary file."""
    path = Path(path)
    header = _VIDEO_HEADER.pack(
        VIDEO_MAGIC,
        video.height,
        video.width,
        video.channels,
        video.n_bins,
        float(video.bin_width_s),
        float(video.t0_offset_bins),
    )
    payload = np.ascontiguousarray(video.data, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_transient_video(path: str | Path) -> TransientVideo:
    """Read a TRV1 file back into a TransientVideo.

    Raises
    ------
    InvalidDataError
        If the magic tag is wrong or the payload size does not match the
        header dimensions.
    """
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _VIDEO_HEADER.size:
        raise InvalidDataError(f"{path}: file too short for a TRV1 header")
    magic, h, w, c, n, bin_width, t0 = _VIDEO_HEADER.unpack_from(raw, 0)
    if magic != VIDEO_MAGIC:
        raise InvalidDataError(f"{path}: bad magic {magic!r}, expected {VIDEO_MAGIC!r}")
    expected = _VIDEO_HEADER.size + h * w * c * n * 4
    if len(raw) != expected:
        raise InvalidDataError(
            f"{path}: expected {expected} bytes for {h}x{w}x{c}x{n}, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_VIDEO_HEADER.size).reshape(h, w, c, n)
    return TransientVideo(data=data.copy(), bin_width_s=bin_width, t0_offset_bins=t0)


def write_camera(path: str | Path, camera: CameraModel) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(camera.to_dict(), f, indent=2)
        f.write("\n")


def read_camera(path: str | Path) -> CameraModel:
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    return CameraModel.from_dict(d)


def write_trajectory(path: str | Path, cameras: list[CameraModel]) -> None:
    """Write a camera-per-frame trajectory as JSON.

    Intrinsics are stored once (taken from the first camera, which must be
    representative); per-frame entries carry only the 4x4 pose.
    """
    if not cameras:
        raise InvalidDataError("trajectory must contain at least one camera")
    first = cameras[0].to_dict()
    doc = {
        "intrinsics": {k: first[k] for k in ("fx", "fy", "cx", "cy", "width", "height")},
        "poses": [cam.to_dict()["cam_to_world"] for cam in cameras],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def read_trajectory(path: str | Path) -> list[CameraModel]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        intr = doc["intrinsics"]
        poses = doc["poses"]
    except (KeyError, TypeError) as exc:
        raise InvalidDataError(f"{path}: trajectory needs 'intrinsics' and 'poses'") from exc
    return [CameraModel.from_dict({**intr, "cam_to_world": pose}) for pose in poses]


def write_manifest(path: str | Path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_dataset(manifest_path: str | Path) -> tuple[list[TransientVideo], list[CameraModel], dict]:
    """Load every measured view listed in a dataset manifest.

    Returns (videos, cameras, manifest). Paths in the manifest are relative
    to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent
    videos = []
    cameras = []
    for entry in manifest["views"]:
        videos.append(read_transient_video(base / entry["video"]))
        cameras.append(read_camera(base / entry["camera"]))
    return videos, cameras, manifest


def load_yaml_config(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise InvalidDataError(f"{path}: config must be a YAML mapping")
    return doc


def write_loss_log(path: str | Path, log: list[tuple[int, float, float]]) -> None:
    """Write (iteration, loss, lr) rows to CSV with a header line."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss", "lr"])
        for it, loss, lr in log:
            writer.writerow([it, f"{loss:.10g}", f"{lr:.10g}"])


def read_loss_log(path: str | Path) -> list[tuple[int, float, float]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["iteration", "loss", "lr"]:
        raise InvalidDataError(f"{path}: not a loss log")
    return [(int(r[0]), float(r[1]), float(r[2])) for r in rows[1:]]


def save_train_sidecar(checkpoint_path: str | Path, meta: dict, adam: dict | None = None) -> None:
    """Write training metadata (and optionally Adam moments) next to a checkpoint.

    The metadata lands in ``<checkpoint>.meta.json``; Adam moment arrays, when
    given, in ``<checkpoint>.adam.npz`` keyed by parameter block name with a
    scalar ``step``.
    """
    checkpoint_path = Path(checkpoint_path)
    meta_path = checkpoint_path.with_name(checkpoint_path.name + ".meta.json")
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    if adam is not None:
        arrays = {f"m_{k}": v for k, v in adam["m"].items()}
        arrays.update({f"v_{k}": v for k, v in adam["v"].items()})
        arrays["step"] = np.asarray(adam["step"], dtype=np.int64)
        _write_npz_deterministic(
            checkpoint_path.with_name(checkpoint_path.name + ".adam.npz"), arrays
        )


def _write_npz_deterministic(path: Path, arrays: dict) -> None:
    # np.savez stamps current time into the zip directory, breaking
    # byte-identical reruns; write the members with a fixed timestamp instead.
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_train_sidecar(checkpoint_path: str | Path) -> tuple[dict, dict | None]:
    """Load the metadata (and Adam moments when present) for a checkpoint."""
    checkpoint_path = Path(checkpoint_path)
    meta_path = checkpoint_path.with_name(checkpoint_path.name + ".meta.json")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    adam_path = checkpoint_path.with_name(checkpoint_path.name + ".adam.npz")
    adam = None
    if adam_path.exists():
        with np.load(adam_path) as z:
            adam = {
                "m": {k[2:]: z[k].copy() for k in z.files if k.startswith("m_")},
                "v": {k[2:]: z[k].copy() for k in z.files if k.startswith("v_")},
                "step": int(z["step"]),
            }
    return meta, adam
