"""Core domain types shared across the toolkit.

Conventions fixed here and relied on everywhere else:

* cameras look down +z in their own frame with image y pointing down;
  integer pixel (i, j) has its center at continuous (u, v) = (i + 0.5, j + 0.5)
* histogram bin n covers [n*W, (n+1)*W) seconds of arrival time relative to
  the time origin; t0_offset_bins moves that origin
* a positive histogram shift moves mass toward later bins; fractional shifts
  use linear interpolation between the two straddling integer shifts
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT_M_S = 299_792_458.0


class ShapeError(ValueError):
    """Array shapes disagree with the operation's contract."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class InvalidInputError(ValueError):
    """A numeric input is non-finite or outside the operation's domain."""


class InvalidDataError(ValueError):
    """Measured data violates its invariants (negative or non-finite counts)."""


class CameraError(ValueError):
    """Camera intrinsics or pose are invalid."""


class NumericalError(RuntimeError):
    """A numerical failure such as non-finite gradients mid-optimization."""


@dataclass(frozen=True)
class PhysicalConstants:
    """Physical constants used by the delay and warping math (SI units)."""

    c: float = SPEED_OF_LIGHT_M_S


CONSTANTS = PhysicalConstants()


@dataclass
class TransientHistogram:
    """A single pixel's time-resolved intensity.

    bins[n] is the (expected or measured) intensity arriving during
    [n*W, (n+1)*W) seconds, with W = bin_width_s. t0_offset_bins shifts the
    time origin and may be fractional.
    """

    bins: np.ndarray
    bin_width_s: float
    t0_offset_bins: float = 0.0

    def __post_init__(self) -> None:
        self.bins = np.asarray(self.bins)
        if self.bins.dtype.kind in "iu":
            self.bins = self.bins.astype(np.float64)
        if self.bins.ndim != 1 or self.bins.size < 1:
            raise ShapeError(f"histogram bins must be a 1-d vector, got shape {self.bins.shape}")
        if not np.all(np.isfinite(self.bins)):
            raise InvalidDataError("histogram bins must be finite")
        if np.any(self.bins < 0):
            raise InvalidDataError("histogram bins must be nonnegative")
        if not (np.isfinite(self.bin_width_s) and self.bin_width_s > 0):
            raise ConfigError(f"bin_width_s must be positive, got {self.bin_width_s}")
        if not np.isfinite(self.t0_offset_bins):
            raise ConfigError("t0_offset_bins must be finite")

    @property
    def n_bins(self) -> int:
        return int(self.bins.size)

    def total(self) -> float:
        return float(self.bins.sum())

    def peak_bin(self) -> int:
        return int(np.argmax(self.bins))


def shift_bins(values: np.ndarray, delta_bins) -> np.ndarray:
    """Shift histogram mass along the last axis by delta_bins (may be fractional).

    Positive delta moves mass toward later bins. With delta = k + f,
    k = floor(delta) and f in [0, 1):

        out[n] = (1 - f) * values[n - k] + f * values[n - k - 1]

    Out-of-range reads are zero, so mass shifted past either end is dropped.
    delta_bins broadcasts against the leading axes of values.
    """
    v = np.asarray(values)
    if v.ndim < 1 or v.shape[-1] < 1:
        raise ShapeError(f"values must have at least one bin, got shape {v.shape}")
    n = v.shape[-1]
    d = np.asarray(delta_bins, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("delta_bins must be finite")
    k = np.floor(d).astype(np.int64)
    out_dtype = np.result_type(v.dtype, np.float32)
    f = (d - k).astype(out_dtype)[..., None]

    base = np.arange(n, dtype=np.int64)
    idx0 = base - k[..., None]
    full = np.broadcast_shapes(v.shape[:-1], idx0.shape[:-1]) + (n,)
    idx0 = np.broadcast_to(idx0, full)
    vb = np.broadcast_to(v, full)

    out = (1.0 - f) * _take_or_zero(vb, idx0) + f * _take_or_zero(vb, idx0 - 1)
    return out.astype(out_dtype, copy=False)


def _take_or_zero(v: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n = v.shape[-1]
    valid = (idx >= 0) & (idx < n)
    g = np.take_along_axis(v, np.clip(idx, 0, n - 1), axis=-1)
    return np.where(valid, g, 0)


def shift_histogram(hist: TransientHistogram, delta_bins: float) -> TransientHistogram:
    """Return hist with its mass moved delta_bins later (earlier if negative)."""
    if not np.isscalar(delta_bins) and np.asarray(delta_bins).ndim != 0:
        raise ShapeError("shift_histogram takes a scalar delta; use shift_bins for batches")
    shifted = shift_bins(hist.bins, float(delta_bins))
    return TransientHistogram(shifted, hist.bin_width_s, hist.t0_offset_bins)


@dataclass
class CameraModel:
    """Pinhole camera with a rigid cam-to-world pose.

    The rotation maps camera axes to world axes; camera +z is the viewing
    direction and camera +y points down in the image.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray

    def __post_init__(self) -> None:
        intr = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(x) for x in intr):
            raise CameraError(f"non-finite intrinsics {intr}")
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise CameraError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        self.width = int(self.width)
        self.height = int(self.height)
        m = np.asarray(self.cam_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise CameraError(f"cam_to_world must be 4x4, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise CameraError("cam_to_world must be finite")
        r = m[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise CameraError("rotation block must be orthonormal with determinant +1")
        self.cam_to_world = m

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "cam_to_world": [float(x) for x in self.cam_to_world.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            mat = np.asarray(d["cam_to_world"], dtype=np.float64).reshape(4, 4)
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
                cam_to_world=mat,
            )
        except KeyError as e:
            raise ConfigError(f"camera JSON missing key {e}") from e


@dataclass
class Ray:
    """A world-space ray with unit direction and an integration range."""

    origin: np.ndarray
    direction: np.ndarray
    s_near: float = 0.0
    s_far: float = np.inf

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.origin)) and np.all(np.isfinite(self.direction))):
            raise InvalidInputError("ray origin and direction must be finite")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise InvalidInputError("ray direction must be unit length (tolerance 1e-9)")
        if not (0.0 <= self.s_near < self.s_far):
            raise InvalidInputError(f"need 0 <= s_near < s_far, got [{self.s_near}, {self.s_far}]")


def pixel_to_ray(cam: CameraModel, u: float, v: float) -> Ray:
    """Map a continuous pixel coordinate to its world-space viewing ray.

    direction = normalize(R @ [(u - cx)/fx, (v - cy)/fy, 1]); the origin is
    the camera center. u spans [0, width), v spans [0, height).
    """
    if not (np.isfinite(u) and np.isfinite(v)):
        raise InvalidInputError(f"pixel coordinates must be finite, got ({u}, {v})")
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        raise InvalidInputError(
            f"pixel ({u}, {v}) outside image [0, {cam.width}) x [0, {cam.height})"
        )
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    d = cam.rotation @ d_cam
    d /= np.linalg.norm(d)
    return Ray(origin=cam.origin.copy(), direction=d)


def camera_ray_grid(cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Rays for every pixel center: returns (origin (3,), directions (H, W, 3))."""
    u = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return cam.origin.copy(), d


def look_at_pose(position, target, world_up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Build a cam-to-world matrix looking from position toward target.

    Camera +z points at the target and camera +y points as far down the
    world_up axis as possible (image y runs downward).
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise InvalidInputError("camera position and target coincide")
    z = fwd / norm
    down = -np.asarray(world_up, dtype=np.float64)
    y = down - np.dot(down, z) * z
    ynorm = np.linalg.norm(y)
    if ynorm < 1e-9:
        # looking straight along world_up; fall back to world x for image down
        y = np.array([1.0, 0.0, 0.0]) - z * z[0]
        ynorm = np.linalg.norm(y)
    y /= ynorm
    x = np.cross(y, z)
    m = np.eye(4)
    m[:3, 0] = x
    m[:3, 1] = y
    m[:3, 2] = z
    m[:3, 3] = position
    return m


@dataclass
class TransientVideo:
    """A transient video: one histogram per pixel and channel.

    data has shape (height, width, channels, n_bins); all pixels share
    bin_width_s and t0_offset_bins. metadata carries free-form provenance
    (scene name, seeds, normalization scale).
    """

    data: np.ndarray
    bin_width_s: float
    t0_offset_bins: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.dtype.kind in "iu":
            self.data = self.data.astype(np.float32)
        if self.data.ndim != 4:
            raise ShapeError(
                f"video data must be (height, width, channels, n_bins), got {self.data.shape}"
            )
        if self.data.shape[2] not in (1, 3):
            raise ShapeError(f"channels must be 1 or 3, got {self.data.shape[2]}")
        if not (np.isfinite(self.bin_width_s) and self.bin_width_s > 0):
            raise ConfigError(f"bin_width_s must be positive, got {self.bin_width_s}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def n_bins(self) -> int:
        return self.data.shape[3]

    def pixel(self, row: int, col: int, channel: int = 0) -> TransientHistogram:
        return TransientHistogram(
            self.data[row, col, channel].astype(np.float64),
            self.bin_width_s,
            self.t0_offset_bins,
        )
