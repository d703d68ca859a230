"""Analytic ground-truth simulator and SPAD measurement model.

Scenes are collections of Lambertian spheres and axis-aligned planes lit by
a pulsed point source (or a collimated beam). Light transport is evaluated
in closed form: a direct term plus a single diffuse indirect bounce gathered
over a fixed stratified set of hemisphere directions, so ground truth is
deterministic and its finite-sample bias is identical across runs.

Per-pixel ideal transients are expressed in expected photons per pulse; the
detector model then draws Poisson counts with rate P*(eta*lambda[n]) plus a
flat background P*(eta*ambient + dark) per bin. The model is only valid in
the low-flux regime (per-pulse detection probability under 5%), and
``measure`` warns when a transient violates that.

Delays are camera-referenced: a contribution from surface point x arrives at
(light-to-x path + x-to-camera distance)/c, split fractionally between the
two nearest bins and convolved with the source pulse profile.
"""

from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .core import (
    CONSTANTS,
    CameraModel,
    ConfigError,
    InvalidDataError,
    InvalidInputError,
    Ray,
    ShapeError,
    TransientHistogram,
    TransientVideo,
    camera_ray_grid,
    look_at_pose,
)

# minimum hit distance; rejects self-intersection at the ray origin
T_MIN = 1e-7
# offset along the normal for shadow/secondary ray origins
SHADOW_EPS = 1e-6
# FWHM = 2*sqrt(2*ln 2) * sigma for a Gaussian
GAUSS_FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
# per-pulse detection probability above which pileup distorts Poisson counts
LOW_FLUX_LIMIT = 0.05

DEFAULT_INDIRECT_DIRECTIONS = 256
DEFAULT_PULSE_FWHM_S = 35e-12


@dataclass
class Sphere:
    """Lambertian sphere."""

    center: np.ndarray
    radius: float
    albedo: float

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not self.radius > 0:
            raise ConfigError(f"sphere radius must be positive, got {self.radius}")
        if not 0.0 <= self.albedo <= 1.0:
            raise ConfigError(f"albedo must be in [0, 1], got {self.albedo}")


@dataclass
class AxisPlane:
    """Lambertian axis-aligned plane, optionally bounded to a rectangle.

    ``axis`` is the constant coordinate (0=x, 1=y, 2=z) and ``offset`` its
    value. ``lo``/``hi`` bound the two remaining coordinates in ascending
    axis order; None leaves the plane unbounded.
    """

    axis: int
    offset: float
    albedo: float
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.axis not in (0, 1, 2):
            raise ConfigError(f"plane axis must be 0, 1, or 2, got {self.axis}")
        if not 0.0 <= self.albedo <= 1.0:
            raise ConfigError(f"albedo must be in [0, 1], got {self.albedo}")
        if (self.lo is None) != (self.hi is None):
            raise ConfigError("plane bounds need both lo and hi (or neither)")
        if self.lo is not None:
            self.lo = np.asarray(self.lo, dtype=np.float64).reshape(2)
            self.hi = np.asarray(self.hi, dtype=np.float64).reshape(2)
            if not np.all(self.lo < self.hi):
                raise ConfigError(f"plane bounds must satisfy lo < hi, got {self.lo} {self.hi}")

    @property
    def in_plane_axes(self) -> tuple[int, int]:
        return tuple(a for a in (0, 1, 2) if a != self.axis)


@dataclass
class Light:
    """Pulsed source: a diffused point light or a collimated beam.

    For a point source ``power`` is radiant intensity and irradiance falls
    off with the inverse square of distance; for a collimated beam it is a
    flux density constant across the beam cross-section, and only points
    within ``radius`` of the beam axis are lit. The temporal profile is a
    Gaussian of the given FWHM (0 means an ideal impulse).
    """

    position: np.ndarray
    power: float = 1.0
    pulse_fwhm_s: float = DEFAULT_PULSE_FWHM_S
    kind: str = "point"
    direction: np.ndarray | None = None
    radius: float = 0.0

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.kind == "point-diffused":
            self.kind = "point"
        if self.kind not in ("point", "collimated"):
            raise ConfigError(f"light kind must be point or collimated, got {self.kind!r}")
        if not self.pulse_fwhm_s >= 0:
            raise ConfigError(f"pulse FWHM must be >= 0, got {self.pulse_fwhm_s}")
        if not self.power >= 0:
            raise ConfigError(f"light power must be >= 0, got {self.power}")
        if self.kind == "collimated":
            if self.direction is None or not self.radius > 0:
                raise ConfigError("collimated light needs a direction and a positive radius")
            self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
            norm = float(np.linalg.norm(self.direction))
            if norm == 0:
                raise ConfigError("collimated light direction must be nonzero")
            self.direction = self.direction / norm


@dataclass
class AnalyticScene:
    """Surfaces plus a pulsed light and a flat ambient photon rate per bin."""

    surfaces: list
    light: Light
    ambient_rate: float = 0.0

    def __post_init__(self) -> None:
        if not self.ambient_rate >= 0:
            raise ConfigError(f"ambient rate must be >= 0, got {self.ambient_rate}")


@dataclass
class SpadModel:
    """Single-photon detector: pulse count, efficiency, dark rate, binning."""

    pulses: int
    efficiency: float
    dark_rate: float
    n_bins: int
    bin_width_s: float

    def __post_init__(self) -> None:
        if not (int(self.pulses) == self.pulses and self.pulses > 0):
            raise ConfigError(f"pulse count must be a positive integer, got {self.pulses}")
        self.pulses = int(self.pulses)
        if not 0.0 < self.efficiency <= 1.0:
            raise ConfigError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if not self.dark_rate >= 0:
            raise ConfigError(f"dark rate must be >= 0, got {self.dark_rate}")
        if self.n_bins < 1:
            raise ConfigError(f"n_bins must be >= 1, got {self.n_bins}")
        if not self.bin_width_s > 0:
            raise ConfigError(f"bin width must be positive, got {self.bin_width_s}")

    @property
    def background_per_bin(self) -> float:
        """Expected background counts per bin at zero ambient flux."""
        return self.pulses * self.dark_rate


def orthonormal_basis(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Build tangent/bitangent vectors for unit normals, branch-free.

    Returns (t, b) with [t, b, n] orthonormal for each input normal.
    """
    n = np.asarray(normals, dtype=np.float64)
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t_vec = np.stack(
        [1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1
    )
    b_vec = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t_vec, b_vec


def stratified_hemisphere(n_dirs: int) -> np.ndarray:
    """Fixed stratified unit directions on the local +z hemisphere.

    Cell centers of a near-square grid over (azimuth, z), so the set is
    uniform in solid angle (density 1/(2*pi)) and identical across calls.
    Returns (n_dirs, 3) with [..., 2] = cos(theta).
    """
    if n_dirs < 1:
        raise ConfigError(f"need at least one direction, got {n_dirs}")
    na = int(math.sqrt(n_dirs))
    while n_dirs % na:
        na -= 1
    nz = n_dirs // na
    phi = 2.0 * np.pi * (np.arange(na) + 0.5) / na
    z = (np.arange(nz) + 0.5) / nz
    phi, z = np.meshgrid(phi, z, indexing="ij")
    phi = phi.ravel()
    z = z.ravel()
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def _intersect_sphere(origins, dirs, sphere):
    oc = origins - sphere.center
    b = np.einsum("...k,...k->...", oc, dirs)
    c = np.einsum("...k,...k->...", oc, oc) - sphere.radius**2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    t = np.where(t_near > T_MIN, t_near, t_far)
    return np.where((disc >= 0.0) & (t > T_MIN), t, np.inf)


def _intersect_plane(origins, dirs, plane):
    d_axis = dirs[..., plane.axis]
    # parallel rays never hit; guarded divide keeps them at inf
    safe = np.where(d_axis == 0.0, 1.0, d_axis)
    t = (plane.offset - origins[..., plane.axis]) / safe
    ok = (d_axis != 0.0) & (t > T_MIN)
    if plane.lo is not None:
        a0, a1 = plane.in_plane_axes
        p0 = origins[..., a0] + t * dirs[..., a0]
        p1 = origins[..., a1] + t * dirs[..., a1]
        ok &= (p0 >= plane.lo[0]) & (p0 <= plane.hi[0])
        ok &= (p1 >= plane.lo[1]) & (p1 <= plane.hi[1])
    return np.where(ok, t, np.inf)


def _intersect_surface(origins, dirs, surface):
    if isinstance(surface, Sphere):
        return _intersect_sphere(origins, dirs, surface)
    if isinstance(surface, AxisPlane):
        return _intersect_plane(origins, dirs, surface)
    raise ConfigError(f"unsupported surface type {type(surface).__name__}")


def scene_intersect(scene: AnalyticScene, origins, dirs):
    """Closest-hit query against every scene surface.

    Parameters broadcast; dirs must be unit length. Returns a tuple
    (t, index, points, normals, albedos) where misses have t = inf,
    index = -1, and zeroed geometry. Normals face the incoming ray.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.broadcast_to(origins, dirs.shape)
    shape = dirs.shape[:-1]
    t_best = np.full(shape, np.inf)
    index = np.full(shape, -1, dtype=np.int64)
    for i, surf in enumerate(scene.surfaces):
        t = _intersect_surface(origins, dirs, surf)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        index = np.where(closer, i, index)

    points = np.zeros(dirs.shape)
    normals = np.zeros(dirs.shape)
    albedos = np.zeros(shape)
    hit = index >= 0
    if np.any(hit):
        points[hit] = origins[hit] + t_best[hit, None] * dirs[hit]
        for i, surf in enumerate(scene.surfaces):
            mask = index == i
            if not np.any(mask):
                continue
            if isinstance(surf, Sphere):
                normals[mask] = (points[mask] - surf.center) / surf.radius
            else:
                n = np.zeros(3)
                n[surf.axis] = 1.0
                normals[mask] = n
            albedos[mask] = surf.albedo
        # two-sided shading: flip the normal against the incoming ray
        facing = np.einsum("...k,...k->...", normals, dirs)
        normals = np.where((facing > 0.0)[..., None], -normals, normals)
    return t_best, index, points, normals, albedos


def _any_hit(scene: AnalyticScene, origins, dirs, max_dist) -> np.ndarray:
    """True where some surface lies strictly between origin and max_dist."""
    occluded = np.zeros(np.shape(max_dist), dtype=bool)
    for surf in scene.surfaces:
        t = _intersect_surface(origins, dirs, surf)
        occluded |= t < max_dist - SHADOW_EPS
    return occluded


def _direct_radiance(scene: AnalyticScene, points, normals, albedos, active):
    """Lambertian exitant radiance at surface points due to the light.

    Returns (radiance, light_path_m): the outgoing radiance (direction
    independent for Lambertian surfaces) and the optical path length from
    the source to each point (used for the arrival delay). Shadow rays
    respect occlusion; inactive entries come back zero.
    """
    light = scene.light
    shape = np.shape(active)
    radiance = np.zeros(shape)
    if light.kind == "point":
        to_light = light.position - points
        light_path = np.linalg.norm(to_light, axis=-1)
        wi = to_light / np.maximum(light_path, 1e-300)[..., None]
        cos_l = np.einsum("...k,...k->...", normals, wi)
        falloff = 1.0 / np.maximum(light_path * light_path, 1e-300)
        occ_dist = light_path
    else:
        # collimated beam: lit iff inside the cylinder around the beam axis
        rel = points - light.position
        proj = np.einsum("...k,k->...", rel, light.direction)
        perp = rel - proj[..., None] * light.direction
        inside = (np.linalg.norm(perp, axis=-1) <= light.radius) & (proj > 0.0)
        wi = np.broadcast_to(-light.direction, points.shape)
        cos_l = np.einsum("...k,...k->...", normals, wi) * inside
        falloff = 1.0
        light_path = np.maximum(proj, 0.0)
        occ_dist = light_path

    lit = active & (cos_l > 0.0)
    if np.any(lit):
        shadow_origin = points[lit] + SHADOW_EPS * normals[lit]
        blocked = _any_hit(scene, shadow_origin, wi[lit], occ_dist[lit])
        vis = np.zeros(shape)
        vis[lit] = ~blocked
    else:
        vis = np.zeros(shape)
    radiance = light.power * albedos / np.pi * np.maximum(cos_l, 0.0) * falloff * vis
    return radiance, light_path


def pulse_kernel(fwhm_s: float, bin_width_s: float) -> np.ndarray:
    """Discrete unit-mass Gaussian pulse profile, odd length, centered.

    FWHM 0 returns the identity kernel [1]. The kernel extends 4 sigma each
    side so truncation error is negligible.
    """
    if fwhm_s < 0:
        raise ConfigError(f"pulse FWHM must be >= 0, got {fwhm_s}")
    if fwhm_s == 0.0:
        return np.ones(1)
    sigma_bins = fwhm_s / GAUSS_FWHM_TO_SIGMA / bin_width_s
    radius = max(1, int(math.ceil(4.0 * sigma_bins)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma_bins) ** 2)
    return kernel / kernel.sum()


def _deposit(buf: np.ndarray, rows: np.ndarray, delay_bins: np.ndarray, values: np.ndarray) -> None:
    """Scatter values into per-row histograms with fractional-bin splitting.

    buf is (R, n_pad); a value at fractional bin b contributes (1-f) to
    floor(b) and f to floor(b)+1. Out-of-range bins are dropped.
    """
    n_pad = buf.shape[1]
    k = np.floor(delay_bins).astype(np.int64)
    frac = delay_bins - k
    flat = rows * n_pad + k
    size = buf.size
    lo_ok = (k >= 0) & (k < n_pad)
    hi_ok = (k + 1 >= 0) & (k + 1 < n_pad)
    out = np.bincount(flat[lo_ok], weights=(values * (1.0 - frac))[lo_ok], minlength=size)
    out += np.bincount(flat[hi_ok] + 1, weights=(values * frac)[hi_ok], minlength=size)
    buf += out.reshape(buf.shape)


def ideal_transient_batch(
    scene: AnalyticScene,
    origins,
    dirs,
    n_bins: int,
    bin_width_s: float,
    n_indirect: int = DEFAULT_INDIRECT_DIRECTIONS,
) -> np.ndarray:
    """Expected photons per pulse for a batch of rays, shape (R, n_bins).

    Direct light plus one diffuse indirect bounce, each convolved with the
    source pulse and deposited at camera-referenced delays. Contributions
    landing beyond the histogram window are dropped, matching a detector
    whose gate simply ends.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise ShapeError(f"dirs must be (R, 3), got {dirs.shape}")
    n_rays = dirs.shape[0]
    cw = CONSTANTS.c * bin_width_s

    kernel = pulse_kernel(scene.light.pulse_fwhm_s, bin_width_s)
    pad = kernel.shape[0] // 2 + 1
    n_pad = n_bins + 2 * pad
    buf = np.zeros((n_rays, n_pad))

    t_cam, _, points, normals, albedos = scene_intersect(scene, origins, dirs)
    hit = np.isfinite(t_cam)
    if np.any(hit):
        rows = np.flatnonzero(hit)
        x = points[hit]
        n = normals[hit]
        alb = albedos[hit]
        cam_path = t_cam[hit]

        radiance, light_path = _direct_radiance(
            scene, x, n, alb, np.ones(rows.shape, dtype=bool)
        )
        delay = (light_path + cam_path) / cw + pad
        _deposit(buf, rows, delay, radiance)

        if n_indirect > 0:
            local = stratified_hemisphere(n_indirect)
            k_dirs = local.shape[0]
            tan, bit = orthonormal_basis(n)
            w_world = (
                local[None, :, 0, None] * tan[:, None, :]
                + local[None, :, 1, None] * bit[:, None, :]
                + local[None, :, 2, None] * n[:, None, :]
            ).reshape(-1, 3)
            o2 = np.repeat(x + SHADOW_EPS * n, k_dirs, axis=0)
            t2, _, y, ny, alb_y = scene_intersect(scene, o2, w_world)
            hit2 = np.isfinite(t2)
            if np.any(hit2):
                rad_y = np.zeros(t2.shape)
                path_y = np.zeros(t2.shape)
                rad_y[hit2], path_y[hit2] = _direct_radiance(
                    scene,
                    y[hit2],
                    ny[hit2],
                    alb_y[hit2],
                    np.ones(int(hit2.sum()), dtype=bool),
                )
                # uniform hemisphere estimator: (2 rho_x / K) sum L_y cos(theta_k)
                cos_k = np.tile(local[:, 2], rows.shape[0])
                contrib = (2.0 * np.repeat(alb, k_dirs) / k_dirs) * rad_y * cos_k
                seg = np.where(hit2, t2, 0.0)
                delay2 = (path_y + seg + np.repeat(cam_path, k_dirs)) / cw + pad
                keep = hit2 & (contrib > 0.0)
                _deposit(buf, np.repeat(rows, k_dirs)[keep], delay2[keep], contrib[keep])

    if kernel.shape[0] > 1:
        buf = convolve1d(buf, kernel, axis=1, mode="constant")
    return np.ascontiguousarray(buf[:, pad : pad + n_bins])


def ideal_transient(
    scene: AnalyticScene,
    ray: Ray,
    n_bins: int,
    bin_width_s: float,
    n_indirect: int = DEFAULT_INDIRECT_DIRECTIONS,
) -> TransientHistogram:
    """Expected photons per pulse along one ray (camera-referenced delays).

    Surface hits outside the ray's [s_near, s_far] range are ignored.
    """
    origin = ray.origin[None, :]
    direction = ray.direction[None, :]
    t_hit, _, _, _, _ = scene_intersect(scene, origin, direction)
    if np.isfinite(t_hit[0]) and not (ray.s_near <= t_hit[0] <= ray.s_far):
        return TransientHistogram(np.zeros(n_bins), bin_width_s)
    lam = ideal_transient_batch(scene, origin, direction, n_bins, bin_width_s, n_indirect)
    return TransientHistogram(lam[0], bin_width_s)


def measure(
    lam: TransientHistogram | np.ndarray,
    spad: SpadModel,
    rng_seed,
    ambient_rate: float = 0.0,
) -> TransientHistogram:
    """Draw SPAD counts for one ideal transient: Poisson(P*eta*lam + B).

    The flat background per bin is B = P*(eta*ambient_rate + dark_rate).
    The scene's ambient rate must be passed explicitly since the histogram
    itself does not carry it. Deterministic for a given seed. Warns when the
    per-pulse detection probability leaves the low-flux regime.
    """
    if isinstance(lam, TransientHistogram):
        values = lam.bins
    else:
        values = np.asarray(lam, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError(f"expected a 1-d histogram, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidInputError("ideal transient must be finite and non-negative")
    rate = spad.pulses * (
        spad.efficiency * values + spad.efficiency * ambient_rate + spad.dark_rate
    )
    if not np.all(np.isfinite(rate)):
        raise InvalidInputError("Poisson rate must be finite")
    p_detect = float(
        np.sum(spad.efficiency * values + spad.efficiency * ambient_rate + spad.dark_rate)
    )
    if p_detect >= LOW_FLUX_LIMIT:
        warnings.warn(
            f"per-pulse detection probability {p_detect:.3f} exceeds the low-flux "
            f"limit {LOW_FLUX_LIMIT}; Poisson counts will understate pileup",
            stacklevel=2,
        )
    rng = np.random.default_rng(rng_seed)
    counts = rng.poisson(rate).astype(np.float64)
    return TransientHistogram(counts, spad.bin_width_s)


def render_ideal_video(
    scene: AnalyticScene,
    camera: CameraModel,
    n_bins: int,
    bin_width_s: float,
    n_indirect: int = DEFAULT_INDIRECT_DIRECTIONS,
    chunk_pixels: int = 2048,
) -> TransientVideo:
    """Ideal (noise-free) transient video for one camera, single channel."""
    origin, dirs = camera_ray_grid(camera)
    flat_dirs = dirs.reshape(-1, 3)
    n_px = flat_dirs.shape[0]
    out = np.zeros((n_px, n_bins), dtype=np.float64)
    for start in range(0, n_px, chunk_pixels):
        stop = min(start + chunk_pixels, n_px)
        out[start:stop] = ideal_transient_batch(
            scene, origin, flat_dirs[start:stop], n_bins, bin_width_s, n_indirect
        )
    data = out.reshape(camera.height, camera.width, 1, n_bins).astype(np.float32)
    return TransientVideo(data=data, bin_width_s=bin_width_s)


def measure_video(
    ideal: TransientVideo,
    spad: SpadModel,
    seed: int,
    view_index: int,
    ambient_rate: float = 0.0,
) -> TransientVideo:
    """Per-pixel Poisson measurement of an ideal video.

    Each pixel gets its own RNG stream derived from (seed, view, pixel), so
    the result is independent of pixel evaluation order and safe to
    parallelize. Warns once if any pixel breaks the low-flux assumption.
    """
    lam = ideal.data[..., 0, :].astype(np.float64)
    h, w, n = lam.shape
    rate = spad.pulses * (spad.efficiency * lam + spad.efficiency * ambient_rate + spad.dark_rate)
    if not np.all(np.isfinite(rate)):
        raise InvalidInputError("Poisson rate must be finite")
    p_detect = (
        spad.efficiency * lam.sum(axis=-1)
        + n * (spad.efficiency * ambient_rate + spad.dark_rate)
    )
    worst = float(p_detect.max()) if p_detect.size else 0.0
    if worst >= LOW_FLUX_LIMIT:
        n_bad = int(np.count_nonzero(p_detect >= LOW_FLUX_LIMIT))
        warnings.warn(
            f"{n_bad} pixels exceed the low-flux limit (worst detection "
            f"probability {worst:.3f} per pulse)",
            stacklevel=2,
        )
    flat_rate = rate.reshape(h * w, n)
    counts = np.empty_like(flat_rate)
    for pix in range(h * w):
        rng = np.random.default_rng(np.random.SeedSequence((seed, view_index, pix)))
        counts[pix] = rng.poisson(flat_rate[pix])
    data = counts.reshape(h, w, 1, n).astype(np.float32)
    return TransientVideo(data=data, bin_width_s=ideal.bin_width_s, metadata={"seed": seed})


def hemisphere_cameras(
    radius: float,
    azimuth_deg: tuple[float, float],
    elevation_deg: tuple[float, float],
    n_azimuth: int,
    n_elevation: int,
    width: int,
    height: int,
    focal_px: float,
    target=(0.0, 0.0, 0.0),
) -> list[CameraModel]:
    """Camera grid on a hemisphere, all looking at the target point.

    Azimuth is measured in the xy-plane from +x, elevation above the
    xy-plane; both ranges are inclusive. Poses are ordered azimuth-fastest.
    """
    if radius <= 0:
        raise ConfigError(f"hemisphere radius must be positive, got {radius}")
    if n_azimuth < 1 or n_elevation < 1:
        raise ConfigError("camera grid needs at least one azimuth and elevation")
    target = np.asarray(target, dtype=np.float64).reshape(3)
    azimuths = np.deg2rad(np.linspace(azimuth_deg[0], azimuth_deg[1], n_azimuth))
    elevations = np.deg2rad(np.linspace(elevation_deg[0], elevation_deg[1], n_elevation))
    cameras = []
    for el in elevations:
        for az in azimuths:
            position = target + radius * np.array(
                [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
            )
            pose = look_at_pose(position, target)
            cameras.append(
                CameraModel(
                    fx=focal_px,
                    fy=focal_px,
                    cx=width / 2.0,
                    cy=height / 2.0,
                    width=width,
                    height=height,
                    cam_to_world=pose,
                )
            )
    return cameras


@dataclass
class SimulationSetup:
    """Everything a simulation run needs, as parsed from a scene file."""

    scene: AnalyticScene
    spad: SpadModel
    cameras: list[CameraModel]
    seed: int = 0
    n_indirect: int = DEFAULT_INDIRECT_DIRECTIONS
    eval_views: list[int] = field(default_factory=list)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split())


def _parse_surface(name: str, sec) -> Sphere | AxisPlane:
    kind = sec.get("kind", "").strip()
    albedo = sec.getfloat("albedo")
    if albedo is None:
        raise ConfigError(f"[surface {name}] needs an albedo")
    if kind == "sphere":
        center = _floats(sec.get("center", ""))
        radius = sec.getfloat("radius")
        if len(center) != 3 or radius is None:
            raise ConfigError(f"[surface {name}] sphere needs center (3 floats) and radius")
        return Sphere(center=center, radius=radius, albedo=albedo)
    if kind == "plane":
        axis_name = sec.get("axis", "").strip().lower()
        if axis_name not in ("x", "y", "z"):
            raise ConfigError(f"[surface {name}] plane axis must be x, y, or z")
        axis = "xyz".index(axis_name)
        offset = sec.getfloat("offset")
        if offset is None:
            raise ConfigError(f"[surface {name}] plane needs an offset")
        lo = hi = None
        if sec.get("min") is not None or sec.get("max") is not None:
            lo = _floats(sec.get("min", ""))
            hi = _floats(sec.get("max", ""))
            if len(lo) != 2 or len(hi) != 2:
                raise ConfigError(f"[surface {name}] plane bounds are 2 floats each")
        return AxisPlane(axis=axis, offset=offset, albedo=albedo, lo=lo, hi=hi)
    raise ConfigError(f"[surface {name}] kind must be sphere or plane, got {kind!r}")


def load_scene_file(path: str | Path) -> SimulationSetup:
    """Parse a scene description file.

    The grammar is INI-style: a [light] block, a [spad] block, one
    [surface NAME] block per surface, a [cameras] block (hemisphere layout),
    and an optional [simulate] block for the seed, indirect-direction count,
    and held-out view list.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    try:
        if "light" not in parser:
            raise ConfigError("missing [light] section")
        lsec = parser["light"]
        position = _floats(lsec.get("position", ""))
        if len(position) != 3:
            raise ConfigError("[light] position must be 3 floats")
        kind = lsec.get("type", "point").strip()
        direction = None
        if lsec.get("direction") is not None:
            direction = _floats(lsec.get("direction"))
        light = Light(
            position=position,
            power=lsec.getfloat("power", 1.0),
            pulse_fwhm_s=lsec.getfloat("pulse_fwhm_ps", DEFAULT_PULSE_FWHM_S * 1e12) * 1e-12,
            kind=kind,
            direction=direction,
            radius=lsec.getfloat("radius", 0.0),
        )
        ambient_rate = lsec.getfloat("ambient_rate", 0.0)

        if "spad" not in parser:
            raise ConfigError("missing [spad] section")
        ssec = parser["spad"]
        spad = SpadModel(
            pulses=ssec.getint("pulses"),
            efficiency=ssec.getfloat("efficiency", 1.0),
            dark_rate=ssec.getfloat("dark_rate", 0.0),
            n_bins=ssec.getint("n_bins"),
            bin_width_s=ssec.getfloat("bin_width_ps") * 1e-12,
        )

        surfaces = []
        for section in parser.sections():
            if section.startswith("surface "):
                surfaces.append(_parse_surface(section[len("surface "):], parser[section]))
        if not surfaces:
            raise ConfigError("scene has no [surface ...] sections")
        scene = AnalyticScene(surfaces=surfaces, light=light, ambient_rate=ambient_rate)

        if "cameras" not in parser:
            raise ConfigError("missing [cameras] section")
        csec = parser["cameras"]
        layout = csec.get("layout", "hemisphere").strip()
        if layout != "hemisphere":
            raise ConfigError(f"unsupported camera layout {layout!r}")
        az = _floats(csec.get("azimuth_deg", ""))
        el = _floats(csec.get("elevation_deg", ""))
        grid = tuple(int(v) for v in csec.get("grid", "").split())
        if len(az) != 2 or len(el) != 2 or len(grid) != 2:
            raise ConfigError(
                "[cameras] needs azimuth_deg (2), elevation_deg (2), and grid (2)"
            )
        cameras = hemisphere_cameras(
            radius=csec.getfloat("radius"),
            azimuth_deg=az,
            elevation_deg=el,
            n_azimuth=grid[0],
            n_elevation=grid[1],
            width=csec.getint("width"),
            height=csec.getint("height"),
            focal_px=csec.getfloat("focal_px"),
        )

        seed = 0
        n_indirect = DEFAULT_INDIRECT_DIRECTIONS
        eval_views: list[int] = []
        if "simulate" in parser:
            msec = parser["simulate"]
            seed = msec.getint("seed", 0)
            n_indirect = msec.getint("indirect_directions", DEFAULT_INDIRECT_DIRECTIONS)
            if msec.get("eval_views") is not None:
                eval_views = [int(v) for v in msec.get("eval_views").split()]
        for v in eval_views:
            if not 0 <= v < len(cameras):
                raise ConfigError(f"eval view {v} out of range for {len(cameras)} cameras")
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    return SimulationSetup(
        scene=scene,
        spad=spad,
        cameras=cameras,
        seed=seed,
        n_indirect=n_indirect,
        eval_views=eval_views,
    )


def generate_dataset(
    setup: SimulationSetup,
    out_dir: str | Path,
    write_ideal: bool = True,
) -> dict:
    """Simulate every camera view and write a self-describing dataset.

    Writes per view: measured counts (view_XXX.trv), the camera
    (view_XXX.json), and optionally the noise-free ideal transients
    (view_XXX_ideal.trv). The manifest records all parameters, the seed,
    the train/eval split, and the normalization scale (99.9th percentile of
    measured counts) used by training.
    """
    from . import io as tio

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene, spad = setup.scene, setup.spad

    views = []
    all_counts = []
    for v, camera in enumerate(setup.cameras):
        ideal = render_ideal_video(
            scene, camera, spad.n_bins, spad.bin_width_s, setup.n_indirect
        )
        measured = measure_video(ideal, spad, setup.seed, v, scene.ambient_rate)
        video_name = f"view_{v:03d}.trv"
        camera_name = f"view_{v:03d}.json"
        tio.write_transient_video(out_dir / video_name, measured)
        tio.write_camera(out_dir / camera_name, camera)
        entry = {"video": video_name, "camera": camera_name}
        if write_ideal:
            ideal_name = f"view_{v:03d}_ideal.trv"
            tio.write_transient_video(out_dir / ideal_name, ideal)
            entry["ideal"] = ideal_name
        views.append(entry)
        all_counts.append(measured.data)

    stacked = np.concatenate([c.ravel() for c in all_counts])
    scale = float(np.percentile(stacked, 99.9))
    if scale <= 0.0:
        scale = 1.0

    eval_views = sorted(setup.eval_views)
    train_views = [v for v in range(len(setup.cameras)) if v not in eval_views]
    light = scene.light
    manifest = {
        "format": "tfield-dataset-v1",
        "seed": setup.seed,
        "n_indirect": setup.n_indirect,
        "n_bins": spad.n_bins,
        "bin_width_s": spad.bin_width_s,
        "normalization_scale": scale,
        "spad": {
            "pulses": spad.pulses,
            "efficiency": spad.efficiency,
            "dark_rate": spad.dark_rate,
        },
        "light": {
            "position": light.position.tolist(),
            "power": light.power,
            "pulse_fwhm_s": light.pulse_fwhm_s,
            "kind": light.kind,
        },
        "ambient_rate": scene.ambient_rate,
        "surfaces": [
            {
                "kind": "sphere",
                "center": s.center.tolist(),
                "radius": s.radius,
                "albedo": s.albedo,
            }
            if isinstance(s, Sphere)
            else {
                "kind": "plane",
                "axis": s.axis,
                "offset": s.offset,
                "albedo": s.albedo,
                "lo": None if s.lo is None else s.lo.tolist(),
                "hi": None if s.hi is None else s.hi.tolist(),
            }
            for s in scene.surfaces
        ],
        "splits": {"train": train_views, "eval": eval_views},
        "views": views,
    }
    tio.write_manifest(out_dir / "manifest.json", manifest)
    return manifest
