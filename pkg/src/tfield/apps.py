"""Spacetime applications on a fitted field: warping, fast cameras, separation.

Time warping re-references each pixel's transient to a chosen spacetime
frame by shifting out (or in) per-pixel propagation delays, either to the
camera (depth-based) or to an arbitrary reference sphere/plane.

Relativistic rendering views the field from a camera moving at a fraction
beta of the speed of light: ray directions aberrate toward the motion,
radiance picks up a Doppler/searchlight factor, and camera proper time runs
slow by the Lorentz factor so each camera frame advances gamma_L scene bins.

Direct-global separation decomposes measured transients per pixel with a
small Gaussian mixture fitted by EM: the earliest component matching the
laser pulse width is the direct return, everything else is global.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.special import logsumexp

from .core import (
    CONSTANTS,
    CameraModel,
    ConfigError,
    InvalidInputError,
    ShapeError,
    TransientVideo,
    camera_ray_grid,
    shift_bins,
)
from .field import TransientFieldGrid
from .renderer import RenderConfig, render_ray_batch, render_video_dynamic

# ratio between a Gaussian's FWHM and its standard deviation, as used for
# the direct-pulse width test
FWHM_OVER_SIGMA = 2.355
# a component counts as direct when its std is within this factor of the pulse
DIRECT_STD_TOLERANCE = 1.5
# smallest allowed mixture std in bins; prevents variance collapse in EM
GMM_MIN_STD_BINS = 0.1
GMM_MAX_COMPONENTS = 4
GMM_MAX_ITERS = 200
GMM_TOL = 1e-6
# fraction of the smoothed peak that counts as the transient's first rise
RISE_FRACTION = 0.05


# ---------------------------------------------------------------------------
# time warping


@dataclass
class WarpSpec:
    """How to re-reference transient timing.

    mode "depth-based" removes (or adds) each pixel's full camera
    propagation delay. mode "reference-surface" uses the distance from the
    ray's intersection with a reference sphere or plane to the expected ray
    termination point, so timing is expressed relative to that surface.
    """

    mode: str = "depth-based"
    sign: str = "remove-delay"
    surface: str | None = None
    center: np.ndarray | None = None
    radius: float = 0.0
    normal: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("depth-based", "reference-surface"):
            raise ConfigError(f"warp mode must be depth-based or reference-surface, got {self.mode!r}")
        if self.sign not in ("remove-delay", "add-delay"):
            raise ConfigError(f"warp sign must be remove-delay or add-delay, got {self.sign!r}")
        if self.mode == "reference-surface":
            if self.surface == "sphere":
                if self.center is None or not self.radius > 0:
                    raise ConfigError("sphere reference needs a center and a positive radius")
                self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
            elif self.surface == "plane":
                if self.normal is None:
                    raise ConfigError("plane reference needs a normal")
                self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
                norm = float(np.linalg.norm(self.normal))
                if norm == 0.0:
                    raise ConfigError("plane normal must be nonzero")
                self.normal = self.normal / norm
            else:
                raise ConfigError(f"reference surface must be sphere or plane, got {self.surface!r}")


def _reference_distance(spec: WarpSpec, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance along each ray to the reference surface; NaN where missed."""
    if spec.surface == "sphere":
        oc = origins - spec.center
        b = np.einsum("rk,rk->r", oc, dirs)
        c = np.einsum("rk,rk->r", oc, oc) - spec.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        t = np.where(t_near > 0.0, t_near, t_far)
        return np.where((disc >= 0.0) & (t > 0.0), t, np.nan)
    denom = dirs @ spec.normal
    safe = np.where(denom == 0.0, 1.0, denom)
    t = (spec.offset - origins @ spec.normal) / safe
    return np.where((denom != 0.0) & (t > 0.0), t, np.nan)


def warp_video(
    grid: TransientFieldGrid,
    cam: CameraModel,
    cfg: RenderConfig,
    spec: WarpSpec,
    seed: int = 0,
) -> TransientVideo:
    """Render a view and shift each pixel's transient per the warp spec.

    The per-pixel delay is the expected ray termination distance (opacity-
    weighted depth), minus the distance to the reference surface when one is
    given. remove-delay shifts transients earlier, add-delay later. Rays
    that miss the reference surface are left unwarped.
    """
    origin, dirs = camera_ray_grid(cam)
    flat_dirs = np.ascontiguousarray(dirs.reshape(-1, 3))
    n_rays = flat_dirs.shape[0]
    origins = np.broadcast_to(origin, flat_dirs.shape)
    cw = CONSTANTS.c * grid.bin_width_s

    out = np.empty((n_rays, grid.channels, grid.n_bins), dtype=np.float32)
    chunk = max(64, 131072 // max(1, cfg.n_samples))
    for start in range(0, n_rays, chunk):
        stop = min(start + chunk, n_rays)
        res = render_ray_batch(grid, origins[start:stop], flat_dirs[start:stop], cfg, seed=seed)
        depth = res.depth()
        if spec.mode == "reference-surface":
            t_ref = _reference_distance(spec, origins[start:stop], flat_dirs[start:stop])
            delay = np.where(np.isnan(t_ref), 0.0, depth - np.nan_to_num(t_ref)) / cw
        else:
            delay = depth / cw
        if spec.sign == "remove-delay":
            delay = -delay
        out[start:stop] = shift_bins(res.transient, delay[:, None])
    data = out.reshape(cam.height, cam.width, grid.channels, grid.n_bins)
    return TransientVideo(data=data, bin_width_s=grid.bin_width_s)


# ---------------------------------------------------------------------------
# relativistic rendering


def lorentz_gamma(beta: float) -> float:
    """Lorentz factor 1/sqrt(1 - beta^2)."""
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"beta must be in [0, 1), got {beta}")
    return 1.0 / math.sqrt(1.0 - beta * beta)


def aberrate_cos(cos_theta, beta: float):
    """Relativistic aberration: camera-frame angle to scene-frame angle.

    cos(theta') = (cos(theta) - beta) / (1 - beta*cos(theta)), with theta
    measured from the motion direction. The inverse map is the same formula
    with -beta.
    """
    if not 0.0 <= abs(beta) < 1.0:
        raise ConfigError(f"|beta| must be < 1, got {beta}")
    cos_theta = np.asarray(cos_theta, dtype=np.float64)
    return (cos_theta - beta) / (1.0 - beta * cos_theta)


def doppler_factor(cos_theta, beta: float):
    """Doppler shift factor D = 1 / (gamma_L * (1 - beta*cos(theta)))."""
    g = lorentz_gamma(beta)
    cos_theta = np.asarray(cos_theta, dtype=np.float64)
    return 1.0 / (g * (1.0 - beta * cos_theta))


def aberrate_directions(dirs: np.ndarray, motion_direction: np.ndarray, beta: float) -> np.ndarray:
    """Map unit camera-frame directions to scene-frame trace directions.

    Each direction rotates within its (motion, direction) plane so its angle
    from the motion axis goes from theta to theta' per ``aberrate_cos``.
    Directions parallel to the motion axis are fixed points.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    m = np.asarray(motion_direction, dtype=np.float64).reshape(3)
    m = m / np.linalg.norm(m)
    cos_t = dirs @ m
    cos_p = np.clip(aberrate_cos(np.clip(cos_t, -1.0, 1.0), beta), -1.0, 1.0)
    sin_p = np.sqrt(np.maximum(1.0 - cos_p * cos_p, 0.0))
    perp = dirs - cos_t[..., None] * m
    perp_norm = np.linalg.norm(perp, axis=-1)
    safe = np.maximum(perp_norm, 1e-300)[..., None]
    e = perp / safe
    out = cos_p[..., None] * m + sin_p[..., None] * e
    # parallel rays have no rotation plane; theta in {0, pi} maps to itself
    parallel = perp_norm < 1e-12
    if np.any(parallel):
        out = np.where(parallel[..., None], dirs, out)
    return out


@dataclass
class RelativisticCamera:
    """A pinhole camera translating at a constant fraction beta of c."""

    base_camera: CameraModel
    beta: float
    motion_direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    doppler_exponent: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")
        self.motion_direction = np.asarray(self.motion_direction, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(self.motion_direction))
        if norm == 0.0:
            raise ConfigError("motion direction must be nonzero")
        self.motion_direction = self.motion_direction / norm


def render_relativistic(
    grid: TransientFieldGrid,
    relcam: RelativisticCamera,
    cfg: RenderConfig,
    seed: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """Flythrough frames seen by a camera moving at beta of light speed.

    Per camera frame j the camera has aged j proper bins while the scene
    advanced gamma_L * j bins, so the sequence ends once the dilated index
    leaves the field's time window. The camera origin advances by
    beta*c*W per scene bin; rays aberrate toward the motion axis and pick
    up a searchlight factor D**doppler_exponent with theta measured at the
    camera pixel. Returns (n_frames, height, width, channels).

    At beta = 0 every relativistic term is the identity and the result is
    exactly ``render_video_dynamic`` on the stationary trajectory.
    """
    cam = relcam.base_camera
    n_bins = grid.n_bins
    if relcam.beta == 0.0:
        trajectory = [cam] * n_bins
        return render_video_dynamic(grid, trajectory, cfg, seed=seed, threads=threads)

    g = lorentz_gamma(relcam.beta)
    step_m = relcam.beta * CONSTANTS.c * grid.bin_width_s
    n_frames = int(math.floor((n_bins - 1) / g)) + 1

    origin0, dirs = camera_ray_grid(cam)
    flat_dirs = np.ascontiguousarray(dirs.reshape(-1, 3))
    cos_t = flat_dirs @ relcam.motion_direction
    traced = aberrate_directions(flat_dirs, relcam.motion_direction, relcam.beta)
    boost = doppler_factor(np.clip(cos_t, -1.0, 1.0), relcam.beta) ** relcam.doppler_exponent

    frames = np.empty(
        (n_frames, cam.height, cam.width, grid.channels), dtype=np.float32
    )
    n_rays = flat_dirs.shape[0]
    chunk = max(64, 131072 // max(1, cfg.n_samples))
    for j in range(n_frames):
        scene_t = g * j
        origin = origin0 + step_m * scene_t * relcam.motion_direction
        origins = np.broadcast_to(origin, flat_dirs.shape)
        k = int(math.floor(scene_t))
        frac = scene_t - k
        frame = np.empty((n_rays, grid.channels), dtype=np.float64)
        for start in range(0, n_rays, chunk):
            stop = min(start + chunk, n_rays)
            res = render_ray_batch(grid, origins[start:stop], traced[start:stop], cfg, seed=seed)
            lo = res.transient[..., k]
            if frac > 0.0 and k + 1 < n_bins:
                val = (1.0 - frac) * lo + frac * res.transient[..., k + 1]
            else:
                val = (1.0 - frac) * lo if frac > 0.0 else lo
            frame[start:stop] = val
        frame *= boost[:, None]
        frames[j] = frame.reshape(cam.height, cam.width, grid.channels)
    return frames


# ---------------------------------------------------------------------------
# direct-global separation


@dataclass
class GmmFit:
    """A per-pixel mixture fit: (weight, mean, std) triples plus the floor."""

    components: list[tuple[float, float, float]]
    noise_floor: float
    converged: bool = True

    def __post_init__(self) -> None:
        for w, _, s in self.components:
            if w < 0:
                raise InvalidInputError(f"component weight must be >= 0, got {w}")
            if not s > 0:
                raise InvalidInputError(f"component std must be positive, got {s}")


def estimate_noise_floor(hist: np.ndarray) -> tuple[float, int]:
    """Median level before the transient's first rise.

    The first rise is the first bin where the 3-bin box-smoothed histogram
    climbs RISE_FRACTION of the way from its baseline (minimum) to its
    peak. Returns (floor, rise_bin); a signal rising at bin 0 (or an
    all-zero histogram) has floor 0.
    """
    smoothed = uniform_filter1d(np.asarray(hist, dtype=np.float64), 3, mode="nearest")
    peak = smoothed.max()
    if peak <= 0.0:
        return 0.0, 0
    # threshold sits above the baseline so a nonzero floor is not itself a rise
    base = smoothed.min()
    above = np.nonzero(smoothed > base + RISE_FRACTION * (peak - base))[0]
    rise = int(above[0]) if above.size else 0
    if rise == 0:
        return 0.0, 0
    return float(np.median(hist[:rise])), rise


def _local_maxima(values: np.ndarray) -> np.ndarray:
    """Indices of strict-or-plateau local maxima, peak value descending."""
    left = np.r_[-np.inf, values[:-1]]
    right = np.r_[values[1:], -np.inf]
    idx = np.nonzero((values >= left) & (values > right) & (values > 0))[0]
    return idx[np.argsort(values[idx])[::-1]]


def _init_means(work: np.ndarray, k: int) -> np.ndarray:
    """Initial component means: the k largest smoothed local maxima."""
    smoothed = uniform_filter1d(work, 3, mode="nearest")
    peaks = _local_maxima(smoothed)
    means = list(peaks[:k].astype(np.float64))
    if len(means) < k:
        # not enough peaks: spread the remainder over the occupied range
        support = np.nonzero(work > 0)[0]
        lo, hi = (float(support[0]), float(support[-1])) if support.size else (0.0, len(work) - 1.0)
        fill = np.linspace(lo, hi, k - len(means) + 2)[1:-1]
        means.extend(float(f) for f in fill)
    return np.asarray(means[:k])


def _log_gauss(bins: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    z = (bins[None, :] - means[:, None]) / stds[:, None]
    return -0.5 * z * z - np.log(stds[:, None] * math.sqrt(2.0 * math.pi))


def fit_transient_gmm(
    hist: np.ndarray,
    pulse_fwhm_bins: float,
    max_components: int = GMM_MAX_COMPONENTS,
) -> GmmFit:
    """Fit a small Gaussian mixture to one transient by weighted EM.

    Bins act as samples weighted by their (noise-floor-subtracted) counts.
    The component count K <= max_components is chosen by BIC; means start at
    the K largest local maxima of the smoothed transient and stds at the
    pulse width. Non-convergence after 200 iterations is flagged.
    """
    if pulse_fwhm_bins <= 0:
        raise InvalidInputError(f"pulse FWHM must be positive, got {pulse_fwhm_bins}")
    hist = np.asarray(hist, dtype=np.float64)
    if hist.ndim != 1:
        raise ShapeError(f"expected a 1-d transient, got shape {hist.shape}")
    floor, _ = estimate_noise_floor(hist)
    work = np.maximum(hist - floor, 0.0)
    total = work.sum()
    if total <= 0.0:
        return GmmFit(components=[], noise_floor=floor)

    bins = np.arange(hist.shape[0], dtype=np.float64)
    sigma0 = max(pulse_fwhm_bins / FWHM_OVER_SIGMA, GMM_MIN_STD_BINS)
    best = None
    for k in range(1, max_components + 1):
        means = _init_means(work, k)
        stds = np.full(k, sigma0)
        weights = np.full(k, 1.0 / k)
        ll_prev = -np.inf
        converged = False
        for _ in range(GMM_MAX_ITERS):
            log_pdf = _log_gauss(bins, means, stds)
            with np.errstate(divide="ignore"):
                log_w = np.log(weights)
            log_joint = log_w[:, None] + log_pdf
            log_norm = logsumexp(log_joint, axis=0)
            ll = float(np.dot(work, log_norm))
            resp = np.exp(log_joint - log_norm[None, :]) * work[None, :]
            nk = resp.sum(axis=1)
            ok = nk > 1e-12
            weights = np.where(ok, nk / total, 0.0)
            means = np.where(ok, resp @ bins / np.maximum(nk, 1e-300), means)
            var = (resp * (bins[None, :] - means[:, None]) ** 2).sum(axis=1)
            stds = np.where(
                ok,
                np.sqrt(np.maximum(var / np.maximum(nk, 1e-300), GMM_MIN_STD_BINS**2)),
                stds,
            )
            if abs(ll - ll_prev) <= GMM_TOL * max(abs(ll), 1.0):
                converged = True
                break
            ll_prev = ll
        bic = -2.0 * ll + (3 * k - 1) * math.log(total)
        if best is None or bic < best[0]:
            best = (bic, weights, means, stds, converged)

    _, weights, means, stds, converged = best
    comps = [
        (float(total * w), float(m), float(s))
        for w, m, s in zip(weights, means, stds)
        if w > 0
    ]
    comps.sort(key=lambda c: c[1])
    return GmmFit(components=comps, noise_floor=floor, converged=converged)


def _direct_component(fit: GmmFit, pulse_fwhm_bins: float) -> tuple[float, float, float] | None:
    """The earliest-mean component if it matches the pulse width, else None."""
    if not fit.converged or not fit.components:
        return None
    w, m, s = fit.components[0]
    sigma_pulse = pulse_fwhm_bins / FWHM_OVER_SIGMA
    if s <= DIRECT_STD_TOLERANCE * max(sigma_pulse, GMM_MIN_STD_BINS):
        return (w, m, s)
    return None


def separate_direct_global(
    video: TransientVideo,
    pulse_fwhm_bins: float,
) -> tuple[TransientVideo, TransientVideo]:
    """Split a transient video into direct and global light per pixel.

    Per pixel: subtract the noise floor, fit a Gaussian mixture, and label
    the earliest-mean component direct iff its std is within 1.5x the pulse
    std. The direct video evaluates that component discretely (clamped so
    it never exceeds the observed signal); the global video is the
    remainder, so direct + global equals the floor-subtracted transient.
    Pixels whose EM fails to converge put all mass in the global component.
    """
    data = video.data.astype(np.float64)
    if np.any(data < 0) or not np.all(np.isfinite(data)):
        raise InvalidInputError("video must be finite and non-negative")
    h, w, c, n = data.shape
    flat = data.reshape(-1, n)
    direct = np.zeros_like(flat)
    global_ = np.zeros_like(flat)
    bins = np.arange(n, dtype=np.float64)
    for p in range(flat.shape[0]):
        hist = flat[p]
        if hist.sum() <= 0.0:
            continue
        fit = fit_transient_gmm(hist, pulse_fwhm_bins)
        work = np.maximum(hist - fit.noise_floor, 0.0)
        comp = _direct_component(fit, pulse_fwhm_bins)
        if comp is not None:
            mass, mean, std = comp
            prof = np.exp(-0.5 * ((bins - mean) / std) ** 2)
            prof_sum = prof.sum()
            if prof_sum > 0.0:
                d = np.minimum(mass * prof / prof_sum, work)
            else:
                d = np.zeros(n)
            direct[p] = d
            global_[p] = work - d
        else:
            global_[p] = work
    mk = lambda arr: TransientVideo(
        data=arr.reshape(h, w, c, n).astype(np.float32), bin_width_s=video.bin_width_s
    )
    return mk(direct), mk(global_)
