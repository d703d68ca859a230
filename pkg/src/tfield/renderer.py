"""Transient volume renderer with propagation-delay modeling.

A ray r(s) = o + s*d is integrated with the standard quadrature for emissive
absorbing media: with samples s_i stratified in [s_near, s_far],

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)            (T_0 = 1)
    tau_r   = sum_i T_i * alpha_i * shift(tau_i, s_i / (c * W))

where delta_i = s_{i+1} - s_i (the last interval ends at s_far) and the
shift moves each sample's transient later by its travel time to the ray
origin, in (fractional) bins via linear interpolation. Mass shifted past
the last bin leaves the histogram. Disabling propagation delay drops the
shift and composites the transients in place.

The backward pass is hand-derived and reuses the forward sample positions,
so forward and backward must be given the same sampling seed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .core import (
    SPEED_OF_LIGHT_M_S,
    CameraModel,
    ConfigError,
    Ray,
    ShapeError,
    TransientHistogram,
    TransientVideo,
    camera_ray_grid,
)
from .field import (
    GridGradients,
    TransientFieldGrid,
    accumulate_point_gradients,
    interp_raw,
    sh_modulation,
    softplus_and_sigmoid,
)

DEPTH_WEIGHT_EPS = 1e-10


@dataclass
class RenderConfig:
    """Quadrature and compositing controls shared by all render entry points."""

    n_samples: int = 96
    s_near: float = 1e-3
    s_far: float = 1.0
    model_propagation_delay: bool = True
    white_background: bool = False

    def __post_init__(self) -> None:
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be at least 2, got {self.n_samples}")
        if not (np.isfinite(self.s_near) and np.isfinite(self.s_far)):
            raise ConfigError("s_near and s_far must be finite")
        if not (0.0 <= self.s_near < self.s_far):
            raise ConfigError(f"need 0 <= s_near < s_far, got [{self.s_near}, {self.s_far}]")


@dataclass
class RayBatchResult:
    """Forward render of a ray batch plus the caches the backward pass needs."""

    transient: np.ndarray       # (R, C, N)
    samples: np.ndarray         # (R, M) distances along each ray
    deltas: np.ndarray          # (R, M) quadrature interval lengths
    sigma: np.ndarray           # (R, M) activated density
    alpha: np.ndarray           # (R, M)
    transmittance: np.ndarray   # (R, M) T_i before sample i
    weights: np.ndarray         # (R, M) T_i * alpha_i
    s_far_per_ray: np.ndarray   # (R,)
    _bw: dict = dataclass_field(default_factory=dict, repr=False)

    def depth(self) -> np.ndarray:
        """Expected ray termination distance; s_far where the ray hits nothing."""
        total = self.weights.sum(axis=1)
        num = (self.weights * self.samples).sum(axis=1)
        safe = np.maximum(total, DEPTH_WEIGHT_EPS)
        return np.where(total < DEPTH_WEIGHT_EPS, self.s_far_per_ray, num / safe)


def _stratum_jitter(n_samples: int, seed: int) -> np.ndarray:
    if seed < 0:
        raise ConfigError(f"sampling seed must be nonnegative, got {seed}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5A11)))
    return rng.random(n_samples)


def _stratified_samples(
    lo: np.ndarray, hi: np.ndarray, n_samples: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """One stratified sample per uniform stratum of [lo, hi], shared jitter."""
    u = _stratum_jitter(n_samples, seed)
    frac = (np.arange(n_samples) + u) / n_samples
    s = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
    delta = np.empty_like(s)
    delta[:, :-1] = np.diff(s, axis=1)
    delta[:, -1] = hi - s[:, -1]
    return s, delta


def render_ray_batch(
    grid: TransientFieldGrid,
    origins: np.ndarray,
    directions: np.ndarray,
    cfg: RenderConfig,
    seed: int = 0,
    s_near: np.ndarray | None = None,
    s_far: np.ndarray | None = None,
    keep_backward: bool = False,
) -> RayBatchResult:
    """Render a batch of rays. origins and directions are (R, 3); directions
    must be unit length. Per-ray bounds override the config bounds.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    if origins.ndim != 2 or origins.shape[1] != 3 or origins.shape != directions.shape:
        raise ShapeError(
            f"origins and directions must both be (R, 3), got {origins.shape} {directions.shape}"
        )
    r = origins.shape[0]
    m = cfg.n_samples
    n = grid.n_bins
    c = grid.channels
    dt = grid.density_raw.dtype

    lo = np.full(r, cfg.s_near) if s_near is None else np.asarray(s_near, dtype=np.float64)
    hi = np.full(r, cfg.s_far) if s_far is None else np.asarray(s_far, dtype=np.float64)
    if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)) or np.any(lo < 0) or np.any(lo >= hi):
        raise ConfigError("per-ray bounds must satisfy 0 <= s_near < s_far and be finite")

    s, delta = _stratified_samples(lo, hi, m, seed)
    pts = origins[:, None, :] + s[..., None] * directions[:, None, :]
    sig_raw, tau_raw, cache = interp_raw(grid, pts.reshape(-1, 3))
    sigma_act, sig_deriv = softplus_and_sigmoid(sig_raw)
    tau_act, tau_deriv = softplus_and_sigmoid(tau_raw)

    sh_cache = None
    if grid.sh_coeffs is not None:
        dirs_rep = np.repeat(directions, m, axis=0)
        mod, basis, mod_raw = sh_modulation(grid, cache, dirs_rep)
        tau_mod = tau_act * mod.astype(dt)[:, None]
        sh_cache = (mod.astype(dt), basis, mod_raw)
    else:
        tau_mod = tau_act

    inside = cache.inside
    sigma_act = np.where(inside, sigma_act, 0.0).astype(dt, copy=False)
    tau_mod = tau_mod * inside[:, None]

    q = sigma_act.reshape(r, m) * delta.astype(dt)
    one_minus_alpha = np.exp(-q)
    alpha = -np.expm1(-q)
    big_t = np.exp(-(np.cumsum(q, axis=1) - q))
    w = big_t * alpha

    if cfg.model_propagation_delay:
        delay = s / (SPEED_OF_LIGHT_M_S * grid.bin_width_s)
        k = np.minimum(np.floor(delay).astype(np.int64), n + 1)
        f = (delay - np.floor(delay)).astype(dt)
    else:
        k = np.zeros((r, m), dtype=np.int64)
        f = np.zeros((r, m), dtype=dt)
    a = w * (1.0 - f)
    b = w * f

    pad = 2 * n + 2
    tau3 = tau_mod.reshape(r, m, c, n)
    flat = (np.arange(r, dtype=np.int64) * pad)[:, None, None] + k[..., None]
    flat = (flat + np.arange(n + 1, dtype=np.int64)).reshape(-1)
    out = np.empty((r, c, n), dtype=dt)
    v = np.empty((r, m, n + 1), dtype=dt)
    for ch in range(c):
        tc = tau3[:, :, ch, :]
        v[..., 0] = a * tc[..., 0]
        if n > 1:
            v[..., 1:n] = a[..., None] * tc[..., 1:] + b[..., None] * tc[..., :-1]
        v[..., n] = b * tc[..., -1]
        acc = np.bincount(flat, weights=v.reshape(-1).astype(np.float64), minlength=r * pad)
        out[:, ch, :] = acc.reshape(r, pad)[:, :n].astype(dt)
    if cfg.white_background:
        out += (1.0 - w.sum(axis=1)).astype(dt)[:, None, None]

    bw: dict = {}
    if keep_backward:
        bw = {
            "cache": cache,
            "sig_deriv": sig_deriv,
            "tau_act": tau_act,
            "tau_deriv": tau_deriv,
            "tau3": tau3,
            "sh_cache": sh_cache,
            "one_minus_alpha": one_minus_alpha,
            "k": k,
            "f": f,
            "a": a,
            "b": b,
            "white_background": cfg.white_background,
        }
    return RayBatchResult(
        transient=out,
        samples=s,
        deltas=delta,
        sigma=sigma_act.reshape(r, m),
        alpha=alpha,
        transmittance=big_t,
        weights=w,
        s_far_per_ray=hi,
        _bw=bw,
    )


def render_ray_batch_gradient(
    grid: TransientFieldGrid,
    result: RayBatchResult,
    d_transient: np.ndarray,
    grads: GridGradients | None = None,
) -> GridGradients:
    """Backpropagate d(loss)/d(rendered transient) to the grid's raw parameters.

    result must come from render_ray_batch(..., keep_backward=True) on the
    same grid. The chain runs through the fractional-bin shift, the
    quadrature weights, the optional directional modulation, and softplus.
    """
    if not result._bw:
        raise ConfigError("gradient needs a result rendered with keep_backward=True")
    bw = result._bw
    r, c, n = result.transient.shape
    m = result.samples.shape[1]
    dt = grid.density_raw.dtype
    d_out = np.asarray(d_transient, dtype=dt)
    if d_out.shape != (r, c, n):
        raise ShapeError(f"upstream gradient must be {(r, c, n)}, got {d_out.shape}")

    k, f, a, b = bw["k"], bw["f"], bw["a"], bw["b"]
    tau3 = bw["tau3"]
    pad = 2 * n + 2
    flat = (np.arange(r, dtype=np.int64) * pad)[:, None, None] + k[..., None]
    flat = (flat + np.arange(n + 1, dtype=np.int64)).reshape(-1)

    d_tau_mod = np.empty((r, m, c, n), dtype=dt)
    d_a = np.zeros((r, m), dtype=dt)
    d_b = np.zeros((r, m), dtype=dt)
    gpad = np.zeros((r, pad), dtype=dt)
    for ch in range(c):
        gpad[:, :n] = d_out[:, ch, :]
        gl = gpad.reshape(-1)[flat].reshape(r, m, n + 1)
        tc = tau3[:, :, ch, :]
        d_tau_mod[:, :, ch, :] = a[..., None] * gl[..., :n] + b[..., None] * gl[..., 1:]
        d_a += np.einsum("rmn,rmn->rm", tc, gl[..., :n])
        d_b += np.einsum("rmn,rmn->rm", tc, gl[..., 1:])

    d_w = (1.0 - f) * d_a + f * d_b
    if bw["white_background"]:
        d_w = d_w - d_out.sum(axis=(1, 2))[:, None]

    w = result.weights
    big_t = result.transmittance
    aw = d_w * w
    rev = aw[:, ::-1]
    after = (np.cumsum(rev, axis=1) - rev)[:, ::-1]
    d_q = d_w * big_t * bw["one_minus_alpha"] - after
    d_sigma_act = d_q * result.deltas.astype(dt)

    cache = bw["cache"]
    inside = cache.inside
    d_sig_raw = np.where(inside, d_sigma_act.reshape(-1), 0.0) * bw["sig_deriv"]

    d_tau_flat = d_tau_mod.reshape(r * m, c * n) * inside[:, None]
    d_sh = None
    if bw["sh_cache"] is not None:
        mod, basis, mod_raw = bw["sh_cache"]
        d_tau_act = d_tau_flat * mod[:, None]
        d_mod = np.einsum("sn,sn->s", d_tau_flat, bw["tau_act"]) * (mod_raw > 0)
        d_sh = d_mod[:, None] * basis
    else:
        d_tau_act = d_tau_flat
    d_tau_raw = d_tau_act * bw["tau_deriv"]

    if grads is None:
        grads = GridGradients.zeros_like(grid)
    accumulate_point_gradients(grid, cache, d_sig_raw, d_tau_raw, grads, d_sh=d_sh)
    return grads


def _ray_bounds(ray: Ray, cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    lo = max(cfg.s_near, ray.s_near)
    hi = min(cfg.s_far, ray.s_far)
    if not lo < hi:
        raise ConfigError(
            f"ray range [{ray.s_near}, {ray.s_far}] and config range "
            f"[{cfg.s_near}, {cfg.s_far}] do not overlap"
        )
    return np.array([lo]), np.array([hi])


def render_transient(
    grid: TransientFieldGrid, ray: Ray, cfg: RenderConfig, seed: int = 0
) -> TransientHistogram:
    """Render one ray's transient histogram (single-channel grids)."""
    if grid.channels != 1:
        raise ShapeError("render_transient is single-channel; use render_video_static")
    lo, hi = _ray_bounds(ray, cfg)
    res = render_ray_batch(grid, ray.origin[None], ray.direction[None], cfg, seed, lo, hi)
    return TransientHistogram(res.transient[0, 0].astype(np.float64), grid.bin_width_s)


def render_transmittance(
    grid: TransientFieldGrid, ray: Ray, cfg: RenderConfig, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample distances and transmittance T_i along one ray (T_0 = 1)."""
    lo, hi = _ray_bounds(ray, cfg)
    res = render_ray_batch(grid, ray.origin[None], ray.direction[None], cfg, seed, lo, hi)
    return res.samples[0], res.transmittance[0]


def render_depth(grid: TransientFieldGrid, ray: Ray, cfg: RenderConfig, seed: int = 0) -> float:
    """Expected termination distance along the ray; s_far on total miss."""
    lo, hi = _ray_bounds(ray, cfg)
    res = render_ray_batch(grid, ray.origin[None], ray.direction[None], cfg, seed, lo, hi)
    return float(res.depth()[0])


def render_transient_gradient(
    grid: TransientFieldGrid,
    ray: Ray,
    cfg: RenderConfig,
    upstream: np.ndarray,
    seed: int = 0,
) -> GridGradients:
    """Gradients of upstream . rendered_transient w.r.t. grid raw parameters.

    The forward pass is re-run internally with the given seed, which must be
    the seed used to produce the rendering being differentiated.
    """
    lo, hi = _ray_bounds(ray, cfg)
    res = render_ray_batch(
        grid, ray.origin[None], ray.direction[None], cfg, seed, lo, hi, keep_backward=True
    )
    up = np.asarray(upstream)
    want = (grid.channels, grid.n_bins)
    if up.shape == (grid.n_bins,) and grid.channels == 1:
        up = up[None]
    if up.shape != want:
        raise ShapeError(f"upstream must have shape {want} or ({grid.n_bins},), got {up.shape}")
    return render_ray_batch_gradient(grid, res, up[None])


def render_video_static(
    grid: TransientFieldGrid,
    cam: CameraModel,
    cfg: RenderConfig,
    seed: int = 0,
    threads: int = 1,
) -> TransientVideo:
    """Render the full transient video seen by a static camera."""
    origin, dirs = camera_ray_grid(cam)
    h, wpix = cam.height, cam.width
    flat_dirs = dirs.reshape(-1, 3)
    n_rays = flat_dirs.shape[0]
    out = np.empty((n_rays, grid.channels, grid.n_bins), dtype=grid.density_raw.dtype)

    chunk = max(64, 131072 // max(1, cfg.n_samples))
    ranges = [(i, min(i + chunk, n_rays)) for i in range(0, n_rays, chunk)]

    def run(rg):
        i0, i1 = rg
        o = np.broadcast_to(origin, (i1 - i0, 3))
        res = render_ray_batch(grid, o, flat_dirs[i0:i1], cfg, seed)
        out[i0:i1] = res.transient

    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, ranges))
    else:
        for rg in ranges:
            run(rg)
    data = out.reshape(h, wpix, grid.channels, grid.n_bins).astype(np.float32)
    return TransientVideo(data, grid.bin_width_s)


def render_video_dynamic(
    grid: TransientFieldGrid,
    trajectory: list[CameraModel],
    cfg: RenderConfig,
    seed: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """Render a flythrough: frame n uses pose n and keeps only time bin n.

    The trajectory must supply exactly one camera per time bin. Returns an
    array of shape (n_bins, height, width, channels).
    """
    if len(trajectory) != grid.n_bins:
        raise ConfigError(
            f"trajectory has {len(trajectory)} poses but the field has {grid.n_bins} "
            f"time bins; a dynamic render needs exactly one pose per bin"
        )
    h, wpix = trajectory[0].height, trajectory[0].width
    for cam in trajectory:
        if cam.height != h or cam.width != wpix:
            raise ConfigError("all trajectory cameras must share one image size")
    frames = np.empty((grid.n_bins, h, wpix, grid.channels), dtype=np.float32)
    for n, cam in enumerate(trajectory):
        video = render_video_static(grid, cam, cfg, seed, threads)
        frames[n] = video.data[..., n]
    return frames
