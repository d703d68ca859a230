"""Fitting the field to measured transient videos.

The objective compares the rendered transient against gamma-compressed
measurements:

    L = sum_n (g(measured[n]) - rendered[n])^2,   g(x) = x^(1/gamma)

so dL/drendered[n] = -2 * (g(measured[n]) - rendered[n]). Measurements are
normalized once per dataset (99.9th-percentile bin value maps to 1.0)
before compression. Parameters follow bias-corrected Adam with the learning
rate annealed by a fixed factor after 50%, 75%, and 90% of the iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .core import (
    CameraModel,
    ConfigError,
    InvalidDataError,
    NumericalError,
    ShapeError,
    TransientVideo,
    camera_ray_grid,
)
from .field import GridGradients, TransientFieldGrid, softplus_and_sigmoid
from .renderer import RenderConfig, render_ray_batch, render_ray_batch_gradient


@dataclass
class TrainConfig:
    gamma: float = 5.0
    lr: float = 1e-2
    total_iters: int = 3000
    batch_rays: int = 1024
    anneal_milestones: tuple = (0.5, 0.75, 0.9)
    anneal_factor: float = 0.33
    seed: int = 0
    normalization_scale: float | None = None  # None: 99.9th percentile of the data
    log_every: int = 100
    density_lr_mult: float = 1.0
    tv_weight: float = 0.0

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be positive, got {self.total_iters}")
        if self.batch_rays < 1:
            raise ConfigError(f"batch_rays must be positive, got {self.batch_rays}")
        ms = tuple(self.anneal_milestones)
        if any(not 0.0 < f < 1.0 for f in ms) or list(ms) != sorted(set(ms)):
            raise ConfigError(f"milestones must be strictly increasing in (0, 1), got {ms}")
        self.anneal_milestones = ms
        if not 0.0 < self.anneal_factor <= 1.0:
            raise ConfigError(f"anneal_factor must be in (0, 1], got {self.anneal_factor}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")
        if self.normalization_scale is not None and self.normalization_scale <= 0:
            raise ConfigError("normalization_scale must be positive when given")
        if self.density_lr_mult <= 0:
            raise ConfigError(f"density_lr_mult must be positive, got {self.density_lr_mult}")
        if self.tv_weight < 0:
            raise ConfigError(f"tv_weight must be nonnegative, got {self.tv_weight}")


def gamma_compress(x: np.ndarray, gamma: float) -> np.ndarray:
    """g(x) = x^(1/gamma), the compression applied to measurements."""
    return np.power(x, 1.0 / gamma)


def gamma_expand(x: np.ndarray, gamma: float) -> np.ndarray:
    """Inverse of gamma_compress; used to undo the compression at evaluation."""
    return np.power(x, gamma)


def loss_and_gradient(
    rendered: np.ndarray, measured: np.ndarray, gamma: float
) -> tuple[float, np.ndarray]:
    """Squared error against gamma-compressed measurements over a batch.

    Returns the scalar loss and dL/drendered, elementwise over whatever
    batch shape the two arrays share.
    """
    rendered = np.asarray(rendered)
    measured = np.asarray(measured)
    if rendered.shape != measured.shape:
        raise ShapeError(f"shape mismatch: rendered {rendered.shape} measured {measured.shape}")
    if not np.all(np.isfinite(measured)):
        raise InvalidDataError("measured values must be finite")
    if np.any(measured < 0):
        raise InvalidDataError("measured values must be nonnegative")
    return _quadratic_loss(rendered, gamma_compress(measured, gamma))


def _quadratic_loss(rendered: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = (target - rendered).astype(np.float64, copy=False)
    value = float(np.vdot(diff, diff))
    return value, (-2.0 * diff).astype(rendered.dtype, copy=False)


@dataclass
class AdamState:
    """First and second moment buffers matching a named parameter set."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    block_lr: dict[str, float] | None = None,
) -> None:
    """One bias-corrected Adam update, in place.

    block_lr overrides the learning rate for the named parameter blocks;
    all others use lr. Raises NumericalError naming the parameter block and
    step if a gradient is non-finite; parameters are untouched in that case.
    """
    if set(params) != set(grads):
        raise ShapeError(f"parameter/gradient keys differ: {set(params)} vs {set(grads)}")
    if block_lr:
        unknown = set(block_lr) - set(params)
        if unknown:
            raise ShapeError(f"block_lr names unknown blocks: {sorted(unknown)}")
    t = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in block '{name}' at step {t}")
    state.step = t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        step_lr = block_lr.get(name, lr) if block_lr else lr
        tmp = np.empty_like(g)
        np.multiply(m, state.beta1, out=m)
        np.multiply(g, 1.0 - state.beta1, out=tmp)
        np.add(m, tmp, out=m)
        np.multiply(v, state.beta2, out=v)
        np.multiply(g, g, out=tmp)
        np.multiply(tmp, 1.0 - state.beta2, out=tmp)
        np.add(v, tmp, out=v)
        # p -= lr * mhat / (sqrt(vhat) + eps) with mhat = m/c1, vhat = v/c2
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        np.add(tmp, state.eps, out=tmp)
        np.divide(m, tmp, out=tmp)
        np.multiply(tmp, lr / c1, out=tmp)
        np.subtract(p, tmp, out=p)


@dataclass
class TrainState:
    """Everything needed to resume training mid-run."""

    iteration: int
    lr: float
    adam: AdamState
    normalization_scale: float


@dataclass
class TrainResult:
    grid: TransientFieldGrid
    log: list[tuple[int, float, float]]
    normalization_scale: float
    state: TrainState


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


def milestone_iterations(cfg: TrainConfig) -> list[int]:
    """Iteration indices after which the learning rate is annealed."""
    return sorted({int(np.floor(f * cfg.total_iters)) for f in cfg.anneal_milestones})


def train(
    grid: TransientFieldGrid,
    views: list[tuple[TransientVideo, CameraModel]],
    tcfg: TrainConfig,
    rcfg: RenderConfig,
    resume: TrainState | None = None,
    checkpoint_cb=None,
) -> TrainResult:
    """Fit the grid to measured views by stochastic ray batches.

    views pairs each measured video with its camera. The grid is updated in
    place and returned. checkpoint_cb, when given, is called as
    cb(iteration, grid, state, log_rows) after each milestone and at the
    end, so callers can persist restart points; resuming an interrupted
    run with the same config continues the identical iterate sequence.
    Identical seeds, config, and data give a bitwise-identical loss log.
    """
    if not views:
        raise ConfigError("training needs at least one view")
    n, c = grid.n_bins, grid.channels
    for video, cam in views:
        if video.n_bins != n or video.channels != c:
            raise ShapeError(
                f"video bins/channels ({video.n_bins}, {video.channels}) "
                f"do not match the grid ({n}, {c})"
            )
        if abs(video.bin_width_s - grid.bin_width_s) > 1e-9 * grid.bin_width_s:
            raise ConfigError("video bin width does not match the grid")
        if video.height != cam.height or video.width != cam.width:
            raise ShapeError("video and camera image sizes differ")

    params = grid.parameters()
    if resume is not None:
        adam = resume.adam
        lr = resume.lr
        start = resume.iteration
        scale = resume.normalization_scale
    else:
        adam = AdamState.for_params(params)
        lr = tcfg.lr
        start = 0
        scale = tcfg.normalization_scale
        if scale is None:
            allbins = np.concatenate([v.data.reshape(-1) for v, _ in views])
            scale = float(np.percentile(allbins, 99.9))
            if not np.isfinite(scale) or scale <= 0:
                scale = 1.0
    if start >= tcfg.total_iters:
        raise ConfigError(f"resume iteration {start} is past total_iters {tcfg.total_iters}")

    targets = []
    origins = []
    dirs = []
    for video, cam in views:
        targets.append(
            gamma_compress(video.data.astype(np.float64) / scale, tcfg.gamma)
            .astype(np.float32)
            .reshape(-1, c, n)
        )
        o, d = camera_ray_grid(cam)
        origins.append(o)
        dirs.append(d.reshape(-1, 3))
    rays_per_view = np.asarray([t.shape[0] for t in targets])
    total_rays = int(rays_per_view.sum())
    targets = np.concatenate(targets, axis=0)
    dirs = np.concatenate(dirs, axis=0)
    view_origin = np.stack(origins)
    view_of_ray = np.repeat(np.arange(len(views)), rays_per_view)

    milestones = set(milestone_iterations(tcfg))
    grads = GridGradients.zeros_like(grid)
    log: list[tuple[int, float, float]] = []

    for it in range(start + 1, tcfg.total_iters + 1):
        rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, it)))
        sel = rng.integers(0, total_rays, size=tcfg.batch_rays)
        res = render_ray_batch(
            grid,
            view_origin[view_of_ray[sel]],
            dirs[sel],
            rcfg,
            seed=_derived_seed(tcfg.seed, it, 1),
            keep_backward=True,
        )
        value, d_out = _quadratic_loss(res.transient, targets[sel])
        grads.density_raw.fill(0)
        grads.transient_raw.fill(0)
        if grads.sh_coeffs is not None:
            grads.sh_coeffs.fill(0)
        render_ray_batch_gradient(grid, res, d_out, grads)
        adam_step(params, grads.as_dict(), adam, lr)

        if it % tcfg.log_every == 0 or it == tcfg.total_iters:
            log.append((it, value, lr))
        hit_milestone = it in milestones
        if hit_milestone:
            lr *= tcfg.anneal_factor
        if checkpoint_cb is not None and (hit_milestone or it == tcfg.total_iters):
            checkpoint_cb(it, grid, TrainState(it, lr, adam, scale), list(log))

    return TrainResult(
        grid=grid,
        log=log,
        normalization_scale=scale,
        state=TrainState(tcfg.total_iters, lr, adam, scale),
    )
