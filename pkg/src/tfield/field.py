"""Optimizable transient field: a dense voxel grid of raw density and
time-binned radiance parameters.

Raw parameters pass through a softplus so activated density and transients
stay positive while gradients flow everywhere. Values are trilinearly
interpolated from the 8 surrounding grid nodes; nodes span the axis-aligned
bounding box inclusively, so a grid with resolution (Gx, Gy, Gz) has its
corner nodes exactly on the box corners. Queries outside the box return
zero density and a zero transient.

An optional per-voxel spherical-harmonic coefficient block modulates the
transient by a nonnegative-clamped directional factor, giving mild
view dependence; by default the field is isotropic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .core import ConfigError, InvalidDataError, InvalidInputError, ShapeError

CHECKPOINT_MAGIC = b"TFG1"

# real spherical harmonic constants, orders 0..2
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
          1.0925484305920792, 0.5462742152960396)


def softplus(x: np.ndarray) -> np.ndarray:
    """Numerically stable log(1 + exp(x))."""
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus_and_sigmoid(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softplus and its derivative (the sigmoid) sharing one exp evaluation."""
    x = np.asarray(x)
    t = np.exp(-np.abs(x))
    sp = np.maximum(x, 0) + np.log1p(t)
    u = 1.0 / (1.0 + t)  # sigmoid(|x|); sigmoid(-|x|) = 1 - u
    sig = np.where(x >= 0, u, 1.0 - u)
    return sp, sig.astype(x.dtype, copy=False)


def inv_softplus(y: float) -> float:
    """Inverse of softplus for positive y."""
    if y <= 0:
        raise InvalidInputError(f"inv_softplus needs y > 0, got {y}")
    return float(np.log(np.expm1(y)))


def sh_basis(dirs: np.ndarray, order: int) -> np.ndarray:
    """Real spherical-harmonic basis values for unit directions.

    Returns shape dirs.shape[:-1] + ((order + 1)**2,). order must be 0..2.
    """
    if order not in (0, 1, 2):
        raise ConfigError(f"sh order must be 0, 1, or 2, got {order}")
    d = np.asarray(dirs, dtype=np.float64)
    out = np.empty(d.shape[:-1] + ((order + 1) ** 2,), dtype=np.float64)
    out[..., 0] = _SH_C0
    if order >= 1:
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        out[..., 1] = -_SH_C1 * y
        out[..., 2] = _SH_C1 * z
        out[..., 3] = -_SH_C1 * x
    if order >= 2:
        out[..., 4] = _SH_C2[0] * x * y
        out[..., 5] = -_SH_C2[1] * y * z
        out[..., 6] = _SH_C2[2] * (3.0 * z * z - 1.0)
        out[..., 7] = -_SH_C2[3] * x * z
        out[..., 8] = _SH_C2[4] * (x * x - y * y)
    return out


@dataclass
class TransientFieldGrid:
    """Dense voxel grid of raw (pre-activation) field parameters.

    density_raw has shape resolution; transient_raw has shape
    resolution + (channels * n_bins,) with each node's bins stored
    contiguously per channel. sh_coeffs, if present, has shape
    resolution + (K,) with K = (sh_order + 1)**2.
    """

    resolution: tuple[int, int, int]
    aabb: np.ndarray
    density_raw: np.ndarray
    transient_raw: np.ndarray
    n_bins: int
    bin_width_s: float
    channels: int = 1
    sh_coeffs: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.resolution = tuple(int(r) for r in self.resolution)
        if len(self.resolution) != 3 or any(r < 1 for r in self.resolution):
            raise ConfigError(f"resolution must be three positive ints, got {self.resolution}")
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        if not np.all(np.isfinite(self.aabb)) or not np.all(self.aabb[0] < self.aabb[1]):
            raise ConfigError("aabb must be finite with min < max per axis")
        if self.n_bins < 1:
            raise ConfigError(f"n_bins must be positive, got {self.n_bins}")
        if not (np.isfinite(self.bin_width_s) and self.bin_width_s > 0):
            raise ConfigError(f"bin_width_s must be positive, got {self.bin_width_s}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.density_raw.shape != self.resolution:
            raise ShapeError(
                f"density_raw shape {self.density_raw.shape} != resolution {self.resolution}"
            )
        want = self.resolution + (self.channels * self.n_bins,)
        if self.transient_raw.shape != want:
            raise ShapeError(f"transient_raw shape {self.transient_raw.shape} != {want}")
        if self.sh_coeffs is not None:
            k = self.sh_coeffs.shape[-1]
            if self.sh_coeffs.shape != self.resolution + (k,) or k not in (1, 4, 9):
                raise ShapeError(f"sh_coeffs shape {self.sh_coeffs.shape} invalid")

    @property
    def n_nodes(self) -> int:
        gx, gy, gz = self.resolution
        return gx * gy * gz

    @property
    def sh_order(self) -> int | None:
        if self.sh_coeffs is None:
            return None
        return {1: 0, 4: 1, 9: 2}[self.sh_coeffs.shape[-1]]

    def parameters(self) -> dict[str, np.ndarray]:
        p = {"density_raw": self.density_raw, "transient_raw": self.transient_raw}
        if self.sh_coeffs is not None:
            p["sh_coeffs"] = self.sh_coeffs
        return p


DENSITY_INIT = 0.1
TRANSIENT_INIT = 1e-3


def create_grid(
    resolution,
    aabb,
    n_bins: int,
    bin_width_s: float,
    channels: int = 1,
    sh_order: int | None = None,
    dtype=np.float32,
) -> TransientFieldGrid:
    """Freshly initialized grid: activated density 0.1, transient 1e-3 per bin."""
    resolution = tuple(int(r) for r in resolution)
    density = np.full(resolution, inv_softplus(DENSITY_INIT), dtype=dtype)
    transient = np.full(
        resolution + (channels * n_bins,), inv_softplus(TRANSIENT_INIT), dtype=dtype
    )
    sh = None
    if sh_order is not None:
        k = (int(sh_order) + 1) ** 2
        sh = np.zeros(resolution + (k,), dtype=dtype)
        sh[..., 0] = 1.0 / _SH_C0  # unit modulation at init
    return TransientFieldGrid(
        resolution=resolution,
        aabb=np.asarray(aabb, dtype=np.float64),
        density_raw=density,
        transient_raw=transient,
        n_bins=int(n_bins),
        bin_width_s=float(bin_width_s),
        channels=int(channels),
        sh_coeffs=sh,
    )


@dataclass
class GridGradients:
    """Gradient buffers matching a grid's raw parameter arrays."""

    density_raw: np.ndarray
    transient_raw: np.ndarray
    sh_coeffs: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, grid: TransientFieldGrid) -> "GridGradients":
        sh = None if grid.sh_coeffs is None else np.zeros_like(grid.sh_coeffs)
        return cls(
            density_raw=np.zeros_like(grid.density_raw),
            transient_raw=np.zeros_like(grid.transient_raw),
            sh_coeffs=sh,
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        d = {"density_raw": self.density_raw, "transient_raw": self.transient_raw}
        if self.sh_coeffs is not None:
            d["sh_coeffs"] = self.sh_coeffs
        return d


@dataclass
class FieldSample:
    """Activated field values at one point: scalar density and a transient."""

    sigma: float
    transient: np.ndarray


@dataclass
class InterpCache:
    """Trilinear interpolation footprint reused by the backward pass."""

    node_index: np.ndarray  # (S, 8) flat node indices
    weight: np.ndarray      # (S, 8)
    inside: np.ndarray      # (S,) bool


_CORNERS = np.array(
    [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]],
    dtype=np.int64,
)


def interp_weights(grid: TransientFieldGrid, pts: np.ndarray) -> InterpCache:
    """Node indices and trilinear weights for a batch of points (S, 3)."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must be (S, 3), got {pts.shape}")
    res = np.asarray(grid.resolution, dtype=np.int64)
    lo, hi = grid.aabb[0], grid.aabb[1]
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)

    q = (pts - lo) / (hi - lo) * np.maximum(res - 1, 1)
    q = np.where(res > 1, q, 0.0)
    q = np.clip(q, 0.0, np.maximum(res - 1, 0))
    i0 = np.minimum(np.floor(q).astype(np.int64), np.maximum(res - 2, 0))
    t = q - i0
    i1 = np.minimum(i0 + 1, res - 1)

    sx = res[1] * res[2]
    sy = res[2]
    s = pts.shape[0]
    idx = np.empty((s, 8), dtype=np.int64)
    wgt = np.empty((s, 8), dtype=np.float64)
    for c, (ox, oy, oz) in enumerate(_CORNERS):
        ix = i1[:, 0] if ox else i0[:, 0]
        iy = i1[:, 1] if oy else i0[:, 1]
        iz = i1[:, 2] if oz else i0[:, 2]
        idx[:, c] = ix * sx + iy * sy + iz
        wx = t[:, 0] if ox else 1.0 - t[:, 0]
        wy = t[:, 1] if oy else 1.0 - t[:, 1]
        wz = t[:, 2] if oz else 1.0 - t[:, 2]
        wgt[:, c] = wx * wy * wz
    return InterpCache(node_index=idx, weight=wgt, inside=inside)


def interp_raw(
    grid: TransientFieldGrid, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray, InterpCache]:
    """Interpolated raw density (S,) and raw transient (S, channels*n_bins)."""
    cache = interp_weights(grid, pts)
    dtype = grid.density_raw.dtype
    wgt = cache.weight.astype(dtype)
    dflat = grid.density_raw.reshape(-1)
    tflat = grid.transient_raw.reshape(grid.n_nodes, -1)
    sig_raw = np.einsum("sc,sc->s", wgt, dflat[cache.node_index])
    # accumulate corner by corner instead of materializing the (S, 8, C*N) gather
    idx = cache.node_index
    tau_raw = wgt[:, 0, None] * tflat[idx[:, 0]]
    for corner in range(1, 8):
        tau_raw += wgt[:, corner, None] * tflat[idx[:, corner]]
    return sig_raw, tau_raw, cache


def sh_modulation(
    grid: TransientFieldGrid, cache: InterpCache, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped directional modulation m (S,), basis (S, K), interpolated coeffs."""
    order = grid.sh_order
    basis = sh_basis(dirs, order)
    cflat = grid.sh_coeffs.reshape(grid.n_nodes, -1)
    coef = np.einsum("sc,sck->sk", cache.weight, cflat[cache.node_index])
    raw = np.einsum("sk,sk->s", coef, basis)
    return np.maximum(raw, 0.0), basis, raw


def query(grid: TransientFieldGrid, p, d=None) -> FieldSample:
    """Activated field values at point p viewed along unit direction d.

    Points outside the grid's box return sigma 0 and an all-zero transient.
    """
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("query point must be finite")
    if d is not None:
        d = np.asarray(d, dtype=np.float64).reshape(1, 3)
        if not np.all(np.isfinite(d)):
            raise InvalidInputError("query direction must be finite")
    sig_raw, tau_raw, cache = interp_raw(grid, p)
    sigma = softplus(sig_raw)
    tau = softplus(tau_raw)
    if grid.sh_coeffs is not None and d is not None:
        m, _, _ = sh_modulation(grid, cache, d)
        tau = tau * m[:, None]
    if not cache.inside[0]:
        return FieldSample(sigma=0.0, transient=np.zeros(tau.shape[1], dtype=tau.dtype))
    return FieldSample(sigma=float(sigma[0]), transient=tau[0])


def accumulate_point_gradients(
    grid: TransientFieldGrid,
    cache: InterpCache,
    d_sig_raw: np.ndarray,
    d_tau_raw: np.ndarray,
    out: GridGradients,
    d_sh: np.ndarray | None = None,
) -> GridGradients:
    """Scatter per-point raw-parameter gradients into grid-shaped buffers.

    d_sig_raw is (S,), d_tau_raw is (S, channels*n_bins). Contributions from
    points outside the box are dropped. The scatter runs as one sparse
    matrix product so accumulation order is fixed and deterministic.
    """
    idx = cache.node_index
    wgt = cache.weight * cache.inside[:, None]
    s = idx.shape[0]
    rows = idx.reshape(-1)
    cols = np.repeat(np.arange(s, dtype=np.int64), 8)
    w = sparse.csr_matrix(
        (wgt.reshape(-1), (rows, cols)), shape=(grid.n_nodes, s), dtype=out.transient_raw.dtype
    )
    out.transient_raw.reshape(grid.n_nodes, -1)[...] += w @ np.ascontiguousarray(d_tau_raw)
    out.density_raw.reshape(-1)[...] += w @ np.ascontiguousarray(d_sig_raw)
    if d_sh is not None and out.sh_coeffs is not None:
        out.sh_coeffs.reshape(grid.n_nodes, -1)[...] += w @ np.ascontiguousarray(d_sh)
    return out


def query_gradient(
    grid: TransientFieldGrid,
    p,
    d,
    upstream_sigma: float,
    upstream_transient: np.ndarray,
) -> GridGradients:
    """Gradients of (upstream_sigma * sigma + upstream_transient . transient)
    with respect to the grid's raw parameters, via the hand-derived chain
    rule through softplus and the trilinear weights.
    """
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    up_tau = np.asarray(upstream_transient, dtype=np.float64).reshape(1, -1)
    want = grid.channels * grid.n_bins
    if up_tau.shape[1] != want:
        raise ShapeError(f"upstream transient has {up_tau.shape[1]} entries, field has {want}")
    sig_raw, tau_raw, cache = interp_raw(grid, p)
    _, sig_d = softplus_and_sigmoid(sig_raw)
    tau_act, tau_d = softplus_and_sigmoid(tau_raw)

    d_sh = None
    if grid.sh_coeffs is not None and d is not None:
        m, basis, raw = sh_modulation(grid, cache, np.asarray(d, dtype=np.float64).reshape(1, 3))
        d_tau_act = up_tau * m[:, None]
        d_m = np.einsum("sn,sn->s", up_tau, tau_act) * (raw > 0)
        d_sh = d_m[:, None] * basis
    else:
        d_tau_act = up_tau

    grads = GridGradients.zeros_like(grid)
    accumulate_point_gradients(
        grid,
        cache,
        np.asarray([float(upstream_sigma)]) * sig_d,
        d_tau_act * tau_d,
        grads,
        d_sh=d_sh,
    )
    return grads


def save_checkpoint(grid: TransientFieldGrid, path) -> None:
    """Write the grid to the binary checkpoint format.

    Layout (little-endian): magic "TFG1"; u32 Gx, Gy, Gz; f64 aabb min xyz
    then max xyz; u32 n_bins; f64 bin_width_s; u32 channels; u32 sh_K
    (0 when absent); then float32 density_raw, transient_raw, and sh arrays.
    Node order is x-fastest (flat index x + Gx*(y + Gy*z)); each node's
    channel*bin block (or K coefficients) is stored contiguously.
    """
    gx, gy, gz = grid.resolution
    sh_k = 0 if grid.sh_coeffs is None else grid.sh_coeffs.shape[-1]
    header = struct.pack(
        "<4s3I6dId2I",
        CHECKPOINT_MAGIC,
        gx,
        gy,
        gz,
        *grid.aabb.reshape(-1),
        grid.n_bins,
        grid.bin_width_s,
        grid.channels,
        sh_k,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(grid.density_raw.transpose(2, 1, 0), dtype="<f4").tobytes())
        f.write(
            np.ascontiguousarray(grid.transient_raw.transpose(2, 1, 0, 3), dtype="<f4").tobytes()
        )
        if grid.sh_coeffs is not None:
            f.write(
                np.ascontiguousarray(grid.sh_coeffs.transpose(2, 1, 0, 3), dtype="<f4").tobytes()
            )


def load_checkpoint(path) -> TransientFieldGrid:
    """Read a grid written by save_checkpoint. Rejects bad magic or short files."""
    with open(path, "rb") as f:
        blob = f.read()
    head_fmt = "<4s3I6dId2I"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size:
        raise InvalidDataError(f"checkpoint too short to hold a header: {path}")
    magic, gx, gy, gz, *rest = struct.unpack_from(head_fmt, blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise InvalidDataError(f"bad checkpoint magic {magic!r} in {path}")
    aabb = np.asarray(rest[:6], dtype=np.float64).reshape(2, 3)
    n_bins = int(rest[6])
    bin_width_s = float(rest[7])
    channels = int(rest[8])
    sh_k = int(rest[9])
    n_nodes = gx * gy * gz
    cn = channels * n_bins
    want = head_size + 4 * (n_nodes + n_nodes * cn + n_nodes * sh_k)
    if len(blob) != want:
        raise InvalidDataError(f"checkpoint size {len(blob)} != expected {want}: {path}")

    off = head_size
    density = np.frombuffer(blob, dtype="<f4", count=n_nodes, offset=off)
    off += 4 * n_nodes
    density = density.reshape(gz, gy, gx).transpose(2, 1, 0).copy()
    transient = np.frombuffer(blob, dtype="<f4", count=n_nodes * cn, offset=off)
    off += 4 * n_nodes * cn
    transient = transient.reshape(gz, gy, gx, cn).transpose(2, 1, 0, 3).copy()
    sh = None
    if sh_k:
        sh = np.frombuffer(blob, dtype="<f4", count=n_nodes * sh_k, offset=off)
        sh = sh.reshape(gz, gy, gx, sh_k).transpose(2, 1, 0, 3).copy()
    return TransientFieldGrid(
        resolution=(gx, gy, gz),
        aabb=aabb,
        density_raw=density,
        transient_raw=transient,
        n_bins=n_bins,
        bin_width_s=bin_width_s,
        channels=channels,
        sh_coeffs=sh,
    )
