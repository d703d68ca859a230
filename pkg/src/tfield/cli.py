"""Command-line surface: simulate | train | render | warp | separate | eval.

Every command is deterministic under a fixed seed and prints one
"wrote <path>" line per artifact. Exit codes: 0 success, 2 usage or
contract violation (including missing input files), 3 I/O or corrupt-data
failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as tio
from .apps import RelativisticCamera, WarpSpec, render_relativistic, separate_direct_global, warp_video
from .core import (
    CameraError,
    CameraModel,
    ConfigError,
    InvalidDataError,
    InvalidInputError,
    NumericalError,
    ShapeError,
    TransientVideo,
)
from .field import TransientFieldGrid, create_grid, load_checkpoint, save_checkpoint
from .metrics import evaluate, integrate_and_tonemap
from .optim import AdamState, TrainConfig, TrainState, train
from .renderer import RenderConfig, render_video_dynamic, render_video_static
from .simdata import generate_dataset, load_scene_file
from .viz import (
    DEFAULT_ISOCHRONE_PERIOD,
    composite_over_image,
    normalize_frames,
    peak_time_image,
    save_frame_sequence,
    save_png,
)

USAGE_EXIT = 2
IO_EXIT = 3
NUMERICAL_EXIT = 4


class _StopTraining(Exception):
    """Raised from the checkpoint callback to honor --stop-after."""


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured RNG seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for rendering")
    common.add_argument("--config", type=Path, default=None, help="YAML config file")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tfield",
        description="Fit and render time-resolved light-transport fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic SPAD dataset")
    p.add_argument("scene", type=Path, help="scene description file (INI)")
    p.add_argument("out_dir", type=Path, help="output dataset directory")
    p.add_argument("--skip-ideal", action="store_true", help="do not write noiseless reference videos")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="fit a field to a dataset")
    p.add_argument("dataset", type=Path, help="dataset directory or manifest path")
    p.add_argument("out", type=Path, help="output checkpoint path")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, metavar="ITER",
                   help="stop at the first checkpoint milestone at or after this "
                        "iteration, leaving resumable artifacts")
    p.add_argument("--no-propagation-delay", action="store_true",
                   help="disable camera propagation-delay modeling")
    _add_render_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a checkpoint to frames")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("out_dir", type=Path, help="output directory for frames")
    p.add_argument("--camera", type=Path, default=None, help="camera JSON for a static render")
    p.add_argument("--trajectory", type=Path, default=None, help="trajectory JSON (one pose per bin)")
    p.add_argument("--dynamic", action="store_true", help="render frame n from trajectory pose n")
    p.add_argument("--slice", type=int, default=None, metavar="BIN",
                   help="also write a grayscale image of one time bin")
    p.add_argument("--peak-time", action="store_true", help="also write a peak-time image")
    p.add_argument("--isochrone-period", type=int, default=DEFAULT_ISOCHRONE_PERIOD,
                   help="isochrone band spacing in bins for --peak-time")
    p.add_argument("--composite", action="store_true",
                   help="blend frames over the time-integrated image")
    p.add_argument("--save-video", action="store_true", help="also write the raw transient video")
    p.add_argument("--beta", type=float, default=0.0, help="camera speed as a fraction of c")
    p.add_argument("--motion-direction", type=float, nargs=3, default=(0.0, 0.0, 1.0),
                   metavar=("X", "Y", "Z"), help="camera motion direction for --beta")
    p.add_argument("--doppler-exponent", type=int, default=3,
                   help="brightness boost exponent for --beta")
    _add_render_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("warp", parents=[common], help="re-reference transient timing")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--camera", type=Path, required=True, help="camera JSON")
    p.add_argument("--mode", choices=("depth-based", "reference-surface"), default="depth-based")
    p.add_argument("--sign", choices=("remove-delay", "add-delay"), default="remove-delay")
    p.add_argument("--surface", choices=("sphere", "plane"), default=None)
    p.add_argument("--center", type=float, nargs=3, default=None, metavar=("X", "Y", "Z"))
    p.add_argument("--radius", type=float, default=0.0)
    p.add_argument("--normal", type=float, nargs=3, default=None, metavar=("X", "Y", "Z"))
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--save-video", action="store_true", help="also write the warped transient video")
    _add_render_flags(p)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("separate", parents=[common], help="split a video into direct and global light")
    p.add_argument("video", type=Path, help="input transient video (.trv)")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--pulse-fwhm-bins", type=float, default=None,
                   help="illumination pulse FWHM in time bins")
    p.add_argument("--pulse-fwhm-ps", type=float, default=None,
                   help="illumination pulse FWHM in picoseconds")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on held-out views")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path, help="dataset directory or manifest path")
    p.add_argument("--out", type=Path, default=Path("eval_report.csv"), help="report CSV path")
    p.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    p.add_argument("--reference", choices=("ideal", "measured"), default="ideal",
                   help="compare against noiseless expected counts or raw measurements")
    p.add_argument("--undo-gamma", action="store_true",
                   help="expand predictions back to count space before scoring")
    p.add_argument("--gamma", type=float, default=None,
                   help="compression exponent (default: from the checkpoint metadata)")
    _add_render_flags(p)
    p.set_defaults(func=cmd_eval)

    return parser


def _add_render_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--samples", type=int, default=None, help="ray-march samples per ray")
    p.add_argument("--s-near", type=float, default=None, help="march start distance (m)")
    p.add_argument("--s-far", type=float, default=None, help="march end distance (m)")
    if not any(a.dest == "no_propagation_delay" for a in p._actions):
        p.add_argument("--no-propagation-delay", action="store_true",
                       help="disable camera propagation-delay modeling")


def _load_config(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    return tio.load_yaml_config(args.config)


def _find_manifest(path: Path) -> Path:
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(2, "no such file", str(path))
    return path


def _auto_march_range(grid: TransientFieldGrid, cameras: list[CameraModel]) -> tuple[float, float]:
    """March range bracketing the grid volume from every given camera."""
    center = grid.aabb.mean(axis=0)
    diag = float(np.linalg.norm(grid.aabb[1] - grid.aabb[0]))
    dists = [float(np.linalg.norm(cam.cam_to_world[:3, 3] - center)) for cam in cameras]
    s_near = max(1e-6, min(dists) - diag)
    s_far = max(dists) + diag
    return s_near, s_far


def _render_config(args, cfg: dict, grid: TransientFieldGrid, cameras: list[CameraModel]) -> RenderConfig:
    """Build a RenderConfig: explicit flags beat the config file beats auto."""
    section = dict(cfg.get("render", {}))
    if args.samples is not None:
        section["n_samples"] = args.samples
    if args.s_near is not None:
        section["s_near"] = args.s_near
    if args.s_far is not None:
        section["s_far"] = args.s_far
    if "s_near" not in section or "s_far" not in section:
        near, far = _auto_march_range(grid, cameras)
        section.setdefault("s_near", near)
        section.setdefault("s_far", far)
    section.setdefault("n_samples", 96)
    if getattr(args, "no_propagation_delay", False):
        section["model_propagation_delay"] = False
    try:
        return RenderConfig(**section)
    except TypeError as e:
        raise ConfigError(f"bad render config: {e}") from None


def _video_frames(data: np.ndarray) -> np.ndarray:
    """(h, w, c, n) video data to a normalized (n, h, w) grayscale stack."""
    frames = np.moveaxis(data.astype(np.float64).mean(axis=2), -1, 0)
    return normalize_frames(frames)


def cmd_simulate(args) -> int:
    setup = load_scene_file(args.scene)
    if args.seed is not None:
        setup.seed = args.seed
    manifest = generate_dataset(setup, args.out_dir, write_ideal=not args.skip_ideal)
    n_views = len(manifest["views"])
    print(
        f"simulated {n_views} views, {manifest['n_bins']} bins x "
        f"{manifest['bin_width_s'] * 1e12:.3g} ps, "
        f"normalization scale {manifest['normalization_scale']:.6g}"
    )
    print(f"wrote {Path(args.out_dir) / 'manifest.json'}")
    return 0


def _train_setup(cfg: dict, manifest: dict) -> tuple[TransientFieldGrid, TrainConfig]:
    gsec = cfg.get("grid")
    if not gsec or "resolution" not in gsec or "aabb" not in gsec:
        raise ConfigError("training config needs a [grid] section with resolution and aabb")
    grid = create_grid(
        tuple(gsec["resolution"]),
        gsec["aabb"],
        manifest["n_bins"],
        manifest["bin_width_s"],
        channels=int(gsec.get("channels", 1)),
        sh_order=gsec.get("sh_order"),
    )
    tsec = dict(cfg.get("train", {}))
    tsec.setdefault("normalization_scale", manifest.get("normalization_scale"))
    try:
        tcfg = TrainConfig(**tsec)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from None
    return grid, tcfg


def _resume_state(path: Path) -> tuple[TransientFieldGrid, TrainState]:
    grid = load_checkpoint(path)
    meta, adam = tio.load_train_sidecar(path)
    if adam is None:
        raise ConfigError(f"{path}: no optimizer sidecar; cannot resume")
    state = TrainState(
        iteration=int(meta["iteration"]),
        lr=float(meta["lr"]),
        adam=AdamState(m=adam["m"], v=adam["v"], step=adam["step"]),
        normalization_scale=float(meta["normalization_scale"]),
    )
    return grid, state


def cmd_train(args) -> int:
    manifest_path = _find_manifest(args.dataset)
    videos, cameras, manifest = tio.load_dataset(manifest_path)
    cfg = _load_config(args)
    if not cfg:
        raise ConfigError("train needs --config with grid/render/train sections")

    grid, tcfg = _train_setup(cfg, manifest)
    resume = None
    if args.resume is not None:
        grid, resume = _resume_state(args.resume)
    if args.seed is not None:
        tcfg = TrainConfig(**{**tcfg.__dict__, "seed": args.seed})

    train_idx = manifest.get("splits", {}).get("train", list(range(len(videos))))
    pairs = [(videos[v], cameras[v]) for v in train_idx]
    rcfg = _render_config(args, cfg, grid, [cameras[v] for v in train_idx])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_path = out.with_name(out.name + ".loss.csv")
    prior_log: list[tuple[int, float, float]] = []
    if resume is not None and loss_path.exists():
        prior_log = [r for r in tio.read_loss_log(loss_path) if r[0] <= resume.iteration]

    # persist a restart point at every milestone so an interrupted run can
    # be resumed with the same config and land on the identical iterates
    def checkpoint_cb(it: int, grid_, state: TrainState, log_rows: list) -> None:
        save_checkpoint(grid_, out)
        meta = {
            "iteration": state.iteration,
            "lr": state.lr,
            "normalization_scale": state.normalization_scale,
            "gamma": tcfg.gamma,
            "dataset": str(manifest_path),
            "propagation_delay": rcfg.model_propagation_delay,
        }
        adam = {"m": state.adam.m, "v": state.adam.v, "step": state.adam.step}
        tio.save_train_sidecar(out, meta, adam)
        tio.write_loss_log(loss_path, prior_log + log_rows)
        if args.stop_after is not None and it >= args.stop_after:
            raise _StopTraining(it)

    try:
        result = train(grid, pairs, tcfg, rcfg, resume=resume, checkpoint_cb=checkpoint_cb)
    except _StopTraining as stop:
        print(f"stopped at iteration {stop.args[0]}; continue with --resume {out}")
        for path in (out, out.with_name(out.name + ".meta.json"),
                     out.with_name(out.name + ".adam.npz"), loss_path):
            print(f"wrote {path}")
        return 0

    if result.log:
        first, last = result.log[0], result.log[-1]
        print(f"trained to iteration {last[0]}: loss {first[1]:.6g} -> {last[1]:.6g}")
    for path in (out, out.with_name(out.name + ".meta.json"),
                 out.with_name(out.name + ".adam.npz"), loss_path):
        print(f"wrote {path}")
    return 0


def _emit_video_products(args, data: np.ndarray, bin_width_s: float, out_dir: Path) -> None:
    """Write the requested image products for (h, w, c, n) video data."""
    out_dir.mkdir(parents=True, exist_ok=True)
    n_bins = data.shape[-1]
    frames = _video_frames(data)
    wrote_specific = False

    if args.save_video:
        path = out_dir / "transient.trv"
        tio.write_transient_video(path, TransientVideo(data.astype(np.float32), bin_width_s))
        print(f"wrote {path}")
        wrote_specific = True
    if getattr(args, "slice", None) is not None:
        if not 0 <= args.slice < n_bins:
            raise ConfigError(f"--slice must be in [0, {n_bins - 1}], got {args.slice}")
        path = out_dir / f"slice_{args.slice:04d}.png"
        save_png(path, frames[args.slice])
        print(f"wrote {path}")
        wrote_specific = True
    if getattr(args, "peak_time", False):
        img = peak_time_image(data, isochrone_period_bins=args.isochrone_period)
        path = out_dir / "peak_time.png"
        save_png(path, img.to_rgb(isochrones=True))
        print(f"wrote {path}")
        wrote_specific = True
    if getattr(args, "composite", False):
        base = integrate_and_tonemap(data).mean(axis=-1)
        blended = np.stack([composite_over_image(f, base) for f in frames])
        paths = save_frame_sequence(blended, out_dir, prefix="composite")
        print(f"wrote {paths[0]} .. {paths[-1]}")
        wrote_specific = True
    if not wrote_specific:
        paths = save_frame_sequence(frames, out_dir, prefix="frame")
        print(f"wrote {paths[0]} .. {paths[-1]}")


def cmd_render(args) -> int:
    grid = load_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    seed = 0 if args.seed is None else args.seed

    if args.dynamic:
        if args.trajectory is None:
            raise ConfigError("--dynamic needs --trajectory")
        if args.beta != 0.0:
            raise ConfigError("--beta applies to static cameras only")
        trajectory = tio.read_trajectory(args.trajectory)
        rcfg = _render_config(args, cfg, grid, trajectory)
        stack = render_video_dynamic(grid, trajectory, rcfg, seed=seed, threads=args.threads)
        data = np.moveaxis(stack, 0, -1)
        bin_width = grid.bin_width_s
    else:
        if args.camera is None:
            raise ConfigError("static render needs --camera (or pass --dynamic with --trajectory)")
        camera = tio.read_camera(args.camera)
        rcfg = _render_config(args, cfg, grid, [camera])
        if args.beta != 0.0:
            relcam = RelativisticCamera(
                base_camera=camera,
                beta=args.beta,
                motion_direction=np.asarray(args.motion_direction, dtype=np.float64),
                doppler_exponent=args.doppler_exponent,
            )
            stack = render_relativistic(grid, relcam, rcfg, seed=seed, threads=args.threads)
            data = np.moveaxis(stack, 0, -1)
        else:
            data = render_video_static(grid, camera, rcfg, seed=seed, threads=args.threads).data
        bin_width = grid.bin_width_s

    _emit_video_products(args, data, bin_width, Path(args.out_dir))
    return 0


def cmd_warp(args) -> int:
    grid = load_checkpoint(args.checkpoint)
    camera = tio.read_camera(args.camera)
    cfg = _load_config(args)
    rcfg = _render_config(args, cfg, grid, [camera])
    spec = WarpSpec(
        mode=args.mode,
        sign=args.sign,
        surface=args.surface,
        center=args.center,
        radius=args.radius,
        normal=args.normal,
        offset=args.offset,
    )
    seed = 0 if args.seed is None else args.seed
    video = warp_video(grid, camera, rcfg, spec, seed=seed)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.save_video:
        path = out_dir / "warped.trv"
        tio.write_transient_video(path, video)
        print(f"wrote {path}")
    paths = save_frame_sequence(_video_frames(video.data), out_dir, prefix="frame")
    print(f"wrote {paths[0]} .. {paths[-1]}")
    return 0


def cmd_separate(args) -> int:
    video = tio.read_transient_video(args.video)
    if (args.pulse_fwhm_bins is None) == (args.pulse_fwhm_ps is None):
        raise ConfigError("give exactly one of --pulse-fwhm-bins or --pulse-fwhm-ps")
    if args.pulse_fwhm_bins is not None:
        fwhm_bins = args.pulse_fwhm_bins
    else:
        fwhm_bins = args.pulse_fwhm_ps * 1e-12 / video.bin_width_s
    if fwhm_bins <= 0:
        raise ConfigError(f"pulse FWHM must be positive, got {fwhm_bins} bins")

    direct, global_ = separate_direct_global(video, fwhm_bins)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in (("direct", direct), ("global", global_)):
        path = out_dir / f"{name}.trv"
        tio.write_transient_video(path, part)
        print(f"wrote {path}")
        img_path = out_dir / f"{name}.png"
        save_png(img_path, integrate_and_tonemap(part.data).mean(axis=-1))
        print(f"wrote {img_path}")
    return 0


def _eval_gamma(args) -> float:
    if args.gamma is not None:
        return args.gamma
    try:
        meta, _ = tio.load_train_sidecar(args.checkpoint)
        return float(meta["gamma"])
    except (FileNotFoundError, KeyError):
        return 5.0


def cmd_eval(args) -> int:
    grid = load_checkpoint(args.checkpoint)
    manifest_path = _find_manifest(args.dataset)
    videos, cameras, manifest = tio.load_dataset(manifest_path)
    cfg = _load_config(args)
    gamma = _eval_gamma(args)
    scale = float(manifest.get("normalization_scale", 1.0))

    splits = manifest.get("splits", {})
    if args.split == "all":
        view_idx = list(range(len(videos)))
    else:
        view_idx = splits.get(args.split, list(range(len(videos))))
    if not view_idx:
        raise ConfigError(f"dataset has no '{args.split}' views to evaluate")

    reference = args.reference
    entries = manifest["views"]
    if reference == "ideal" and not all("ideal" in entries[v] for v in view_idx):
        print("note: dataset has no ideal reference videos; falling back to measured")
        reference = "measured"

    base = manifest_path.parent
    refs = []
    for v in view_idx:
        if reference == "ideal":
            ideal = tio.read_transient_video(base / entries[v]["ideal"])
            spad = manifest.get("spad", {})
            per_pulse = float(spad.get("pulses", 1.0)) * float(spad.get("efficiency", 1.0))
            counts = ideal.data.astype(np.float64) * per_pulse
        else:
            counts = videos[v].data.astype(np.float64)
        refs.append(counts)

    seed = 0 if args.seed is None else args.seed
    rcfg = _render_config(args, cfg, grid, [cameras[v] for v in view_idx])
    rendered, reference_videos = [], []
    for v, counts in zip(view_idx, refs):
        pred = render_video_static(grid, cameras[v], rcfg, seed=seed, threads=args.threads)
        if args.undo_gamma:
            # score in count space: prediction expands by gamma, reference
            # scales down by the shared normalization so both match pred^g
            rendered.append(TransientVideo(np.maximum(pred.data, 0.0), grid.bin_width_s))
            reference_videos.append(TransientVideo(counts / scale, grid.bin_width_s))
        else:
            compressed = (counts / scale) ** (1.0 / gamma)
            rendered.append(pred)
            reference_videos.append(TransientVideo(compressed, grid.bin_width_s))

    report = evaluate(
        rendered,
        reference_videos,
        gamma=gamma if args.undo_gamma else 1.0,
        view_names=[f"view_{v:03d}" for v in view_idx],
    )
    print(report.pretty())
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out)
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        path = e.filename if e.filename else str(e)
        print(f"error: missing input file: {path}", file=sys.stderr)
        return USAGE_EXIT
    except (ConfigError, InvalidInputError, ShapeError, CameraError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except InvalidDataError as e:
        print(f"error: corrupt data: {e}", file=sys.stderr)
        return IO_EXIT
    except OSError as e:
        print(f"error: I/O failure: {e}", file=sys.stderr)
        return IO_EXIT
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return NUMERICAL_EXIT


if __name__ == "__main__":
    sys.exit(main())
