"""tfield: fit and render time-resolved radiance volumes.

The package fits an optimizable transient field (per-voxel density plus a
time-binned radiance histogram) to multi-viewpoint transient videos and
renders videos of light propagating through the reconstruction from novel
static or moving viewpoints, including propagation-delay modeling, time
warping, relativistic camera effects, and direct/global separation. A
ground-truth simulator with an analytic scene model and a pulsed-laser
single-photon measurement model generates datasets end to end.
"""

from .core import (
    CONSTANTS,
    SPEED_OF_LIGHT_M_S,
    CameraModel,
    CameraError,
    ConfigError,
    InvalidDataError,
    InvalidInputError,
    NumericalError,
    PhysicalConstants,
    Ray,
    ShapeError,
    TransientHistogram,
    TransientVideo,
    pixel_to_ray,
    shift_bins,
    shift_histogram,
)
from .field import (
    FieldSample,
    GridGradients,
    TransientFieldGrid,
    create_grid,
    load_checkpoint,
    query,
    query_gradient,
    save_checkpoint,
)
from .renderer import (
    RenderConfig,
    render_depth,
    render_transient,
    render_transient_gradient,
    render_transmittance,
    render_video_dynamic,
    render_video_static,
)
from .optim import AdamState, TrainConfig, adam_step, loss_and_gradient, train
from .io import (
    load_dataset,
    read_camera,
    read_manifest,
    read_trajectory,
    read_transient_video,
    write_camera,
    write_manifest,
    write_trajectory,
    write_transient_video,
)
from .simdata import (
    AnalyticScene,
    AxisPlane,
    Light,
    SimulationSetup,
    SpadModel,
    Sphere,
    generate_dataset,
    hemisphere_cameras,
    ideal_transient,
    load_scene_file,
    measure,
    measure_video,
    render_ideal_video,
)
from .metrics import (
    EvalReport,
    evaluate,
    integrate_and_tonemap,
    psnr,
    ssim,
    transient_iou,
    video_iou,
)
from .apps import (
    GmmFit,
    RelativisticCamera,
    WarpSpec,
    aberrate_cos,
    aberrate_directions,
    doppler_factor,
    fit_transient_gmm,
    lorentz_gamma,
    render_relativistic,
    separate_direct_global,
    warp_video,
)
from .viz import PeakTimeImage, composite_over_image, peak_time_image, save_png

__version__ = "0.1.0"
