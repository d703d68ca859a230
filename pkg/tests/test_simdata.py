"""Simulator tests: geometry, radiometry, pulse, SPAD sampling, datasets.

Radiometric oracle: a Lambertian point at distance r from a pulsed point
source of power P, lit at incidence cosine c, reflects exitant radiance

    L = P * albedo / pi * c / r^2,

and that energy arrives (light_path + camera_path) / (c_light * bin_width)
bins after the pulse. Bin width is chosen as 1/c_light so one meter of
path equals exactly one bin.
"""

import numpy as np
import pytest

from tfield.core import ConfigError, InvalidInputError, Ray, ShapeError
from tfield.io import load_dataset
from tfield.simdata import (
    AnalyticScene,
    AxisPlane,
    Light,
    SpadModel,
    Sphere,
    generate_dataset,
    hemisphere_cameras,
    ideal_transient,
    ideal_transient_batch,
    load_scene_file,
    measure,
    measure_video,
    orthonormal_basis,
    pulse_kernel,
    render_ideal_video,
    scene_intersect,
    stratified_hemisphere,
)

C_LIGHT = 299792458.0
ONE_METER_BIN = 1.0 / C_LIGHT  # bin width making 1 m of path = 1 bin


def _floor_scene(albedo=0.6, light_pos=(0.0, 0.0, 0.4), power=2.0, **light_kw):
    floor = AxisPlane(axis=2, offset=0.0, albedo=albedo)
    light = Light(position=light_pos, power=power, pulse_fwhm_s=0.0, **light_kw)
    return AnalyticScene(surfaces=[floor], light=light)


# ── surface validation ───────────────────────────────────────────────────

def test_surface_validation():
    with pytest.raises(ConfigError):
        Sphere(center=(0, 0, 0), radius=0.0, albedo=0.5)
    with pytest.raises(ConfigError):
        Sphere(center=(0, 0, 0), radius=1.0, albedo=1.5)
    with pytest.raises(ConfigError):
        AxisPlane(axis=3, offset=0.0, albedo=0.5)
    with pytest.raises(ConfigError):
        AxisPlane(axis=0, offset=0.0, albedo=0.5, lo=(0, 0), hi=None)
    with pytest.raises(ConfigError):
        AxisPlane(axis=0, offset=0.0, albedo=0.5, lo=(1, 0), hi=(0, 1))


def test_light_validation():
    with pytest.raises(ConfigError):
        Light(position=(0, 0, 1), power=-1.0)
    with pytest.raises(ConfigError):
        Light(position=(0, 0, 1), pulse_fwhm_s=-1e-12)
    with pytest.raises(ConfigError):
        Light(position=(0, 0, 1), kind="collimated")  # needs direction+radius
    with pytest.raises(ConfigError):
        Light(position=(0, 0, 1), kind="laser")
    # legacy alias
    assert Light(position=(0, 0, 1), kind="point-diffused").kind == "point"


def test_spad_validation():
    with pytest.raises(ConfigError):
        SpadModel(pulses=0, efficiency=0.5, dark_rate=0.0, n_bins=4, bin_width_s=1e-12)
    with pytest.raises(ConfigError):
        SpadModel(pulses=10, efficiency=0.0, dark_rate=0.0, n_bins=4, bin_width_s=1e-12)
    with pytest.raises(ConfigError):
        SpadModel(pulses=10, efficiency=0.5, dark_rate=0.0, n_bins=0, bin_width_s=1e-12)
    spad = SpadModel(pulses=100, efficiency=0.5, dark_rate=2e-4, n_bins=4,
                     bin_width_s=1e-12)
    assert spad.background_per_bin == 100 * 2e-4


# ── sampling geometry ────────────────────────────────────────────────────

def test_stratified_hemisphere_is_uniform_in_solid_angle():
    dirs = stratified_hemisphere(64)
    assert dirs.shape == (64, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, rtol=1e-12)
    assert np.all(dirs[:, 2] > 0)
    # cell centers in z average to exactly 1/2 for a uniform-in-z layout
    assert np.isclose(dirs[:, 2].mean(), 0.5, rtol=1e-12)
    assert np.array_equal(dirs, stratified_hemisphere(64))


def test_stratified_hemisphere_handles_prime_counts():
    dirs = stratified_hemisphere(7)
    assert dirs.shape == (7, 3)
    with pytest.raises(ConfigError):
        stratified_hemisphere(0)


def test_orthonormal_basis_is_orthonormal_and_right_handed():
    rng = np.random.default_rng(3)
    n = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    t, b = orthonormal_basis(n)
    assert np.allclose(np.einsum("ij,ij->i", t, n), 0.0, atol=1e-12)
    assert np.allclose(np.einsum("ij,ij->i", b, n), 0.0, atol=1e-12)
    assert np.allclose(np.einsum("ij,ij->i", t, b), 0.0, atol=1e-12)
    assert np.allclose(np.linalg.norm(t, axis=1), 1.0, rtol=1e-12)
    assert np.allclose(np.einsum("ij,ij->i", np.cross(t, b), n), 1.0, rtol=1e-9)


# ── intersection ─────────────────────────────────────────────────────────

def test_sphere_intersection_from_outside_and_inside():
    scene = AnalyticScene(
        surfaces=[Sphere(center=(0, 0, 0), radius=0.5, albedo=0.8)],
        light=Light(position=(0, 0, 2)),
    )
    t, idx, pts, normals, alb = scene_intersect(
        scene, np.array([[0.0, 0.0, -2.0]]), np.array([[0.0, 0.0, 1.0]])
    )
    assert np.isclose(t[0], 1.5)
    assert idx[0] == 0 and alb[0] == 0.8
    assert np.allclose(pts[0], [0, 0, -0.5])
    assert np.allclose(normals[0], [0, 0, -1])  # faces the incoming ray

    t_in, _, _, _, _ = scene_intersect(
        scene, np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])
    )
    assert np.isclose(t_in[0], 0.5)  # the far root from inside


def test_miss_returns_inf_and_negative_index():
    scene = _floor_scene()
    t, idx, _, _, _ = scene_intersect(
        scene, np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 0.0, 1.0]])
    )
    assert np.isinf(t[0]) and idx[0] == -1


def test_bounded_plane_rejects_hits_outside_rectangle():
    plane = AxisPlane(axis=2, offset=0.0, albedo=0.5, lo=(-0.1, -0.1), hi=(0.1, 0.1))
    scene = AnalyticScene(surfaces=[plane], light=Light(position=(0, 0, 1)))
    o = np.array([[0.05, 0.0, 1.0], [0.2, 0.0, 1.0]])
    d = np.tile([[0.0, 0.0, -1.0]], (2, 1))
    t, _, _, _, _ = scene_intersect(scene, o, d)
    assert np.isclose(t[0], 1.0)
    assert np.isinf(t[1])


def test_closest_surface_wins():
    near = Sphere(center=(0, 0, 1.0), radius=0.1, albedo=0.3)
    far = Sphere(center=(0, 0, 2.0), radius=0.1, albedo=0.9)
    scene = AnalyticScene(surfaces=[far, near], light=Light(position=(0, 0, 5)))
    t, idx, _, _, alb = scene_intersect(
        scene, np.array([[0.0, 0.0, 0.0]]), np.array([[0.0, 0.0, 1.0]])
    )
    assert np.isclose(t[0], 0.9)
    assert idx[0] == 1 and alb[0] == 0.3


# ── direct radiometry through ideal transients ───────────────────────────

def test_point_light_radiance_and_arrival_bin():
    """Light 0.4 m above the hit point, camera 0.6 m: L = P rho / (pi 0.16),
    path 1.0 m = exactly bin 1."""
    scene = _floor_scene(albedo=0.6, light_pos=(0, 0, 0.4), power=2.0)
    ray = Ray(np.array([0.0, 0.0, 0.6]), np.array([0.0, 0.0, -1.0]))
    hist = ideal_transient(scene, ray, 8, ONE_METER_BIN, n_indirect=0)
    expected = 2.0 * 0.6 / np.pi / 0.16
    assert np.isclose(hist.bins[1], expected, rtol=1e-12)
    other = np.delete(hist.bins, 1)
    assert np.allclose(other, 0.0)


def test_oblique_light_follows_cosine_and_inverse_square():
    # light at (0.3, 0, 0.4) over the hit point (0, 0, 0): r = 0.5, cos = 0.8
    scene = _floor_scene(albedo=0.5, light_pos=(0.3, 0.0, 0.4), power=1.0)
    ray = Ray(np.array([0.0, 0.0, 0.6]), np.array([0.0, 0.0, -1.0]))
    hist = ideal_transient(scene, ray, 8, ONE_METER_BIN, n_indirect=0)
    expected = 0.5 / np.pi * 0.8 / 0.25
    assert np.isclose(hist.total(), expected, rtol=1e-12)
    # path = 0.5 + 0.6 = 1.1 bins: split 0.9 / 0.1 across bins 1 and 2
    assert np.isclose(hist.bins[1], 0.9 * expected, rtol=1e-9)
    assert np.isclose(hist.bins[2], 0.1 * expected, rtol=1e-9)


def test_occluder_casts_a_shadow():
    scene = _floor_scene(albedo=0.5, light_pos=(0.0, 0.0, 0.4))
    ray = Ray(np.array([0.3, 0.0, 0.6]), np.array([0.0, 0.0, -1.0]))
    lit = ideal_transient(scene, ray, 8, ONE_METER_BIN, n_indirect=0)
    assert lit.total() > 0
    # blocker on the segment from (0.3, 0, 0) to the light
    scene.surfaces.append(Sphere(center=(0.15, 0.0, 0.2), radius=0.05, albedo=0.9))
    shadowed = ideal_transient(scene, ray, 8, ONE_METER_BIN, n_indirect=0)
    assert shadowed.total() == 0.0


def test_collimated_beam_lights_only_its_cylinder():
    light_kw = dict(kind="collimated", direction=(0, 0, -1), radius=0.1)
    scene = _floor_scene(albedo=0.5, light_pos=(0.0, 0.0, 1.0), power=3.0,
                         **light_kw)
    inside = Ray(np.array([0.05, 0.0, 0.6]), np.array([0.0, 0.0, -1.0]))
    outside = Ray(np.array([0.2, 0.0, 0.6]), np.array([0.0, 0.0, -1.0]))
    hist_in = ideal_transient(scene, inside, 8, ONE_METER_BIN, n_indirect=0)
    hist_out = ideal_transient(scene, outside, 8, ONE_METER_BIN, n_indirect=0)
    # no distance falloff for a beam: L = P rho / pi
    assert np.isclose(hist_in.total(), 3.0 * 0.5 / np.pi, rtol=1e-12)
    assert hist_out.total() == 0.0


def test_indirect_bounce_adds_late_energy():
    floor = AxisPlane(axis=2, offset=0.0, albedo=0.7)
    ball = Sphere(center=(0.0, 0.0, 0.05), radius=0.04, albedo=0.9)
    light = Light(position=(0.3, 0.0, 0.5), power=1.0, pulse_fwhm_s=0.0)
    scene = AnalyticScene(surfaces=[floor, ball], light=light)
    ray = Ray(np.array([0.06, 0.0, 0.6]), np.array([0.0, 0.0, -1.0]))
    direct = ideal_transient(scene, ray, 16, ONE_METER_BIN, n_indirect=0)
    both = ideal_transient(scene, ray, 16, ONE_METER_BIN, n_indirect=64)
    assert both.total() > direct.total()
    extra = both.bins - direct.bins
    assert np.all(extra >= -1e-15)
    # the bounce path is strictly longer than the direct one
    com_direct = (np.arange(16) * direct.bins).sum() / direct.total()
    com_extra = (np.arange(16) * extra).sum() / extra.sum()
    assert com_extra > com_direct


def test_hits_outside_ray_range_are_ignored():
    scene = _floor_scene()
    short = Ray(np.array([0.0, 0.0, 0.6]), np.array([0.0, 0.0, -1.0]), s_far=0.5)
    hist = ideal_transient(scene, short, 8, ONE_METER_BIN, n_indirect=0)
    assert hist.total() == 0.0


def test_batch_rejects_bad_direction_shape():
    scene = _floor_scene()
    with pytest.raises(ShapeError):
        ideal_transient_batch(scene, np.zeros(3), np.zeros(3), 8, ONE_METER_BIN)


# ── pulse kernel ─────────────────────────────────────────────────────────

def test_pulse_kernel_impulse_and_mass():
    assert np.array_equal(pulse_kernel(0.0, 16e-12), [1.0])
    k = pulse_kernel(100e-12, 16e-12)
    assert k.shape[0] % 2 == 1
    assert np.isclose(k.sum(), 1.0, rtol=1e-12)
    assert np.allclose(k, k[::-1])
    with pytest.raises(ConfigError):
        pulse_kernel(-1e-12, 16e-12)


def test_pulse_kernel_width_is_half_max_at_fwhm():
    # fwhm of 4 bins: value 2 bins from center = half the center value
    k = pulse_kernel(4 * 16e-12, 16e-12)
    c = k.shape[0] // 2
    assert np.isclose(k[c + 2] / k[c], 0.5, rtol=1e-3)


# ── SPAD measurement ─────────────────────────────────────────────────────

def test_measure_is_deterministic_and_poisson_scaled():
    spad = SpadModel(pulses=10000, efficiency=0.5, dark_rate=1e-4,
                     n_bins=4, bin_width_s=16e-12)
    lam = np.array([0.002, 0.0, 0.001, 0.0])
    a = measure(lam, spad, rng_seed=5)
    b = measure(lam, spad, rng_seed=5)
    c = measure(lam, spad, rng_seed=6)
    assert np.array_equal(a.bins, b.bins)
    assert not np.array_equal(a.bins, c.bins)
    # rate = pulses * (eta lam + dark) = [11, 1, 6, 1]
    rate = np.array([11.0, 1.0, 6.0, 1.0])
    draws = np.stack([measure(lam, spad, rng_seed=s).bins for s in range(300)])
    assert np.allclose(draws.mean(axis=0), rate, atol=5 * np.sqrt(rate / 300))


def test_measure_includes_ambient_flux():
    spad = SpadModel(pulses=100000, efficiency=0.5, dark_rate=0.0,
                     n_bins=8, bin_width_s=16e-12)
    lam = np.zeros(8)
    hist = measure(lam, spad, rng_seed=1, ambient_rate=2e-4)
    # expected 10 counts per bin; 8 bins of Poisson(10) total 80 +- 45
    assert 35 < hist.total() < 125


def test_measure_warns_when_leaving_low_flux_regime():
    spad = SpadModel(pulses=100, efficiency=1.0, dark_rate=0.0,
                     n_bins=2, bin_width_s=16e-12)
    with pytest.warns(UserWarning, match="low-flux"):
        measure(np.array([0.2, 0.0]), spad, rng_seed=0)


def test_measure_input_validation():
    spad = SpadModel(pulses=100, efficiency=0.5, dark_rate=0.0,
                     n_bins=2, bin_width_s=16e-12)
    with pytest.raises(ShapeError):
        measure(np.zeros((2, 2)), spad, rng_seed=0)
    with pytest.raises(InvalidInputError):
        measure(np.array([-0.1, 0.0]), spad, rng_seed=0)
    with pytest.raises(InvalidInputError):
        measure(np.array([np.inf, 0.0]), spad, rng_seed=0)


def test_measure_video_streams_are_keyed_by_view_and_pixel():
    scene = _floor_scene(light_pos=(0.0, 0.0, 0.3), power=0.01)
    cams = hemisphere_cameras(0.5, (0, 40), (30, 60), 2, 1, 4, 4, 3.0)
    spad = SpadModel(pulses=100000, efficiency=0.25, dark_rate=1e-6,
                     n_bins=8, bin_width_s=ONE_METER_BIN)
    ideal = render_ideal_video(scene.__class__(scene.surfaces, scene.light),
                               cams[0], 8, ONE_METER_BIN, n_indirect=0)
    a = measure_video(ideal, spad, seed=3, view_index=0)
    b = measure_video(ideal, spad, seed=3, view_index=0)
    other_view = measure_video(ideal, spad, seed=3, view_index=1)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, other_view.data)
    assert a.metadata["seed"] == 3


# ── camera layouts ───────────────────────────────────────────────────────

def test_hemisphere_cameras_positions_and_aim():
    target = np.array([0.1, -0.2, 0.0])
    cams = hemisphere_cameras(0.4, (0, 90), (20, 50), 3, 2, 8, 8, 6.0,
                              target=target)
    assert len(cams) == 6
    for cam in cams:
        pos = cam.cam_to_world[:3, 3]
        assert np.isclose(np.linalg.norm(pos - target), 0.4, rtol=1e-12)
        fwd = cam.cam_to_world[:3, 2]
        to_target = (target - pos) / np.linalg.norm(target - pos)
        assert np.allclose(fwd, to_target, atol=1e-12)
    # azimuth-fastest ordering: cameras 0..2 share the first elevation
    z0 = [cams[k].cam_to_world[2, 3] for k in range(3)]
    assert np.allclose(z0, z0[0])
    with pytest.raises(ConfigError):
        hemisphere_cameras(0.0, (0, 90), (20, 50), 3, 2, 8, 8, 6.0)


# ── scene files ──────────────────────────────────────────────────────────

SCENE_TEXT = """\
[light]
position = 0 0 0.4
power = 2.0
pulse_fwhm_ps = 0
ambient_rate = 1e-6

[spad]
pulses = 1000
efficiency = 0.5
dark_rate = 1e-5
n_bins = 16
bin_width_ps = 32

[surface floor]
kind = plane
axis = z
offset = 0
albedo = 0.6
min = -0.2 -0.2
max = 0.2 0.2

[surface ball]
kind = sphere
center = 0 0 0.05
radius = 0.04
albedo = 0.9

[cameras]
layout = hemisphere
radius = 0.3
azimuth_deg = 0 90
elevation_deg = 20 50
grid = 2 2
width = 6
height = 6
focal_px = 5

[simulate]
seed = 11
indirect_directions = 16
eval_views = 2
"""


def test_scene_file_round_trip(tmp_path):
    p = tmp_path / "test.scene"
    p.write_text(SCENE_TEXT)
    setup = load_scene_file(p)
    assert np.allclose(setup.scene.light.position, [0, 0, 0.4])
    assert setup.scene.light.power == 2.0
    assert setup.scene.light.pulse_fwhm_s == 0.0
    assert setup.scene.ambient_rate == 1e-6
    assert setup.spad.pulses == 1000 and setup.spad.n_bins == 16
    assert np.isclose(setup.spad.bin_width_s, 32e-12)
    kinds = {type(s).__name__ for s in setup.scene.surfaces}
    assert kinds == {"AxisPlane", "Sphere"}
    assert len(setup.cameras) == 4
    assert setup.seed == 11 and setup.n_indirect == 16
    assert setup.eval_views == [2]


@pytest.mark.parametrize("mutation,needle", [
    (lambda t: t.replace("[spad]", "[spud]"), "spad"),
    (lambda t: t.replace("kind = sphere", "kind = cube"), "kind"),
    (lambda t: t.replace("eval_views = 2", "eval_views = 9"), "out of range"),
    (lambda t: t.replace("layout = hemisphere", "layout = ring"), "layout"),
    (lambda t: t.replace("[surface floor]", "[floor]")
               .replace("[surface ball]", "[ball]"), "surface"),
])
def test_scene_file_rejects_malformed_input(tmp_path, mutation, needle):
    p = tmp_path / "bad.scene"
    p.write_text(mutation(SCENE_TEXT))
    with pytest.raises(ConfigError, match=needle):
        load_scene_file(p)


# ── dataset generation ───────────────────────────────────────────────────

def test_generate_dataset_writes_complete_self_describing_output(tmp_path):
    p = tmp_path / "test.scene"
    p.write_text(SCENE_TEXT)
    setup = load_scene_file(p)
    manifest = generate_dataset(setup, tmp_path / "data")

    assert manifest["format"] == "tfield-dataset-v1"
    assert manifest["splits"] == {"train": [0, 1, 3], "eval": [2]}
    assert manifest["normalization_scale"] > 0
    for v in range(4):
        assert (tmp_path / "data" / f"view_{v:03d}.trv").exists()
        assert (tmp_path / "data" / f"view_{v:03d}.json").exists()
        assert (tmp_path / "data" / f"view_{v:03d}_ideal.trv").exists()

    videos, cameras, loaded = load_dataset(tmp_path / "data" / "manifest.json")
    assert len(videos) == 4 and len(cameras) == 4
    assert loaded["n_bins"] == 16
    assert videos[0].data.shape == (6, 6, 1, 16)
    assert np.all(videos[0].data >= 0)


def test_generate_dataset_can_skip_ideal_files(tmp_path):
    p = tmp_path / "test.scene"
    p.write_text(SCENE_TEXT)
    setup = load_scene_file(p)
    manifest = generate_dataset(setup, tmp_path / "data", write_ideal=False)
    assert not (tmp_path / "data" / "view_000_ideal.trv").exists()
    assert all("ideal" not in entry for entry in manifest["views"])
