import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import ndimage

from helpers import bumped, resting
from src.utils.autodiff import Tape, Tensor, backward, tsum
from src.utils.mesh import make_template, rotate_mesh, translate_mesh
from src.utils.observation import (
    ObservationConfig, add_noise, coverage_area, depth_to_pointcloud, noisy, normalize_image, normalize_mesh, observe,
    pixel_centers, pixel_pitch, render_depth, rotate_image, rotate_obs, soft_silhouette, subsample_points,
    unrotate_mesh,
)


def test_canonical_pitch():
    assert pixel_pitch(0.3, 96) == pytest.approx(0.0046875)


def test_pixel_centers_are_symmetric():
    centers = pixel_centers(32, 0.01)
    assert centers.shape == (1024, 2)
    assert_allclose(centers.mean(axis=0), 0.0, atol=1e-15)
    assert_allclose(centers[0], [-0.155, -0.155])
    assert_allclose(centers[1], [-0.145, -0.155])


def test_flat_cloth_covers_four_ninths(template9):
    config = ObservationConfig(resolution=96)
    obs, _ = observe(resting(template9), config, template9.canonical_extent)
    assert coverage_area(obs.silhouette) == 64 * 64
    assert coverage_area(obs.silhouette) / 96 ** 2 == pytest.approx(4 / 9)
    cloth = obs.image[obs.image > 0]
    assert_allclose(cloth, 0.0015 / config.depth_scale)


def test_background_is_exactly_zero(template9, obs_config):
    obs, _ = observe(bumped(template9), obs_config, template9.canonical_extent)
    assert obs.image[0, 0] == 0.0
    assert 0.0015 / obs_config.depth_scale < obs.image.max() <= (0.0015 + 0.02) / obs_config.depth_scale


def test_render_rejects_small_resolution(template5):
    with pytest.raises(ValueError):
        render_depth(template5, 16, 0.01)


def test_degenerate_triangles_are_skipped(template5):
    collapsed = template5.with_positions(np.zeros((25, 3)))
    image, degenerate = render_depth(collapsed, 32, 0.01)
    assert degenerate == template5.faces.shape[0]
    assert not image.any()


def test_observation_is_translation_invariant(template9, obs_config):
    world = bumped(template9)
    obs, _ = observe(world, obs_config, template9.canonical_extent)
    moved, centered = observe(translate_mesh(world, [0.05, -0.02]), obs_config, template9.canonical_extent)
    assert_allclose(moved.center_xy, [0.05, -0.02], atol=1e-12)
    assert_array_equal(moved.silhouette, obs.silhouette)
    assert_allclose(moved.image, obs.image, atol=1e-12)
    assert_allclose(centered.positions[:, :2].mean(axis=0), 0.0, atol=1e-12)


def test_noise_only_touches_cloth_pixels():
    image = np.zeros((32, 32))
    image[8:24, 8:24] = 0.02
    out = add_noise(image, 0.5, seed=4, floor=1e-4)
    assert np.all(out[image == 0] == 0.0)
    assert np.all(out[image > 0] >= 1e-4)
    assert_array_equal(out, add_noise(image, 0.5, seed=4, floor=1e-4))
    assert_array_equal(add_noise(image, 0.0, seed=4), image)


def test_noisy_scales_sigma_by_depth(template9, obs_config):
    obs, _ = observe(resting(template9), obs_config, template9.canonical_extent)
    assert_array_equal(noisy(obs, 0.0, seed=1).image, obs.image)
    assert not np.array_equal(noisy(obs, 0.002, seed=1).image, obs.image)


def test_point_cloud_back_projects_cloth_pixels(template9, obs_config):
    obs, _ = observe(bumped(template9), obs_config, template9.canonical_extent)
    points = depth_to_pointcloud(obs)
    assert points.shape == (int(np.count_nonzero(obs.image)), 3)
    assert_allclose(np.sort(points[:, 2]), np.sort(obs.image[obs.image > 0] * obs_config.depth_scale))


def test_subsample_is_seeded_and_bounded():
    points = np.random.default_rng(0).standard_normal((100, 3))
    a = subsample_points(points, 10, seed=2)
    assert a.shape == (10, 3)
    assert_array_equal(a, subsample_points(points, 10, seed=2))
    assert subsample_points(points, 200, seed=2) is points


def test_quarter_turn_matches_array_rotation():
    image = np.random.default_rng(1).uniform(0.1, 1.0, size=(32, 32))
    assert_allclose(rotate_image(image, 0.0), image)
    assert_allclose(rotate_image(image, np.pi / 2), np.rot90(image, -1))


def test_rotated_observation_follows_rotated_mesh(template9, obs_config):
    world = bumped(template9)
    obs, _ = observe(world, obs_config, template9.canonical_extent)
    turned, _ = observe(rotate_mesh(world, np.pi / 2), obs_config, template9.canonical_extent)
    assert_array_equal(rotate_obs(obs, 2).silhouette, turned.silhouette)


def test_unrotate_inverts_rotation(template9):
    mesh = bumped(template9)
    for k in range(8):
        back = unrotate_mesh(rotate_mesh(mesh, k * np.pi / 4), k)
        assert_allclose(back.positions, mesh.positions, atol=1e-12)


def test_normalize_image_centers_external_depth():
    raw = np.zeros((32, 32))
    raw[2:10, 4:12] = 0.01
    obs = normalize_image(raw, 0.01, 0.1)
    rows, cols = np.nonzero(obs.image)
    assert abs(rows.mean() - 15.5) <= 0.5
    assert abs(cols.mean() - 15.5) <= 0.5
    assert_allclose(obs.image[obs.image > 0], 0.1)
    assert np.count_nonzero(obs.image) == 64


def test_soft_silhouette_approximates_the_hard_one(template9):
    resolution = 32
    pitch = pixel_pitch(1.0, resolution)
    positions = Tensor(template9.template / template9.canonical_extent)
    soft = soft_silhouette(positions, template9, resolution, pitch).data.reshape(32, 32)
    hard, _ = render_depth(template9.with_positions(positions.data + [0.0, 0.0, 1.0]), resolution, pitch)
    inside = hard > 0
    assert np.all((soft >= 0) & (soft <= 1))
    assert soft[inside].mean() > 0.7
    assert soft[0, 0] < 0.01 and soft[-1, -1] < 0.01


def test_soft_silhouette_gradient_pushes_boundary_outward(template9):
    positions = Tensor(0.8 * template9.template / template9.canonical_extent, requires_grad=True)
    with Tape() as tape:
        area = tsum(soft_silhouette(positions, template9, 32, pixel_pitch(1.0, 32)))
    grad = backward(tape, area)[positions]
    corner = 0
    # growing area means moving the corner away from the center
    assert np.dot(grad[corner, :2], positions.data[corner, :2]) > 0
    assert_array_equal(grad[:, 2], 0.0)


def test_soft_silhouette_rejects_non_positive_sharpness(template5):
    with pytest.raises(ValueError):
        soft_silhouette(Tensor(template5.template), template5, 32, 0.01, sharpness=0.0)


def _soft_and_hard(mesh, positions, resolution=96):
    pitch = pixel_pitch(mesh.canonical_extent, resolution)
    soft = soft_silhouette(Tensor(positions), mesh, resolution, pitch).data.reshape(resolution, resolution)
    hard, _ = render_depth(mesh.with_positions(positions + [0.0, 0.0, 1.0]), resolution, pitch)
    return soft, hard > 0


@pytest.mark.parametrize("side", [9, 21])
def test_soft_silhouette_agrees_with_render_on_flat_cloth(side):
    mesh = make_template(side, side, 0.3)
    soft, hard = _soft_and_hard(mesh, mesh.template)
    assert np.mean((soft > 0.5) == hard) >= 0.99


def test_soft_silhouette_agrees_with_render_on_random_meshes(template9):
    rng = np.random.default_rng(0)
    agree = []
    for _ in range(50):
        positions = template9.template.copy()
        positions[:, :2] += rng.normal(0.0, 0.0015, (template9.n_vertices, 2))
        soft, hard = _soft_and_hard(template9, positions)
        agree.append(np.mean((soft > 0.5) == hard))
    assert np.mean(agree) >= 0.99
    assert min(agree) >= 0.98


def test_soft_silhouette_vanishes_away_from_the_cloth(template9):
    positions = template9.template.copy()
    positions[:, :2] += np.random.default_rng(3).normal(0.0, 0.0015, (template9.n_vertices, 2))
    soft, hard = _soft_and_hard(template9, positions)
    far = ndimage.distance_transform_edt(~hard) >= 4
    assert far.sum() > 1000
    assert soft[far].max() < 1e-3


def test_normalize_mesh_is_idempotent(template9):
    mesh = translate_mesh(bumped(template9), [0.04, -0.07])
    once = normalize_mesh(mesh)
    assert_allclose(normalize_mesh(once).positions, once.positions, atol=1e-15)


def test_normalize_image_is_idempotent():
    raw = np.zeros((32, 32))
    raw[3:12, 5:12] = 0.01
    once = normalize_image(raw, 0.01, 0.1)
    twice = normalize_image(once.image * once.depth_scale, 0.01, 0.1, center_xy=once.center_xy)
    assert_allclose(twice.image, once.image, rtol=1e-15)
    assert_allclose(twice.center_xy, once.center_xy)


def test_noise_std_matches_sigma():
    image = np.full((100, 100), 0.5)
    residual = add_noise(image, 0.01, seed=7) - image
    assert residual.std() == pytest.approx(0.01, rel=0.05)
