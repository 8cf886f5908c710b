import numpy as np
import pytest

from spultra.errors import ConfigurationError
from spultra.geometry import (ImageGrid, Sinogram, SystemGeometry, back_project,
                              compute_kappa, forward_project, system_matrix,
                              weighted_gram_diag)

from conftest import dense_system, small_parallel


def test_geometry_validation():
    with pytest.raises(ConfigurationError):
        SystemGeometry("conebeam", 4, 4, 1.0, np.pi, (4, 4))
    with pytest.raises(ConfigurationError):
        SystemGeometry("parallel", 4, 4, -1.0, np.pi, (4, 4))
    with pytest.raises(ConfigurationError):
        SystemGeometry("fan", 4, 4, 1.0, np.pi, (4, 4),
                       source_to_iso=50.0, source_to_detector=40.0)


def test_zero_image_projects_to_zero(small_geom):
    img = ImageGrid(np.zeros(small_geom.image_dims), small_geom.pixel_spacing)
    assert np.all(forward_project(img, small_geom).data == 0)


def test_single_pixel_perpendicular_ray():
    # one 1 mm^2 pixel of 1 mm^-1; view at angle 0 has rays perpendicular to a face
    geom = SystemGeometry("parallel", n_detectors=1, n_views=1, detector_spacing=1.0,
                          angular_range=np.pi, image_dims=(1, 1), pixel_spacing=(1.0, 1.0))
    img = ImageGrid(np.ones((1, 1)))
    sino = forward_project(img, geom)
    assert sino.data[0, 0] == pytest.approx(1.0, abs=1e-13)


def test_forward_matches_dense_oracle(small_geom):
    dense = dense_system(small_geom)
    rng = np.random.default_rng(7)
    x = rng.random(small_geom.n_pixels)
    img = ImageGrid(x.reshape(small_geom.image_dims), small_geom.pixel_spacing)
    got = forward_project(img, small_geom).ravel()
    assert np.max(np.abs(got - dense @ x)) <= 1e-12


def test_back_project_zero_and_one_hot(small_geom):
    zero = Sinogram(np.zeros((small_geom.n_views, small_geom.n_detectors)))
    assert np.all(back_project(zero, small_geom).data == 0)

    dense = dense_system(small_geom)
    for ray in [0, small_geom.n_rays // 2, small_geom.n_rays - 1]:
        one_hot = np.zeros(small_geom.n_rays)
        one_hot[ray] = 1.0
        sino = Sinogram(one_hot.reshape(small_geom.n_views, small_geom.n_detectors))
        got = back_project(sino, small_geom).data.reshape(-1)
        assert np.max(np.abs(got - dense[ray])) <= 1e-12


def test_adjoint_identity(small_geom):
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.standard_normal(small_geom.n_pixels)
        y = rng.standard_normal(small_geom.n_rays)
        img = ImageGrid(x.reshape(small_geom.image_dims), small_geom.pixel_spacing)
        ax = forward_project(img, small_geom).ravel()
        sino = Sinogram(y.reshape(small_geom.n_views, small_geom.n_detectors))
        aty = back_project(sino, small_geom).data.reshape(-1)
        lhs = ax @ y
        rhs = x @ aty
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(ax) * np.linalg.norm(y)


def test_nonnegative_weights(small_geom):
    img = ImageGrid(np.ones(small_geom.image_dims), small_geom.pixel_spacing)
    assert np.all(forward_project(img, small_geom).data >= 0)


def test_shape_mismatch_raises():
    geom = small_parallel()
    with pytest.raises(ConfigurationError):
        forward_project(ImageGrid(np.zeros((4, 4))), geom)
    with pytest.raises(ConfigurationError):
        back_project(Sinogram(np.zeros((3, 3))), geom)


def _one_pixel_two_rays():
    # single 1 mm^2 pixel crossed by a vertical and a horizontal center ray,
    # so the system matrix is exactly [[1], [1]]
    return SystemGeometry("parallel", n_detectors=1, n_views=2, detector_spacing=1.0,
                          angular_range=np.pi, image_dims=(1, 1), pixel_spacing=(1.0, 1.0))


def test_weighted_gram_diag_hand_case():
    # dense A = [[1, 0], [0, 2]], w = (1, 1): diag(A^T W A 1) = (1, 4)
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    w = np.ones(2)
    expect = a.T @ (w * (a @ np.ones(2)))
    assert np.allclose(expect, [1.0, 4.0])
    # and on a real geometry with known A = [[1], [1]], w = (1, 3): diag = 4
    geom = _one_pixel_two_rays()
    got = weighted_gram_diag(geom, np.array([1.0, 3.0])).data
    assert got[0, 0] == pytest.approx(4.0, rel=1e-13)


def test_weighted_gram_diag_oracle(small_geom):
    dense = dense_system(small_geom)
    rng = np.random.default_rng(3)
    w = rng.random(small_geom.n_rays)
    got = weighted_gram_diag(small_geom, w).data.reshape(-1)
    expect = dense.T @ (w * (dense @ np.ones(small_geom.n_pixels)))
    scale = np.max(np.abs(expect))
    assert np.max(np.abs(got - expect)) <= 1e-12 * scale


def test_weighted_gram_diag_zero_and_negative():
    geom = small_parallel()
    assert np.all(weighted_gram_diag(geom, np.zeros(geom.n_rays)).data == 0)
    with pytest.raises(ValueError):
        weighted_gram_diag(geom, -np.ones(geom.n_rays))


def test_kappa_constant_weights(small_geom):
    c = 4.0
    kappa = compute_kappa(small_geom, np.full(small_geom.n_rays, c)).data
    covered = back_project(
        Sinogram(np.ones((small_geom.n_views, small_geom.n_detectors))),
        small_geom).data > 0
    assert np.allclose(kappa[covered], np.sqrt(c))
    assert np.all(kappa[~covered] == 0)


def test_kappa_two_ray_hand_value():
    # one pixel, two unit-length rays, w = (4, 9): kappa = sqrt(13 / 2)
    geom = _one_pixel_two_rays()
    got = compute_kappa(geom, np.array([4.0, 9.0])).data
    assert got[0, 0] == pytest.approx(2.5495097567963922, rel=1e-12)


def test_kappa_dense_oracle(small_geom):
    dense = dense_system(small_geom)
    rng = np.random.default_rng(5)
    w = rng.random(small_geom.n_rays)
    got = compute_kappa(small_geom, w).data.reshape(-1)
    num = dense.T @ w
    den = dense.T @ np.ones(small_geom.n_rays)
    expect = np.zeros_like(num)
    covered = den > 0
    expect[covered] = np.sqrt(num[covered] / den[covered])
    assert np.max(np.abs(got - expect)) <= 1e-12 * max(expect.max(), 1.0)


def test_rays_missing_image_contribute_zero():
    # detector much wider than the image: outer rays never hit it
    geom = SystemGeometry("parallel", n_detectors=64, n_views=4, detector_spacing=1.0,
                          angular_range=np.pi, image_dims=(4, 4), pixel_spacing=(1.0, 1.0))
    a = system_matrix(geom)
    img = ImageGrid(np.ones((4, 4)))
    sino = forward_project(img, geom)
    assert sino.data.shape == (4, 64)
    assert np.all(sino.data[:, 0] == 0) and np.all(sino.data[:, -1] == 0)
    assert a.shape == (geom.n_rays, geom.n_pixels)


def test_fan_matches_parallel_in_the_limit():
    # a fan geometry with a huge source distance approaches parallel rays
    rows = cols = 8
    par = small_parallel(rows, cols, n_det=10, n_views=6)
    # magnification dsd/dso = 2, so detector spacing 2 samples the same rays
    fan = SystemGeometry("fan", n_detectors=10, n_views=6, detector_spacing=2.0,
                         angular_range=np.pi, image_dims=(rows, cols),
                         pixel_spacing=(1.0, 1.0),
                         source_to_iso=1e6, source_to_detector=2e6)
    rng = np.random.default_rng(1)
    x = rng.random(par.n_pixels)
    img = ImageGrid(x.reshape(rows, cols))
    a = forward_project(img, par).data
    b = forward_project(img, fan).data
    assert np.max(np.abs(a - b)) < 1e-3 * max(1.0, np.max(np.abs(a)))
