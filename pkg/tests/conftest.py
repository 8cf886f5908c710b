import numpy as np
import pytest

from spultra.geometry import SystemGeometry, ImageGrid, forward_project


def small_parallel(rows=8, cols=8, n_det=12, n_views=10):
    return SystemGeometry("parallel", n_detectors=n_det, n_views=n_views,
                          detector_spacing=1.0, angular_range=np.pi,
                          image_dims=(rows, cols), pixel_spacing=(1.0, 1.0))


def small_fan(rows=8, cols=8, n_det=16, n_views=12):
    return SystemGeometry("fan", n_detectors=n_det, n_views=n_views,
                          detector_spacing=1.2, angular_range=2 * np.pi,
                          image_dims=(rows, cols), pixel_spacing=(1.0, 1.0),
                          source_to_iso=30.0, source_to_detector=60.0)


def dense_system(geom):
    """Dense system matrix assembled column by column through forward_project."""
    cols = np.zeros((geom.n_rays, geom.n_pixels))
    for j in range(geom.n_pixels):
        basis = np.zeros(geom.n_pixels)
        basis[j] = 1.0
        img = ImageGrid(basis.reshape(geom.image_dims), geom.pixel_spacing)
        cols[:, j] = forward_project(img, geom).ravel()
    return cols


@pytest.fixture(params=["parallel", "fan"])
def small_geom(request):
    return small_parallel() if request.param == "parallel" else small_fan()
