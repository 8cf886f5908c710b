"""2D scan geometry and the matched forward/back projection pair.

The system model is assembled once per geometry as a sparse matrix whose
entries are exact ray/pixel intersection lengths (Siddon-style tracing).
Forward and back projection share the same matrix, so the pair is an exact
adjoint by construction, which the iterative solvers rely on.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError

# views are traced in chunks to bound the memory of the vectorized tracer
_CHUNK_RAYS = 8192


@dataclass(frozen=True)
class SystemGeometry:
    """Scan description for a single-slice parallel- or fan-beam acquisition.

    Distances are in mm, angles in radians. ``image_dims`` is (rows, cols);
    ``pixel_spacing`` is (dx, dy) with dx along columns and dy along rows.
    For fan beam, ``source_to_detector > source_to_iso > 0`` must hold.
    """

    beam_kind: str
    n_detectors: int
    n_views: int
    detector_spacing: float
    angular_range: float
    image_dims: tuple[int, int]
    pixel_spacing: tuple[float, float] = (1.0, 1.0)
    source_to_iso: float = 0.0
    source_to_detector: float = 0.0

    def __post_init__(self):
        if self.beam_kind not in ("parallel", "fan"):
            raise ConfigurationError(f"unknown beam_kind {self.beam_kind!r}")
        if self.n_detectors < 1 or self.n_views < 1:
            raise ConfigurationError("n_detectors and n_views must be positive")
        if self.detector_spacing <= 0:
            raise ConfigurationError("detector_spacing must be positive")
        if min(self.pixel_spacing) <= 0:
            raise ConfigurationError("pixel spacings must be positive")
        if self.angular_range <= 0:
            raise ConfigurationError("angular_range must be positive")
        if self.beam_kind == "fan" and not (self.source_to_detector > self.source_to_iso > 0):
            raise ConfigurationError("fan beam requires source_to_detector > source_to_iso > 0")

    @property
    def n_rays(self) -> int:
        return self.n_detectors * self.n_views

    @property
    def n_pixels(self) -> int:
        return self.image_dims[0] * self.image_dims[1]

    def view_angles(self) -> np.ndarray:
        return np.arange(self.n_views) * (self.angular_range / self.n_views)

    def detector_offsets(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0) * self.detector_spacing


@dataclass
class ImageGrid:
    """2D attenuation map (mm^-1) with its pixel spacing."""

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ConfigurationError("ImageGrid data must be 2D")
        if not np.isfinite(self.data).all():
            raise ConfigurationError("ImageGrid values must be finite")

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class Sinogram:
    """Per-ray measurements, shape (n_views, n_detectors).

    Values may be raw counts or line integrals depending on the stage.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ConfigurationError("Sinogram data must be 2D (n_views, n_detectors)")

    def ravel(self) -> np.ndarray:
        return self.data.reshape(-1)


def _ray_endpoints(geom: SystemGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Source/destination points for every ray, each (n_rays, 2), view-major order."""
    angles = geom.view_angles()
    offsets = geom.detector_offsets()
    rows, cols = geom.image_dims
    dx, dy = geom.pixel_spacing
    half_diag = 0.5 * np.hypot(cols * dx, rows * dy)

    cos_a = np.cos(angles)[:, None]
    sin_a = np.sin(angles)[:, None]
    u = offsets[None, :]

    if geom.beam_kind == "parallel":
        # detector axis e = (cos, sin), ray direction d = (-sin, cos)
        reach = 1.05 * half_diag + max(dx, dy)
        px = u * cos_a
        py = u * sin_a
        src = np.stack([px + reach * sin_a, py - reach * cos_a], axis=-1)
        dst = np.stack([px - reach * sin_a, py + reach * cos_a], axis=-1)
    else:
        dso = geom.source_to_iso
        dsd = geom.source_to_detector
        # source rotates on a circle of radius dso; central ray direction is
        # d = (-sin, cos); the flat detector sits at distance dsd along d with
        # its axis e = (cos, sin)
        sx = (dso * sin_a) + 0.0 * u
        sy = (-dso * cos_a) + 0.0 * u
        det_x = sx + dsd * (-sin_a) + u * cos_a
        det_y = sy + dsd * cos_a + u * sin_a
        src = np.stack([sx, sy], axis=-1)
        dst = np.stack([det_x, det_y], axis=-1)

    return src.reshape(-1, 2), dst.reshape(-1, 2)


def _trace_chunk(src, dst, geom: SystemGeometry):
    """Exact intersection lengths for one batch of rays.

    Returns (ray_local_idx, pixel_idx, length) arrays. The grid crossing
    parameters along each ray are sorted, and every inter-crossing segment
    is attributed to the pixel containing its midpoint.
    """
    rows, cols = geom.image_dims
    dx, dy = geom.pixel_spacing
    x_left = -0.5 * cols * dx
    y_top = 0.5 * rows * dy
    x_edges = x_left + np.arange(cols + 1) * dx
    y_edges = y_top - np.arange(rows + 1) * dy  # descending

    d = dst - src
    length = np.hypot(d[:, 0], d[:, 1])

    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (x_edges[None, :] - src[:, 0:1]) / d[:, 0:1]
        ay = (y_edges[None, :] - src[:, 1:2]) / d[:, 1:2]
    # rays parallel to an axis never cross that family of edges
    ax[~np.isfinite(ax)] = -1.0
    ay[~np.isfinite(ay)] = -1.0

    alpha = np.concatenate([ax, ay], axis=1)
    np.clip(alpha, 0.0, 1.0, out=alpha)
    alpha.sort(axis=1)

    seg = np.diff(alpha, axis=1)
    mid = alpha[:, :-1] + 0.5 * seg
    mx = src[:, 0:1] + mid * d[:, 0:1]
    my = src[:, 1:2] + mid * d[:, 1:2]

    col = np.floor((mx - x_left) / dx).astype(np.int64)
    row = np.floor((y_top - my) / dy).astype(np.int64)
    ok = (seg > 0) & (col >= 0) & (col < cols) & (row >= 0) & (row < rows)

    ray_idx, _ = np.nonzero(ok)
    pix = (row * cols + col)[ok]
    w = (seg * length[:, None])[ok]
    return ray_idx, pix, w


def _build_matrix(geom: SystemGeometry) -> sp.csr_matrix:
    src, dst = _ray_endpoints(geom)
    n_rays = src.shape[0]
    parts_r, parts_c, parts_w = [], [], []
    for start in range(0, n_rays, _CHUNK_RAYS):
        stop = min(start + _CHUNK_RAYS, n_rays)
        r, c, w = _trace_chunk(src[start:stop], dst[start:stop], geom)
        parts_r.append(r + start)
        parts_c.append(c)
        parts_w.append(w)
    rows = np.concatenate(parts_r)
    cols = np.concatenate(parts_c)
    vals = np.concatenate(parts_w)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n_rays, geom.n_pixels))
    return mat.tocsr()


@functools.lru_cache(maxsize=8)
def system_matrix(geom: SystemGeometry) -> sp.csr_matrix:
    """The (n_rays, n_pixels) intersection-length matrix, cached per geometry."""
    return _build_matrix(geom)


def _check_image(img: ImageGrid, geom: SystemGeometry):
    if img.dims != geom.image_dims:
        raise ConfigurationError(
            f"image dims {img.dims} do not match geometry {geom.image_dims}"
        )


def forward_project(img: ImageGrid, geom: SystemGeometry) -> Sinogram:
    """Line integrals of ``img`` along every ray (mm^-1 * mm, dimensionless)."""
    _check_image(img, geom)
    y = system_matrix(geom) @ img.data.reshape(-1)
    return Sinogram(y.reshape(geom.n_views, geom.n_detectors))


def back_project(sino: Sinogram, geom: SystemGeometry) -> ImageGrid:
    """Adjoint of :func:`forward_project`, using identical intersection weights."""
    if sino.data.shape != (geom.n_views, geom.n_detectors):
        raise ConfigurationError(
            f"sinogram shape {sino.data.shape} does not match geometry "
            f"({geom.n_views}, {geom.n_detectors})"
        )
    x = system_matrix(geom).T @ sino.ravel()
    return ImageGrid(x.reshape(geom.image_dims), geom.pixel_spacing)


def weighted_gram_diag(geom: SystemGeometry, w: np.ndarray) -> ImageGrid:
    """Diagonal of the weighted normal matrix, per pixel: sum_i a_ij w_i (A 1)_i."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != geom.n_rays:
        raise ConfigurationError("weight length does not match ray count")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    a = system_matrix(geom)
    row_sums = a @ np.ones(geom.n_pixels)
    diag = a.T @ (w * row_sums)
    return ImageGrid(diag.reshape(geom.image_dims), geom.pixel_spacing)


def compute_kappa(geom: SystemGeometry, w: np.ndarray) -> ImageGrid:
    """Resolution-uniformity weights: per pixel the square root of the ratio of
    weighted to unweighted column sums of the system matrix.

    Pixels crossed by no ray get 0.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != geom.n_rays:
        raise ConfigurationError("weight length does not match ray count")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    a = system_matrix(geom)
    num = a.T @ w
    den = a.T @ np.ones(geom.n_rays)
    kappa = np.zeros(geom.n_pixels)
    covered = den > 0
    kappa[covered] = np.sqrt(num[covered] / den[covered])
    return ImageGrid(kappa.reshape(geom.image_dims), geom.pixel_spacing)
