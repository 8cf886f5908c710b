"""Reconstruction drivers.

The quadratic image-update subproblems of every iterative method here are
solved by the relaxed ordered-subsets linearized augmented Lagrangian
recursion with a decreasing relaxation schedule and diagonal majorizers.
The shifted-Poisson method rebuilds its quadratic surrogate (and the data
diagonal) every outer iteration; the weighted-least-squares variants keep
their data term fixed.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError
from .geometry import (ImageGrid, Sinogram, SystemGeometry, compute_kappa,
                       forward_project, system_matrix)
from .spstats import SpModel, build_surrogate, neg_log_likelihood, post_log_convert
from .ultra import (PatchConfig, SparseState, TransformUnion, accumulate_patches,
                    extract_patches, patch_weights, regularizer_majorizer_diag,
                    regularizer_value, sparse_code_and_cluster)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpParams:
    """Edge-preserving regularizer settings (delta in mm^-1)."""

    beta_ep: float
    delta: float
    potential_kind: str = "hyperbola"
    iters: int = 50

    def __post_init__(self):
        if self.potential_kind not in ("lange", "hyperbola"):
            raise ConfigurationError(f"unknown potential {self.potential_kind!r}")
        if self.delta <= 0:
            raise ConfigurationError("delta must be positive")


@dataclass(frozen=True)
class ReconConfig:
    beta: float
    gamma_c: float
    n_outer: int
    n_inner: int = 4
    n_subsets: int = 1
    alpha: float = 1.999
    x_max: float = 0.1
    patch: PatchConfig = field(default_factory=lambda: PatchConfig(8, 1))
    ep: EpParams | None = None

    def __post_init__(self):
        if not (1.0 <= self.alpha < 2.0):
            raise ConfigurationError("alpha must satisfy 1 <= alpha < 2")
        if min(self.n_outer, self.n_inner, self.n_subsets) < 0 or self.n_inner < 1 \
                or self.n_subsets < 1:
            raise ConfigurationError("N must be >= 0 and P, M >= 1")
        if self.x_max <= 0:
            raise ConfigurationError("x_max must be positive")


def rho_schedule(t: int, alpha: float) -> float:
    """Decreasing relaxation sequence; equals 1 at t = 0."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 1.0
    a = np.pi / (alpha * (t + 1))
    return float(a * np.sqrt(1.0 - (0.5 * a) ** 2))


def bit_reversal_order(m: int) -> list[int]:
    """Bit-reversal permutation of 0..m-1 (padded to a power of two, filtered)."""
    if m == 1:
        return [0]
    bits = (m - 1).bit_length()
    out = []
    for i in range(1 << bits):
        r = int(format(i, f"0{bits}b")[::-1], 2)
        if r < m:
            out.append(r)
    return out


class SubsetSystem:
    """System matrix plus interleaved view subsets for ordered-subsets passes.

    Subset s holds views congruent to s modulo M; subsets are processed in
    bit-reversal order for gradient balance.
    """

    def __init__(self, geom: SystemGeometry, m: int):
        self.geom = geom
        self.m = m
        self.matrix = system_matrix(geom)
        self.row_sums = self.matrix @ np.ones(geom.n_pixels)
        nd = geom.n_detectors
        self.order = bit_reversal_order(m)
        self.rays = []
        self.sub = []
        for s in range(m):
            views = np.arange(s, geom.n_views, m)
            rays = (views[:, None] * nd + np.arange(nd)[None, :]).reshape(-1)
            self.rays.append(rays)
            self.sub.append(self.matrix[rays])

    def gram_diag(self, w: np.ndarray) -> np.ndarray:
        """diag(A^T W A 1) as a flat pixel vector."""
        return self.matrix.T @ (w * self.row_sums)

    def subset_gradient(self, s: int, x: np.ndarray, w, y_tilde) -> np.ndarray:
        """M-scaled weighted residual backprojection over subset s."""
        rays = self.rays[s]
        r = self.sub[s] @ x - y_tilde[rays]
        return self.m * (self.sub[s].T @ (w[rays] * r))


@dataclass
class OsLalmState:
    """Auxiliary vectors of the relaxed OS-LALM recursion."""

    x: np.ndarray
    s: np.ndarray
    g: np.ndarray
    zeta: np.ndarray
    eta: np.ndarray
    rho: float = 1.0
    t: int = 0


class ZeroReg:
    """No regularization; used for plain weighted least squares."""

    diag = 0.0

    def grad(self, x):
        return 0.0


def os_lalm_image_update(x0: np.ndarray, system: SubsetSystem, w: np.ndarray,
                         y_tilde: np.ndarray, d_a: np.ndarray, reg,
                         cfg: ReconConfig, n_passes: int | None = None) -> np.ndarray:
    """Minimize 0.5 ||y_tilde - A x||_W^2 + reg over the box [0, x_max].

    Runs ``n_passes`` (default cfg.n_inner) ordered-subsets passes of the
    five-line relaxed recursion; the relaxation parameter is refreshed from
    :func:`rho_schedule` at every inner step. ``reg`` provides ``grad(x)``
    and a diagonal Hessian majorizer ``diag``.
    """
    passes = cfg.n_inner if n_passes is None else n_passes
    m = system.m
    d_r = reg.diag

    x = np.clip(x0, 0.0, cfg.x_max)
    zeta = system.subset_gradient(system.order[-1], x, w, y_tilde)
    st = OsLalmState(x=x, s=np.zeros_like(x), g=zeta.copy(), zeta=zeta,
                     eta=d_a * x - zeta)

    for t in range(passes * m):
        rho = rho_schedule(t, cfg.alpha)
        st.s = rho * (d_a * st.x - st.eta) + (1.0 - rho) * st.g
        denom = rho * d_a + d_r
        step = (st.s + reg.grad(st.x)) / np.where(denom > 0, denom, 1.0)
        st.x = np.clip(st.x - np.where(denom > 0, step, 0.0), 0.0, cfg.x_max)
        sub = system.order[t % m]
        st.zeta = system.subset_gradient(sub, st.x, w, y_tilde)
        st.g = (rho / (rho + 1.0)) * (cfg.alpha * st.zeta + (1.0 - cfg.alpha) * st.g) \
            + st.g / (rho + 1.0)
        st.eta = cfg.alpha * (d_a * st.x - st.zeta) + (1.0 - cfg.alpha) * st.eta
        st.rho, st.t = rho, t + 1
        for name, vec in (("s", st.s), ("x", st.x), ("zeta", st.zeta),
                          ("g", st.g), ("eta", st.eta)):
            if not np.isfinite(vec).all():
                raise NumericalError(name, t)
    return st.x


class UltraQuadReg:
    """Quadratic part of the transform-union regularizer at fixed codes and labels.

    Precomputes per-class Gram matrices and the code backprojection so each
    gradient evaluation inside the inner loop needs one Gram multiply per
    class plus a patch scatter-add.
    """

    def __init__(self, union: TransformUnion, state: SparseState, beta: float,
                 patch: PatchConfig, dims, diag: np.ndarray):
        self.union = union
        self.state = state
        self.beta = beta
        self.patch = patch
        self.dims = dims
        self.diag = diag
        self.grams = [union.transforms[k].T @ union.transforms[k] for k in range(union.k)]
        back = np.empty_like(state.z)
        for k in range(union.k):
            sel = state.labels == k
            if np.any(sel):
                back[:, sel] = union.transforms[k].T @ state.z[:, sel]
        self._code_back = back

    def grad(self, x_flat: np.ndarray) -> np.ndarray:
        p = extract_patches(ImageGrid(x_flat.reshape(self.dims)), self.patch)
        out = np.empty_like(p)
        for k in range(self.union.k):
            sel = self.state.labels == k
            if np.any(sel):
                out[:, sel] = self.grams[k] @ p[:, sel]
        out -= self._code_back
        img = accumulate_patches(out * self.state.tau[None, :], self.dims, self.patch)
        return 2.0 * self.beta * img.reshape(-1)


def ep_potential(t, delta: float, kind: str):
    """Symmetric edge-preserving potential, zero at the origin."""
    t = np.asarray(t, dtype=np.float64)
    r = np.abs(t) / delta
    if kind == "lange":
        return delta ** 2 * (r - np.log1p(r))
    if kind == "hyperbola":
        return delta ** 2 * (np.sqrt(1.0 + r * r) - 1.0)
    raise ConfigurationError(f"unknown potential {kind!r}")


def ep_potential_dot(t, delta: float, kind: str):
    t = np.asarray(t, dtype=np.float64)
    if kind == "lange":
        return t / (1.0 + np.abs(t) / delta)
    if kind == "hyperbola":
        return t / np.sqrt(1.0 + (t / delta) ** 2)
    raise ConfigurationError(f"unknown potential {kind!r}")


_OFFSETS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _offset_slices(shape, di, dj):
    rows, cols = shape
    center = (slice(max(0, -di), rows - max(0, di)),
              slice(max(0, -dj), cols - max(0, dj)))
    neighbor = (slice(max(0, di), rows - max(0, -di)),
                slice(max(0, dj), cols - max(0, -dj)))
    return center, neighbor


class EdgePreservingReg:
    """8-neighborhood penalty sum_j sum_k kappa_j kappa_k phi(x_j - x_k).

    The diagonal majorizer uses the paired-difference bound
    (a-b)^2 <= 2a^2 + 2b^2 together with phi'' <= 1, giving per-pixel
    4 beta sum_k kappa_j kappa_k; the bare Hessian diagonal (half of this)
    is not a valid majorizer.
    """

    def __init__(self, kappa: np.ndarray, ep: EpParams, dims):
        self.kappa = kappa.reshape(dims)
        self.ep = ep
        self.dims = dims
        diag = np.zeros(dims)
        for di, dj in _OFFSETS8:
            c, nb = _offset_slices(dims, di, dj)
            diag[c] += 4.0 * ep.beta_ep * self.kappa[c] * self.kappa[nb]
        self.diag = diag.reshape(-1)

    def value(self, x_flat: np.ndarray) -> float:
        x = x_flat.reshape(self.dims)
        total = 0.0
        for di, dj in _OFFSETS8:
            c, nb = _offset_slices(self.dims, di, dj)
            total += float(np.sum(self.kappa[c] * self.kappa[nb]
                                  * ep_potential(x[c] - x[nb], self.ep.delta,
                                                 self.ep.potential_kind)))
        return self.ep.beta_ep * total

    def grad(self, x_flat: np.ndarray) -> np.ndarray:
        x = x_flat.reshape(self.dims)
        g = np.zeros(self.dims)
        for di, dj in _OFFSETS8:
            c, nb = _offset_slices(self.dims, di, dj)
            g[c] += 2.0 * self.kappa[c] * self.kappa[nb] \
                * ep_potential_dot(x[c] - x[nb], self.ep.delta, self.ep.potential_kind)
        return self.ep.beta_ep * g.reshape(-1)


@dataclass
class ConvergenceTrace:
    """Per-outer-iteration bookkeeping; written as CSV for inspection."""

    iters: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    data_term: list = field(default_factory=list)
    reg_term: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)
    rmse_vs_truth: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    # objective right after the image update, before re-coding; used by the
    # monotonicity checks, not written to disk
    objective_pre_coding: list = field(default_factory=list)

    def append(self, n, obj, data, reg, step, rmse, ms, pre=None):
        self.iters.append(n)
        self.objective.append(obj)
        self.data_term.append(data)
        self.reg_term.append(reg)
        self.step_norm.append(step)
        self.rmse_vs_truth.append(rmse)
        self.wall_ms.append(ms)
        if pre is not None:
            self.objective_pre_coding.append(pre)

    def to_csv(self, path):
        def fmt(v):
            return "" if v is None else f"{v:.17g}"

        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "objective", "data_term", "reg_term",
                         "step_norm", "rmse_vs_truth", "wall_ms"])
            for i in range(len(self.iters)):
                wr.writerow([self.iters[i], fmt(self.objective[i]), fmt(self.data_term[i]),
                             fmt(self.reg_term[i]), fmt(self.step_norm[i]),
                             fmt(self.rmse_vs_truth[i]), fmt(self.wall_ms[i])])


def _rmse_hu(x: np.ndarray, truth: np.ndarray, mu_water: float) -> float:
    d = (x - truth) * (1000.0 / mu_water)
    return float(np.sqrt(np.mean(d * d)))


def _tau_from_weights(geom, w_stat, patch) -> np.ndarray:
    kappa = compute_kappa(geom, w_stat)
    return patch_weights(kappa, patch)


def spultra_reconstruct(y_raw: Sinogram, model: SpModel, union: TransformUnion,
                        geom: SystemGeometry, cfg: ReconConfig, x0: ImageGrid,
                        truth: ImageGrid | None = None, mu_water: float = 0.02,
                        ) -> tuple[ImageGrid, ConvergenceTrace]:
    """Shifted-Poisson reconstruction with the transform-union regularizer.

    Raw counts are shifted by the electronic noise variance (and clamped at
    zero). Every outer iteration builds a fresh quadratic surrogate at the
    current image, runs one ordered-subsets image update, then re-codes and
    re-clusters the patches once.
    """
    counts = np.maximum(y_raw.ravel() + model.sigma2, 0.0)
    _, w_stat = post_log_convert(y_raw.ravel(), model)
    tau = _tau_from_weights(geom, w_stat, cfg.patch)
    system = SubsetSystem(geom, cfg.n_subsets)
    dims = geom.image_dims

    x = np.clip(x0.data.reshape(-1), 0.0, cfg.x_max)
    state = sparse_code_and_cluster(ImageGrid(x.reshape(dims)), union,
                                    cfg.gamma_c, tau, cfg.patch)
    d_r = regularizer_majorizer_diag(union, tau, cfg.beta, cfg.patch, dims).reshape(-1)

    trace = ConvergenceTrace()

    def reg_term(x_flat, st):
        return regularizer_value(ImageGrid(x_flat.reshape(dims)), st, union,
                                 cfg.beta, cfg.gamma_c, cfg.patch)

    data = neg_log_likelihood(system.matrix @ x, counts, model)
    reg = reg_term(x, state)
    rmse = None if truth is None else _rmse_hu(x.reshape(dims), truth.data, mu_water)
    trace.append(0, data + reg, data, reg, None, rmse, None)

    try:
        for n in range(cfg.n_outer):
            t0 = time.perf_counter()
            surr = build_surrogate(ImageGrid(x.reshape(dims)), counts, model, geom)
            d_a = system.gram_diag(surr.w)
            quad = UltraQuadReg(union, state, cfg.beta, cfg.patch, dims, d_r)
            x_new = os_lalm_image_update(x, system, surr.w, surr.y_tilde, d_a, quad, cfg)
            # the data term is unchanged by the coding step
            data = neg_log_likelihood(system.matrix @ x_new, counts, model)
            reg_pre = reg_term(x_new, state)
            state = sparse_code_and_cluster(ImageGrid(x_new.reshape(dims)), union,
                                            cfg.gamma_c, tau, cfg.patch)
            reg = reg_term(x_new, state)
            ms = (time.perf_counter() - t0) * 1e3
            rmse = None if truth is None else _rmse_hu(x_new.reshape(dims), truth.data, mu_water)
            trace.append(n + 1, data + reg, data, reg,
                         float(np.linalg.norm(x_new - x)), rmse, ms,
                         pre=data + reg_pre)
            x = x_new
    except NumericalError as err:
        # keep the partial trace reachable so callers can flush it
        err.trace = trace
        log.error("image update aborted at outer iteration %d: %s", len(trace.iters), err)
        raise

    return ImageGrid(x.reshape(dims), geom.pixel_spacing), trace


def _pwls_data_term(x, system, w, l_tilde) -> float:
    r = system.matrix @ x - l_tilde
    return 0.5 * float(np.sum(w * r * r))


def pwls_ultra_reconstruct(l_tilde: np.ndarray, w_stat: np.ndarray,
                           union: TransformUnion, geom: SystemGeometry,
                           cfg: ReconConfig, x0: ImageGrid,
                           truth: ImageGrid | None = None, mu_water: float = 0.02,
                           ) -> tuple[ImageGrid, ConvergenceTrace]:
    """Post-log weighted-least-squares counterpart: the data term stays fixed,
    so the weighted diagonal is computed once and no surrogate is rebuilt."""
    l_tilde = np.asarray(l_tilde, dtype=np.float64).reshape(-1)
    w_stat = np.asarray(w_stat, dtype=np.float64).reshape(-1)
    tau = _tau_from_weights(geom, w_stat, cfg.patch)
    system = SubsetSystem(geom, cfg.n_subsets)
    dims = geom.image_dims

    x = np.clip(x0.data.reshape(-1), 0.0, cfg.x_max)
    state = sparse_code_and_cluster(ImageGrid(x.reshape(dims)), union,
                                    cfg.gamma_c, tau, cfg.patch)
    d_r = regularizer_majorizer_diag(union, tau, cfg.beta, cfg.patch, dims).reshape(-1)
    d_a = system.gram_diag(w_stat)

    trace = ConvergenceTrace()

    def reg_term(x_flat, st):
        return regularizer_value(ImageGrid(x_flat.reshape(dims)), st, union,
                                 cfg.beta, cfg.gamma_c, cfg.patch)

    data = _pwls_data_term(x, system, w_stat, l_tilde)
    reg = reg_term(x, state)
    rmse = None if truth is None else _rmse_hu(x.reshape(dims), truth.data, mu_water)
    trace.append(0, data + reg, data, reg, None, rmse, None)

    for n in range(cfg.n_outer):
        t0 = time.perf_counter()
        quad = UltraQuadReg(union, state, cfg.beta, cfg.patch, dims, d_r)
        x_new = os_lalm_image_update(x, system, w_stat, l_tilde, d_a, quad, cfg)
        data = _pwls_data_term(x_new, system, w_stat, l_tilde)
        reg_pre = reg_term(x_new, state)
        state = sparse_code_and_cluster(ImageGrid(x_new.reshape(dims)), union,
                                        cfg.gamma_c, tau, cfg.patch)
        reg = reg_term(x_new, state)
        ms = (time.perf_counter() - t0) * 1e3
        rmse = None if truth is None else _rmse_hu(x_new.reshape(dims), truth.data, mu_water)
        trace.append(n + 1, data + reg, data, reg,
                     float(np.linalg.norm(x_new - x)), rmse, ms,
                     pre=data + reg_pre)
        x = x_new

    return ImageGrid(x.reshape(dims), geom.pixel_spacing), trace


def pwls_ep_reconstruct(l_tilde: np.ndarray, w_stat: np.ndarray,
                        geom: SystemGeometry, cfg: ReconConfig,
                        x0: ImageGrid) -> ImageGrid:
    """Weighted least squares with the edge-preserving neighborhood penalty."""
    if cfg.ep is None:
        raise ConfigurationError("cfg.ep must be set for the edge-preserving method")
    l_tilde = np.asarray(l_tilde, dtype=np.float64).reshape(-1)
    w_stat = np.asarray(w_stat, dtype=np.float64).reshape(-1)
    dims = geom.image_dims
    kappa = compute_kappa(geom, w_stat)
    reg = EdgePreservingReg(kappa.data.reshape(-1), cfg.ep, dims)
    system = SubsetSystem(geom, cfg.n_subsets)
    d_a = system.gram_diag(w_stat)
    x = np.clip(x0.data.reshape(-1), 0.0, cfg.x_max)
    x = os_lalm_image_update(x, system, w_stat, l_tilde, d_a, reg, cfg,
                             n_passes=cfg.ep.iters)
    return ImageGrid(x.reshape(dims), geom.pixel_spacing)


def fbp_reconstruct(sino: Sinogram, geom: SystemGeometry) -> ImageGrid:
    """Filtered backprojection of a parallel-beam line-integral sinogram.

    Frequency-domain ramp with rectangular apodization, zero-padded to the
    next power of two at least twice the detector count; linear interpolation
    during backprojection. Output is not clipped (the operator is linear).
    """
    if geom.beam_kind != "parallel":
        raise ConfigurationError("filtered backprojection expects parallel-beam data")
    if geom.n_views < 8:
        log.warning("only %d views; reconstruction will be severely undersampled",
                    geom.n_views)
    p = sino.data
    if p.shape != (geom.n_views, geom.n_detectors):
        raise ConfigurationError("sinogram shape does not match geometry")

    nd = geom.n_detectors
    npad = 1 << int(np.ceil(np.log2(max(2 * nd, 64))))
    freqs = np.fft.rfftfreq(npad, d=geom.detector_spacing)
    filt = np.fft.irfft(np.fft.rfft(p, npad, axis=1) * freqs[None, :], npad, axis=1)
    filt = filt[:, :nd]

    rows, cols = geom.image_dims
    dx, dy = geom.pixel_spacing
    xc = (np.arange(cols) - (cols - 1) / 2.0) * dx
    yc = ((rows - 1) / 2.0 - np.arange(rows)) * dy
    xg, yg = np.meshgrid(xc, yc)
    offsets = geom.detector_offsets()

    out = np.zeros((rows, cols))
    for i, ang in enumerate(geom.view_angles()):
        s = xg * np.cos(ang) + yg * np.sin(ang)
        out += np.interp(s, offsets, filt[i], left=0.0, right=0.0)

    weight = geom.angular_range / geom.n_views
    if geom.angular_range > 1.5 * np.pi:
        weight *= 0.5
    return ImageGrid(out * weight, geom.pixel_spacing)


def objective_value(x: ImageGrid, state: SparseState, y_raw: Sinogram,
                    model: SpModel, union: TransformUnion, cfg: ReconConfig,
                    geom: SystemGeometry) -> float:
    """Penalized-likelihood objective: shifted-Poisson data term plus regularizer."""
    counts = np.maximum(y_raw.ravel() + model.sigma2, 0.0)
    l = forward_project(x, geom).ravel()
    data = neg_log_likelihood(l, counts, model)
    reg = regularizer_value(x, state, union, cfg.beta, cfg.gamma_c, cfg.patch)
    return data + reg
