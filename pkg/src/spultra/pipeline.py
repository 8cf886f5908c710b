"""Batch experiment orchestration: simulate, learn, reconstruct, evaluate.

Each stage reads and writes files under the configured output directory and
updates a manifest recording the config hash, seed, and checksums of the
deterministic artifacts (images, sinograms, transforms, metrics). Rerunning
with the same config and seed must reproduce those files byte for byte;
mismatches against an existing manifest are reported.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from . import io as sio
from .config import ExperimentConfig
from .errors import ConfigurationError, NumericalError
from .geometry import ImageGrid, Sinogram
from .metrics import RoiMask, circle_mask, rmse_roi, roi_stats, ssim, to_hu
from .recon import (fbp_reconstruct, pwls_ep_reconstruct, pwls_ultra_reconstruct,
                    spultra_reconstruct)
from .sim import RngSpec, make_phantom, nonpositive_fraction, simulate_prelog
from .spstats import post_log_convert
from .ultra import (PatchConfig, extract_patches, learn_transforms,
                    load_transforms, save_transforms)

log = logging.getLogger(__name__)

METHODS = ("fbp", "pwls-ep", "pwls-ultra", "spultra")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2
EXIT_NUMERICAL = 3


class MissingArtifact(FileNotFoundError):
    pass


def _method_slug(method: str) -> str:
    return method.replace("-", "_")


def _artifact(out: Path, name: str) -> Path:
    return out / name


def _require(cfg, *sections):
    missing = [s for s in sections if getattr(cfg, s) is None]
    if missing:
        raise ConfigurationError(f"config sections required for this stage: {missing}")


def _sino_spacing(geom):
    return (geom.angular_range / geom.n_views, geom.detector_spacing)


def _load_image(path: Path, what: str) -> ImageGrid:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    data, spacing = sio.read_spim(path)
    return ImageGrid(data, tuple(spacing))


def _export_pgm(path: Path, img: ImageGrid, cfg: ExperimentConfig):
    hu = to_hu(img, cfg.metrics.mu_water)
    sio.write_pgm(path, hu.data, cfg.metrics.window)


def stage_simulate(cfg: ExperimentConfig, out: Path, deterministic: bool) -> dict:
    _require(cfg, "geometry", "model", "phantom", "io")
    truth = make_phantom(cfg.phantom)
    sio.write_spim(_artifact(out, "x_true.spim"), truth.data, truth.spacing)
    _export_pgm(_artifact(out, "x_true.pgm"), truth, cfg)

    sino = simulate_prelog(truth, cfg.model, cfg.geometry,
                           RngSpec(cfg.io.seed), deterministic=deterministic)
    sio.write_spim(_artifact(out, "sino_raw.spim"), sino.data, _sino_spacing(cfg.geometry))
    log.info("non-positive fraction: %.4f%%", 100 * nonpositive_fraction(sino.data))
    return {"x_true.spim": _artifact(out, "x_true.spim"),
            "sino_raw.spim": _artifact(out, "sino_raw.spim")}


def stage_learn(cfg: ExperimentConfig, out: Path) -> dict:
    _require(cfg, "learning", "io")
    truth = _load_image(_artifact(out, "x_true.spim"), "training image (run 'simulate' first)")
    lc = cfg.learning
    side = int(round(np.sqrt(lc.v)))
    patches = extract_patches(truth, PatchConfig(side, lc.stride))
    n_avail = patches.shape[1]
    rng = np.random.Generator(np.random.Philox(key=[cfg.io.seed, 1]))
    if n_avail > lc.n_patches:
        sel = rng.choice(n_avail, size=lc.n_patches, replace=False)
        sel.sort()
        patches = patches[:, sel]
    union, trace = learn_transforms(patches, lc.k, lc.gamma_c, lc.lambda0,
                                    lc.iters, seed=cfg.io.seed)
    save_transforms(_artifact(out, "transforms.ult"), union)
    with open(_artifact(out, "learn_trace.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "objective"])
        for i, val in enumerate(trace):
            wr.writerow([i + 1, f"{val:.17g}"])
    return {"transforms.ult": _artifact(out, "transforms.ult")}


def _ep_initializer(cfg: ExperimentConfig, out: Path, l_tilde, w_stat) -> ImageGrid:
    """PWLS-EP image used to start the transform-union methods; cached on disk."""
    ep_path = _artifact(out, "x_pwls_ep.spim")
    if ep_path.exists():
        return _load_image(ep_path, "edge-preserving initializer")
    return _reconstruct_ep(cfg, out, l_tilde, w_stat)


def _fbp_or_zero_init(cfg: ExperimentConfig, l_tilde) -> ImageGrid:
    geom = cfg.geometry
    if geom.beam_kind == "parallel":
        sino_l = Sinogram(l_tilde.reshape(geom.n_views, geom.n_detectors))
        img = fbp_reconstruct(sino_l, geom)
        return ImageGrid(np.clip(img.data, 0.0, cfg.recon.x_max), img.spacing)
    # the edge-preserving problem is strictly convex, so a zero start is fine
    return ImageGrid(np.zeros(geom.image_dims), geom.pixel_spacing)


def _reconstruct_ep(cfg: ExperimentConfig, out: Path, l_tilde, w_stat) -> ImageGrid:
    if cfg.recon.ep is None:
        raise ConfigurationError("recon.beta_ep must be set to run the edge-preserving method")
    x0 = _fbp_or_zero_init(cfg, l_tilde)
    img = pwls_ep_reconstruct(l_tilde, w_stat, cfg.geometry, cfg.recon, x0)
    sio.write_spim(_artifact(out, "x_pwls_ep.spim"), img.data, img.spacing)
    _export_pgm(_artifact(out, "x_pwls_ep.pgm"), img, cfg)
    return img


def stage_reconstruct(cfg: ExperimentConfig, out: Path, method: str) -> dict:
    _require(cfg, "geometry", "model", "recon", "io")
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
    sino_path = _artifact(out, "sino_raw.spim")
    if not sino_path.exists():
        raise MissingArtifact(f"raw sinogram not found (run 'simulate' first): {sino_path}")
    raw, _ = sio.read_spim(sino_path)
    y_raw = Sinogram(raw)
    geom = cfg.geometry
    l_tilde, w_stat = post_log_convert(y_raw.ravel(), cfg.model)

    truth = None
    truth_path = _artifact(out, "x_true.spim")
    if truth_path.exists():
        truth = _load_image(truth_path, "truth")

    slug = _method_slug(method)
    artifacts = {}

    if method == "fbp":
        sino_l = Sinogram(l_tilde.reshape(geom.n_views, geom.n_detectors))
        img = fbp_reconstruct(sino_l, geom)
    elif method == "pwls-ep":
        img = _reconstruct_ep(cfg, out, l_tilde, w_stat)
        artifacts["x_pwls_ep.spim"] = _artifact(out, "x_pwls_ep.spim")
    else:
        tr_path = _artifact(out, "transforms.ult")
        if not tr_path.exists():
            raise MissingArtifact(f"transform file not found (run 'learn' first): {tr_path}")
        union = load_transforms(tr_path)
        x0 = _ep_initializer(cfg, out, l_tilde, w_stat)
        if method == "spultra":
            img, trace = spultra_reconstruct(y_raw, cfg.model, union, geom, cfg.recon,
                                             x0, truth=truth, mu_water=cfg.metrics.mu_water)
        else:
            img, trace = pwls_ultra_reconstruct(l_tilde, w_stat, union, geom, cfg.recon,
                                                x0, truth=truth,
                                                mu_water=cfg.metrics.mu_water)
        trace.to_csv(_artifact(out, f"trace_{slug}.csv"))

    if method != "pwls-ep":
        sio.write_spim(_artifact(out, f"x_{slug}.spim"), img.data, img.spacing)
        _export_pgm(_artifact(out, f"x_{slug}.pgm"), img, cfg)
        artifacts[f"x_{slug}.spim"] = _artifact(out, f"x_{slug}.spim")
    return artifacts


def _eval_rois(cfg: ExperimentConfig, truth: ImageGrid) -> list[RoiMask]:
    rois = [RoiMask(np.ones(truth.dims, dtype=bool), "all")]
    for label, cx, cy, r in cfg.metrics.rois:
        rois.append(circle_mask(truth.dims, truth.spacing, cx, cy, r, label))
    return rois


def stage_evaluate(cfg: ExperimentConfig, out: Path) -> dict:
    _require(cfg, "io")
    truth = _load_image(_artifact(out, "x_true.spim"), "truth (run 'simulate' first)")
    rois = _eval_rois(cfg, truth)
    mu_water = cfg.metrics.mu_water
    run_id = f"{cfg.config_hash[:8]}-s{cfg.io.seed}"

    rows = []
    found = False
    for method in METHODS:
        slug = _method_slug(method)
        path = _artifact(out, f"x_{slug}.spim")
        if not path.exists():
            continue
        found = True
        img = _load_image(path, method)
        hu_img = to_hu(img, mu_water)
        hu_truth = to_hu(truth, mu_water)
        rows.append((run_id, method, "rmse_hu", rois[0].label,
                     rmse_roi(img, truth, rois[0], mu_water)))
        rows.append((run_id, method, "ssim", rois[0].label, ssim(hu_img, hu_truth)))
        for roi in rois:
            mean, std = roi_stats(hu_img, roi)
            rows.append((run_id, method, "roi_mean_hu", roi.label, mean))
            rows.append((run_id, method, "roi_std_hu", roi.label, std))
    if not found:
        raise MissingArtifact("no reconstructed images found (run 'reconstruct' first)")

    path = _artifact(out, "metrics.csv")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["run_id", "method", "metric", "roi_label", "value"])
        for row in rows:
            wr.writerow([*row[:4], f"{row[4]:.17g}"])
    return {"metrics.csv": path}


def run_pipeline(cfg: ExperimentConfig, subcommand: str, method: str | None = None,
                 deterministic: bool = False) -> int:
    """Execute one stage (or the whole chain) and return a process exit code."""
    if cfg.io is None:
        log.error("config has no [io] section")
        return EXIT_ERROR
    out = Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    try:
        artifacts = {}
        if subcommand == "simulate":
            artifacts.update(stage_simulate(cfg, out, deterministic))
        elif subcommand == "learn":
            artifacts.update(stage_learn(cfg, out))
        elif subcommand == "reconstruct":
            for m in ([method] if method else ["pwls-ep", "pwls-ultra", "spultra"]):
                artifacts.update(stage_reconstruct(cfg, out, m))
        elif subcommand == "evaluate":
            artifacts.update(stage_evaluate(cfg, out))
        elif subcommand == "all":
            artifacts.update(stage_simulate(cfg, out, deterministic))
            artifacts.update(stage_learn(cfg, out))
            for m in ([method] if method else METHODS):
                artifacts.update(stage_reconstruct(cfg, out, m))
            artifacts.update(stage_evaluate(cfg, out))
        else:
            log.error("unknown subcommand %r", subcommand)
            return EXIT_ERROR
    except MissingArtifact as err:
        log.error("%s", err)
        return EXIT_MISSING_INPUT
    except NumericalError as err:
        trace = getattr(err, "trace", None)
        if trace is not None:
            trace.to_csv(out / "trace_aborted.csv")
            log.error("numerical abort (%s); partial trace flushed", err)
        else:
            log.error("numerical abort: %s", err)
        return EXIT_NUMERICAL
    except ConfigurationError as err:
        log.error("%s", err)
        return EXIT_ERROR

    _update_manifest(cfg, out, artifacts)
    return EXIT_OK


def _update_manifest(cfg: ExperimentConfig, out: Path, artifacts: dict):
    manifest_path = out / "manifest.json"
    digests = {}
    if manifest_path.exists():
        old = sio.read_manifest(manifest_path)
        if old.get("config_hash") == cfg.config_hash and old.get("seed") == cfg.io.seed:
            digests.update(old.get("artifacts", {}))
    new_digests = {name: sio.sha256_file(path) for name, path in artifacts.items()}
    stale = sio.verify_manifest(manifest_path, cfg.config_hash, cfg.io.seed, new_digests)
    for name in stale:
        log.warning("artifact %s differs from the manifest of a previous identical run", name)
    digests.update(new_digests)
    sio.write_manifest(manifest_path, cfg.config_hash, cfg.io.seed, digests)
