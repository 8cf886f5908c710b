"""On-disk formats: binary image/sinogram container, 16-bit PGM exports,
and the per-run manifest."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

_SPIM_MAGIC = b"SPIM"
_SPIM_VERSION = 1


def write_spim(path, data: np.ndarray, spacing) -> None:
    """Binary layout: magic, u32 LE version, u32 LE ndims, dims u32 LE,
    per-axis spacing float64 LE, payload float64 LE row-major."""
    data = np.asarray(data, dtype=np.float64)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != data.ndim:
        raise ConfigurationError("one spacing per axis required")
    with open(path, "wb") as fh:
        fh.write(_SPIM_MAGIC)
        fh.write(struct.pack("<II", _SPIM_VERSION, data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(struct.pack(f"<{data.ndim}d", *spacing))
        fh.write(data.astype("<f8").tobytes())


def read_spim(path) -> tuple[np.ndarray, tuple[float, ...]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SPIM_MAGIC:
            raise ConfigurationError(f"not a SPIM file: bad magic {magic!r}")
        version, ndims = struct.unpack("<II", fh.read(8))
        if version != _SPIM_VERSION:
            raise ConfigurationError(f"unsupported SPIM version {version}")
        dims = struct.unpack(f"<{ndims}I", fh.read(4 * ndims))
        spacing = struct.unpack(f"<{ndims}d", fh.read(8 * ndims))
        payload = fh.read(8 * int(np.prod(dims)))
    data = np.frombuffer(payload, dtype="<f8")
    if data.size != int(np.prod(dims)):
        raise ConfigurationError("SPIM payload truncated")
    return data.reshape(dims).astype(np.float64), spacing


def write_pgm(path, img_hu: np.ndarray, window=(800.0, 1200.0)) -> None:
    """16-bit binary PGM of an HU image clipped to the display window."""
    lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        raise ConfigurationError("window must satisfy hi > lo")
    scaled = np.clip((np.asarray(img_hu) - lo) / (hi - lo), 0.0, 1.0)
    pix = np.round(scaled * 65535.0).astype(">u2")
    rows, cols = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, config_hash: str, seed: int, artifacts: dict) -> None:
    """Record the run identity plus checksums of its deterministic artifacts."""
    payload = {"config_hash": config_hash, "seed": seed,
               "artifacts": dict(sorted(artifacts.items()))}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def verify_manifest(path, config_hash: str, seed: int, artifacts: dict) -> list[str]:
    """Names of artifacts whose checksum differs from the recorded one
    (empty when the rerun reproduced every file)."""
    if not Path(path).exists():
        return []
    old = read_manifest(path)
    if old.get("config_hash") != config_hash or old.get("seed") != seed:
        return []
    recorded = old.get("artifacts", {})
    return [name for name, digest in artifacts.items()
            if name in recorded and recorded[name] != digest]
