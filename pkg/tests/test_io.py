import struct

import numpy as np
import pytest

from spultra.errors import ConfigurationError
from spultra.io import (read_manifest, read_spim, sha256_file, verify_manifest,
                        write_manifest, write_pgm, write_spim)


def test_spim_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((5, 7))
    path = tmp_path / "img.spim"
    write_spim(path, data, (0.5, 1.25))
    back, spacing = read_spim(path)
    assert np.array_equal(back, data)
    assert spacing == (0.5, 1.25)


def test_spim_header_layout(tmp_path):
    path = tmp_path / "img.spim"
    write_spim(path, np.zeros((2, 3)), (1.0, 2.0))
    raw = path.read_bytes()
    assert raw[:4] == b"SPIM"
    version, ndims = struct.unpack("<II", raw[4:12])
    assert (version, ndims) == (1, 2)
    dims = struct.unpack("<II", raw[12:20])
    assert dims == (2, 3)
    spacing = struct.unpack("<dd", raw[20:36])
    assert spacing == (1.0, 2.0)
    assert len(raw) == 36 + 6 * 8


def test_spim_rejects_garbage(tmp_path):
    path = tmp_path / "bad.spim"
    path.write_bytes(b"JUNKxxxx")
    with pytest.raises(ConfigurationError):
        read_spim(path)


def test_spim_byte_determinism(tmp_path):
    data = np.linspace(0, 1, 12).reshape(3, 4)
    p1, p2 = tmp_path / "a.spim", tmp_path / "b.spim"
    write_spim(p1, data, (1.0, 1.0))
    write_spim(p2, data.copy(), (1.0, 1.0))
    assert p1.read_bytes() == p2.read_bytes()


def test_pgm_export(tmp_path):
    img = np.array([[700.0, 800.0], [1000.0, 1300.0]])
    path = tmp_path / "img.pgm"
    write_pgm(path, img, window=(800.0, 1200.0))
    raw = path.read_bytes()
    header, pixels = raw.split(b"65535\n", 1)
    assert header.startswith(b"P5\n2 2\n")
    vals = np.frombuffer(pixels, dtype=">u2").reshape(2, 2)
    assert vals[0, 0] == 0          # below window
    assert vals[0, 1] == 0          # at low edge
    assert vals[1, 0] == 32768      # mid window
    assert vals[1, 1] == 65535      # above window
    with pytest.raises(ConfigurationError):
        write_pgm(path, img, window=(100.0, 100.0))


def test_manifest_round_trip_and_verify(tmp_path):
    f = tmp_path / "artifact.bin"
    f.write_bytes(b"hello")
    digest = sha256_file(f)
    manifest = tmp_path / "manifest.json"
    write_manifest(manifest, "cafe", 7, {"artifact.bin": digest})
    data = read_manifest(manifest)
    assert data["config_hash"] == "cafe" and data["seed"] == 7

    assert verify_manifest(manifest, "cafe", 7, {"artifact.bin": digest}) == []
    assert verify_manifest(manifest, "cafe", 7, {"artifact.bin": "0" * 64}) == ["artifact.bin"]
    # different run identity: nothing to compare against
    assert verify_manifest(manifest, "beef", 7, {"artifact.bin": "0" * 64}) == []
