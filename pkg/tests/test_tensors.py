"""Tests for tensor contracts, image I/O and the sidecar format."""
import struct

import numpy as np
import pytest
import torch

from medsemdeid.errors import InvalidInputError, ShapeMismatchError
from medsemdeid.tensors import (
    EncryptedFeature,
    check_image,
    check_password,
    load_image,
    read_sidecar,
    save_image,
    write_sidecar,
)


def test_flatten_unflatten_is_lossless():
    feature = torch.randn(2, 512, 3, 4)
    tokens = EncryptedFeature.from_map(feature)
    assert tokens.tokens.shape == (2, 12, 512)
    assert torch.equal(tokens.to_map(), feature)


def test_unbatched_feature_keeps_rank():
    feature = torch.randn(512, 2, 2)
    tokens = EncryptedFeature.from_map(feature)
    assert tokens.tokens.shape == (4, 512)
    assert torch.equal(tokens.to_map(), feature)


def test_token_grid_mismatch():
    with pytest.raises(ShapeMismatchError):
        EncryptedFeature(torch.zeros(5, 512), 2, 2)


def test_check_image_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        check_image(torch.zeros(3, 50, 64))
    with pytest.raises(InvalidInputError):
        check_image(torch.full((3, 64, 64), 2.0))
    with pytest.raises(InvalidInputError):
        check_image(torch.zeros(1, 64, 64))
    check_image(torch.zeros(3, 64, 96))


def test_check_password_shape():
    with pytest.raises(InvalidInputError):
        check_password(torch.zeros(128))
    check_password(torch.zeros(4, 512))


def test_sidecar_layout_and_round_trip(tmp_path):
    feature = EncryptedFeature(torch.randn(6, 512), 2, 3)
    path = tmp_path / "f.msde"
    write_sidecar(feature, path)
    data = path.read_bytes()
    magic, version, height, width = struct.unpack("<4sIII", data[:16])
    assert (magic, version, height, width) == (b"MSDE", 1, 2, 3)
    assert len(data) == 16 + 6 * 512 * 4
    loaded = read_sidecar(path)
    assert torch.equal(loaded.tokens, feature.tokens)
    assert (loaded.height, loaded.width) == (2, 3)


def test_sidecar_rejects_corruption(tmp_path):
    path = tmp_path / "bad.msde"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(InvalidInputError):
        read_sidecar(path)
    feature = EncryptedFeature(torch.randn(4, 512), 2, 2)
    write_sidecar(feature, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(InvalidInputError):
        read_sidecar(path)


def test_png_round_trip_is_exact_on_8bit_values(tmp_path):
    rng = np.random.default_rng(0)
    levels = rng.integers(0, 256, size=(3, 32, 32)).astype(np.float32) / 255.0
    x = torch.from_numpy(levels) * 2 - 1
    save_image(x, tmp_path / "x.png")
    y = load_image(tmp_path / "x.png")
    assert y.shape == (3, 32, 32)
    assert torch.allclose(x, y, atol=1e-6)


def test_lossy_input_logs_warning(tmp_path, caplog):
    from PIL import Image

    Image.new("RGB", (32, 32), (10, 20, 30)).save(tmp_path / "x.jpg")
    with caplog.at_level("WARNING"):
        load_image(tmp_path / "x.jpg")
    assert "lossy" in caplog.text
