"""Tests for the codec: shapes, recovery paths, ablation switch and checkpoints."""
import numpy as np
import pytest
import torch

from medsemdeid.codec import PARAMETER_GROUPS, MedSemCodec, load_checkpoint, save_checkpoint
from medsemdeid.errors import CheckpointError, InvalidInputError, ShapeMismatchError, UnrecoverableError
from medsemdeid.passwords import sample_passwords
from medsemdeid.tensors import EncryptedFeature


def make_codec(config, seed=0):
    torch.manual_seed(seed)
    return MedSemCodec(config).eval()


def passwords(n, seed=0):
    return sample_passwords(np.random.default_rng(seed), n)


@pytest.mark.parametrize("size", [64, 128, 256])
def test_pipeline_preserves_image_dims(tiny_config, enc_med, size):
    codec = make_codec(tiny_config)
    x = torch.rand(1, 3, size, size) * 2 - 1
    with torch.no_grad():
        x_enc, f_enc = codec.deidentify(x, passwords(1)[0], enc_med, return_feature=True)
        recovered = codec.recover(f_enc, passwords(1)[0])
    assert x_enc.shape == x.shape
    assert recovered.image.shape == x.shape
    assert f_enc.height == size // 32 and f_enc.width == size // 32
    assert x_enc.abs().max() <= 1.0


def test_non_square_images(tiny_config, enc_med):
    codec = make_codec(tiny_config)
    x = torch.zeros(3, 64, 96)
    with torch.no_grad():
        out = codec.deidentify(x, passwords(1)[0], enc_med)
    assert out.shape == (3, 64, 96)


def test_feature_shapes(tiny_config, enc_med):
    codec = make_codec(tiny_config)
    x = torch.zeros(2, 3, 64, 64)
    with torch.no_grad():
        f_face = codec.encode_face(x)
        f_med = enc_med.extract(x)
        fused = codec.fuse_medical(f_face, f_med)
    assert f_face.shape == (2, 512, 2, 2)
    assert f_med.shape == (2, 320, 4, 4)
    assert fused.shape == (2, 512, 2, 2)


def test_invalid_size_rejected(tiny_config, enc_med):
    codec = make_codec(tiny_config)
    with pytest.raises(InvalidInputError):
        codec.deidentify(torch.zeros(3, 60, 64), passwords(1)[0], enc_med)


def test_grid_larger_than_max_grid_rejected(tiny_config, enc_med):
    codec = make_codec(tiny_config)
    with pytest.raises(InvalidInputError):
        codec.deidentify(torch.zeros(1, 3, 288, 288), passwords(1)[0], enc_med)


def test_medical_feature_must_pair_with_face_feature(tiny_config):
    codec = make_codec(tiny_config)
    with pytest.raises(ShapeMismatchError):
        codec.fuse_medical(torch.zeros(1, 512, 2, 2), torch.zeros(1, 320, 2, 2))


def test_password_batch_mismatch(tiny_config):
    codec = make_codec(tiny_config)
    f = torch.zeros(3, 512, 2, 2)
    with pytest.raises(ShapeMismatchError):
        codec.encrypt(f, passwords(2))


def test_password_changes_encryption(tiny_config, enc_med):
    codec = make_codec(tiny_config)
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    p = passwords(2, seed=5)
    with torch.no_grad():
        a = codec.deidentify(x, p[0], enc_med)
        b = codec.deidentify(x, p[1], enc_med)
    assert not torch.allclose(a, b)


def test_sidecar_recovery_is_exact_path(tiny_config, enc_med):
    codec = make_codec(tiny_config)
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    p = passwords(1)[0]
    with torch.no_grad():
        x_enc, f_enc = codec.deidentify(x, p, enc_med, return_feature=True)
        exact = codec.recover(f_enc, p)
        approx = codec.recover(x_enc, p, enc_med)
    assert exact.path == "sidecar" and exact.exact
    assert approx.path == "re-encode" and not approx.exact


def test_recovery_without_sidecar_or_reencode(tiny_config, enc_med):
    codec = make_codec(tiny_config)
    x = torch.zeros(1, 3, 64, 64)
    with pytest.raises(UnrecoverableError):
        codec.recover(x, passwords(1)[0], enc_med, allow_reencode=False)
    with pytest.raises(UnrecoverableError):
        codec.recover(None, passwords(1)[0])


def test_medical_feature_switch(tiny_config):
    from dataclasses import replace

    codec = make_codec(replace(tiny_config, use_med_feature=False))
    f_face = torch.randn(1, 512, 2, 2)
    with torch.no_grad():
        a = codec.fuse_medical(f_face, torch.randn(1, 320, 4, 4))
        b = codec.fuse_medical(f_face, torch.randn(1, 320, 4, 4))
    assert torch.equal(a, b)


def test_forward_train_outputs(tiny_config, enc_med):
    codec = make_codec(tiny_config)
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    p, q = passwords(2, 1), passwords(2, 2)
    with torch.no_grad():
        out = codec.forward_train(x, p, q, enc_med.extract(x))
    for image in (out.x_enc, out.x_hat, out.x_wrong):
        assert image.shape == x.shape
    assert isinstance(out.f_enc, EncryptedFeature)
    assert out.f.shape == (2, 512, 2, 2)


def test_discriminator_scores_patches(tiny_config):
    codec = make_codec(tiny_config)
    scores = codec.discriminate(torch.zeros(2, 3, 64, 64))
    assert scores.dim() == 4 and scores.shape[0] == 2 and scores.shape[1] == 1


def test_checkpoint_round_trip_is_forward_identical(tmp_path, tiny_config, enc_med):
    codec = make_codec(tiny_config, seed=3)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, codec, training_step=12, encoder_metadata=enc_med.metadata)
    loaded = load_checkpoint(path)
    assert loaded.header["training_step"] == 12
    assert loaded.header["encoder_metadata"]["checksum"] == enc_med.checksum()
    assert loaded.trainer_state is None
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    p = passwords(1)[0]
    with torch.no_grad():
        expected = codec.deidentify(x, p, enc_med)
        actual = loaded.codec.eval().deidentify(x, p, enc_med)
    assert torch.equal(expected, actual)
    assert not (tmp_path / "ckpt.pt.tmp").exists()


def test_checkpoint_missing_group(tmp_path, tiny_config):
    codec = make_codec(tiny_config)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, codec)
    archive = torch.load(path, weights_only=True)
    del archive["parameters"][PARAMETER_GROUPS[0]]
    torch.save(archive, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_not_found(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def test_discriminator_gradient_matches_finite_differences(tiny_config):
    codec = make_codec(tiny_config).double()
    generator = torch.Generator().manual_seed(0)
    x = (torch.rand(1, 3, 64, 64, generator=generator, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    codec.discriminate(x).mean().backward()
    analytic = x.grad.detach()
    eps = 1e-6
    with torch.no_grad():
        for index in [(0, 0, 0, 0), (0, 1, 17, 30), (0, 2, 40, 9), (0, 0, 63, 63), (0, 1, 32, 32)]:
            up, down = x.detach().clone(), x.detach().clone()
            up[index] += eps
            down[index] -= eps
            numeric = (codec.discriminate(up).mean() - codec.discriminate(down).mean()) / (2 * eps)
            assert float(numeric) == pytest.approx(float(analytic[index]), rel=1e-3, abs=1e-9)
