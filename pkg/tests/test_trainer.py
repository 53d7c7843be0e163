import math

import pytest
import torch

from medsemdeid.data import SyntheticFaces
from medsemdeid.errors import DataError, NonFiniteLossError
from medsemdeid.evaluation import CodecProbe
from medsemdeid.objective import LossWeights
from medsemdeid.trainer import (
    TRAIN_LOG,
    TrainConfig,
    batch_indices,
    check_gate,
    init_codec,
    learning_rate,
    read_train_log,
    step_passwords,
    train,
)

LOSS_KEYS = ("deid", "rev_id", "wrong", "med", "rev", "gan_g", "gan_d", "total")


def short_config(**overrides):
    values = dict(
        total_steps=4,
        lr_halve_step=2,
        batch_size=2,
        eval_every=1000,
        checkpoint_every=2,
        log_every=1,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def corpus():
    return SyntheticFaces(8, n_identities=4, image_size=64, seed=0)


def test_learning_rate_halves_once():
    config = TrainConfig(lr_init=1e-3, lr_halve_step=10, total_steps=30)
    assert learning_rate(0, config) == 1e-3
    assert learning_rate(9, config) == 1e-3
    assert learning_rate(10, config) == 5e-4
    assert learning_rate(29, config) == 5e-4


def test_batch_indices_are_epoch_permutations():
    epoch = [i for step in range(3) for i in batch_indices(step, 6, 2, seed=0)]
    assert sorted(epoch) == list(range(6))
    assert batch_indices(4, 6, 2, seed=0) == batch_indices(4, 6, 2, seed=0)
    # a batch may straddle two epochs
    assert len(batch_indices(1, 5, 4, seed=1)) == 4


def test_step_passwords_are_reproducible():
    p1, w1 = step_passwords(3, 7, 4)
    p2, w2 = step_passwords(3, 7, 4)
    assert torch.equal(p1, p2) and torch.equal(w1, w2)
    p3, _ = step_passwords(3, 8, 4)
    assert not torch.equal(p1, p3)


def test_disabling_med_loss_zeroes_its_weight():
    config = TrainConfig(use_med_loss=False, weights=LossWeights(lambda_med=5.0, lambda_rev=0.3))
    assert config.effective_weights() == LossWeights(lambda_med=0.0, lambda_rev=0.3)


def test_check_gate():
    probe = CodecProbe(
        id_dis_enc=0.9, id_dis_hat=0.1, cos_hat=0.9, cos_wrong=0.1, med_distance=0.01, psnr_right=25.0, psnr_wrong=9.0
    )
    assert check_gate(probe, {}).passed
    assert check_gate(probe, {"min_psnr_right": 20.0, "max_psnr_wrong": 12.0}).passed
    result = check_gate(probe, {"min_psnr_right": 30.0, "max_id_dis_hat": 0.2})
    assert not result.passed
    assert len(result.failures) == 1
    assert "psnr_right" in result.failures[0]


def test_short_run_writes_logs_and_checkpoints(tmp_path, tiny_config, enc_med, phi, corpus):
    med_before, phi_before = enc_med.checksum(), phi.checksum()
    result = train(short_config(), corpus, init_codec(tiny_config, 0), enc_med, phi, output_dir=tmp_path)
    assert result.step == 4
    assert [p.name for p in result.checkpoints] == ["step_0000002.pt", "step_0000004.pt", "final.pt"]
    assert (tmp_path / "latest.pt").exists()
    steps = read_train_log(tmp_path / TRAIN_LOG)
    assert [r["step"] for r in steps] == [0, 1, 2, 3]
    assert [r["lr"] for r in steps] == [2e-4, 2e-4, 1e-4, 1e-4]
    for record in steps:
        for key in LOSS_KEYS:
            assert math.isfinite(record[key])
    assert read_train_log(tmp_path / TRAIN_LOG, kind="gate")[0]["passed"] is True
    # frozen networks are never updated
    assert enc_med.checksum() == med_before
    assert phi.checksum() == phi_before


def test_resume_replays_the_loss_stream(tmp_path, tiny_config, enc_med, phi, corpus):
    config = short_config()
    train(config, corpus, init_codec(tiny_config, 0), enc_med, phi, output_dir=tmp_path / "full")
    train(
        config,
        corpus,
        init_codec(tiny_config, 0),
        enc_med,
        phi,
        output_dir=tmp_path / "resumed",
        resume=tmp_path / "full" / "step_0000002.pt",
    )
    full = read_train_log(tmp_path / "full" / TRAIN_LOG)[2:]
    resumed = read_train_log(tmp_path / "resumed" / TRAIN_LOG)
    assert [r["step"] for r in resumed] == [2, 3]
    for a, b in zip(full, resumed):
        for key in LOSS_KEYS:
            assert b[key] == a[key], (a["step"], key)


def test_same_seed_same_weights(tiny_config, enc_med, phi, corpus):
    first = train(short_config(total_steps=2, lr_halve_step=1), corpus, init_codec(tiny_config, 0), enc_med, phi)
    second = train(short_config(total_steps=2, lr_halve_step=1), corpus, init_codec(tiny_config, 0), enc_med, phi)
    for (name, a), (_, b) in zip(first.codec.state_dict().items(), second.codec.state_dict().items()):
        assert torch.equal(a, b), name


def test_non_finite_loss_aborts(tiny_config, enc_med, phi, corpus):
    codec = init_codec(tiny_config, 0)
    with torch.no_grad():
        next(codec.decoder.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        train(short_config(), corpus, codec, enc_med, phi)


def test_empty_corpus_is_rejected(tiny_config, enc_med, phi):
    with pytest.raises(DataError):
        train(short_config(), [], init_codec(tiny_config, 0), enc_med, phi)


def test_resume_needs_trainer_state(tmp_path, tiny_config, enc_med, phi, corpus):
    from medsemdeid.codec import save_checkpoint

    path = tmp_path / "weights_only.pt"
    save_checkpoint(path, init_codec(tiny_config, 0), training_step=0, encoder_metadata=enc_med.metadata)
    with pytest.raises(DataError):
        train(short_config(), corpus, init_codec(tiny_config, 0), enc_med, phi, resume=path)


def test_resume_in_place_rewrites_the_log_tail(tmp_path, tiny_config, enc_med, phi, corpus):
    config = short_config()
    train(config, corpus, init_codec(tiny_config, 0), enc_med, phi, output_dir=tmp_path)
    first = read_train_log(tmp_path / TRAIN_LOG)
    train(
        config,
        corpus,
        init_codec(tiny_config, 0),
        enc_med,
        phi,
        output_dir=tmp_path,
        resume=tmp_path / "step_0000002.pt",
    )
    steps = read_train_log(tmp_path / TRAIN_LOG)
    assert [r["step"] for r in steps] == [0, 1, 2, 3]
    assert len(read_train_log(tmp_path / TRAIN_LOG, kind="gate")) == 1
    for a, b in zip(first, steps):
        for key in LOSS_KEYS:
            assert b[key] == a[key]
