"""Directional behavior of a toy codec after a few hundred steps."""
import numpy as np
import pytest

from medsemdeid.data import SyntheticFaces, collate
from medsemdeid.evaluation import probe_codec
from medsemdeid.sweeps import run_ablation, run_sweep
from medsemdeid.trainer import PROBE_STREAM, TRAIN_LOG, TrainConfig, init_codec, read_train_log, step_passwords, train


def toy_train_config(**overrides):
    values = dict(total_steps=400, lr_halve_step=300, batch_size=8, lr_init=5e-4, eval_every=1000, checkpoint_every=1000)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def corpus():
    return SyntheticFaces(64, 8, 64, seed=0)


@pytest.fixture(scope="module")
def holdout():
    return SyntheticFaces(16, 8, 64, seed=1)


@pytest.mark.slow
def test_toy_training_directions(tmp_path, tiny_config, enc_med, phi, corpus, holdout):
    config = toy_train_config()
    batch = collate([holdout[i] for i in range(config.batch_size)])
    p, p_wrong = step_passwords(config.seed, 0, len(batch), stream=PROBE_STREAM)
    untrained = probe_codec(init_codec(tiny_config, 0).eval(), enc_med, phi, batch.images, p, p_wrong)

    result = train(config, corpus, init_codec(tiny_config, 0), enc_med, phi, output_dir=tmp_path, holdout=holdout)
    probe = result.gate.metrics
    rev = np.array([record["rev"] for record in read_train_log(tmp_path / TRAIN_LOG)])
    assert rev[-50:].mean() < 0.25 * rev[:50].mean()
    assert probe["id_dis_enc"] > probe["id_dis_hat"]
    assert probe["cos_wrong"] < probe["cos_hat"]
    assert probe["psnr_right"] > probe["psnr_wrong"]
    assert probe["med_distance"] < untrained.med_distance


@pytest.mark.slow
def test_medical_weight_lowers_feature_distance(tiny_config, enc_med, phi, corpus, holdout):
    rows = run_sweep(
        "lambda_med",
        [0, 5, 20],
        train_config=toy_train_config(),
        codec_config=tiny_config,
        corpus=corpus,
        holdout=holdout,
        enc_med=enc_med,
        embedder=phi,
    )
    distances = [row.probe.med_distance for row in rows]
    assert distances[0] > distances[1] > distances[2]
    id_dis = [row.probe.id_dis_enc for row in rows]
    assert all(later - earlier <= 0.05 for earlier, later in zip(id_dis, id_dis[1:]))


@pytest.mark.slow
def test_reconstruction_weight_raises_recovery_psnr(tiny_config, enc_med, phi, corpus, holdout):
    rows = run_sweep(
        "lambda_rev",
        [0.01, 10],
        train_config=toy_train_config(),
        codec_config=tiny_config,
        corpus=corpus,
        holdout=holdout,
        enc_med=enc_med,
        embedder=phi,
    )
    assert rows[1].probe.psnr_right > rows[0].probe.psnr_right


@pytest.mark.slow
def test_ablation_full_model_preserves_medical_features(tiny_config, enc_med, phi, corpus, holdout):
    rows = run_ablation(
        train_config=toy_train_config(),
        codec_config=tiny_config,
        corpus=corpus,
        holdout=holdout,
        enc_med=enc_med,
        embedder=phi,
        grid=((False, False), (True, True)),
    )
    assert rows[1].probe.med_distance < rows[0].probe.med_distance
    assert abs(rows[1].probe.id_dis_enc - rows[0].probe.id_dis_enc) < 0.02


@pytest.mark.slow
def test_frozen_networks_survive_a_thousand_steps(tiny_config, enc_med, phi, corpus):
    med_before, phi_before = enc_med.checksum(), phi.checksum()
    config = toy_train_config(total_steps=1000, lr_halve_step=500, batch_size=2)
    result = train(config, corpus, init_codec(tiny_config, 0), enc_med, phi)
    assert result.step == 1000
    assert enc_med.checksum() == med_before
    assert phi.checksum() == phi_before
