import builtins

import pytest
import torch

from medsemdeid.data import SyntheticFaces, collate
from medsemdeid.errors import ConfigError, UnknownBackendError
from medsemdeid.metrics import dice
from medsemdeid.plugins import (
    ConstantClassifier,
    LesionColorClassifier,
    LesionColorSegmenter,
    OracleClassifier,
    PixelRMSE,
    load_plugin,
    registry,
)


@pytest.fixture(scope="module")
def batch():
    faces = SyntheticFaces(8, n_identities=8, image_size=64, seed=0)
    return collate([faces[i] for i in range(8)])


def test_registry_kinds():
    assert set(registry.list("classifier")) == {"oracle", "constant", "lesion-color"}
    assert set(registry.list("segmenter")) == {"lesion-color"}
    assert set(registry.list("perceptual")) == {"pixel-rmse", "lpips"}


def test_load_plugin():
    assert load_plugin(None, "classifier") is None
    assert isinstance(load_plugin("constant", "classifier", label="TAO"), ConstantClassifier)
    with pytest.raises(UnknownBackendError) as exc:
        load_plugin("resnet", "classifier")
    assert exc.value.key == "eval.classifier"


def test_unavailable_package_gives_absent_plugin(monkeypatch):
    real_import = builtins.__import__

    def fake_import(name, *args, **kwargs):
        if name == "lpips":
            raise ImportError("No module named 'lpips'")
        return real_import(name, *args, **kwargs)

    monkeypatch.setattr(builtins, "__import__", fake_import)
    assert load_plugin("lpips", "perceptual") is None


def test_lesion_color_classifier_reads_synthetic_lesions(batch):
    assert LesionColorClassifier().predict(batch.images) == batch.labels


def test_lesion_color_segmenter_matches_masks(batch):
    predicted = LesionColorSegmenter().segment(batch.images)
    for truth, mask in zip(batch.masks, predicted):
        assert dice(truth, mask) == 1.0


def test_simple_classifiers(batch):
    assert OracleClassifier().predict(batch.images, batch.labels) == batch.labels
    with pytest.raises(ConfigError):
        OracleClassifier().predict(batch.images)
    assert ConstantClassifier("BCC").predict(batch.images) == ["BCC"] * 8
    with pytest.raises(ConfigError):
        ConstantClassifier("Flu")


def test_pixel_rmse(batch):
    distance = PixelRMSE().distance(batch.images, batch.images + 0.5)
    assert torch.allclose(distance, torch.full((8,), 0.5))
