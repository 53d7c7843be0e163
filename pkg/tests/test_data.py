import pytest
import torch

from medsemdeid.data import ManifestDataset, SyntheticFaces, collate
from medsemdeid.errors import DataError
from medsemdeid.forge.planner import distribution_guided_plan
from medsemdeid.forge.records import SampleRecord, TargetDistributions, write_manifest
from medsemdeid.labels import DISEASE_CODES
from medsemdeid.tensors import save_image


def test_synthetic_faces_are_deterministic():
    a = SyntheticFaces(10, 4, 64, seed=3)
    b = SyntheticFaces(10, 4, 64, seed=3)
    assert torch.equal(a[7].image, b[7].image)
    assert not torch.equal(a[7].image, SyntheticFaces(10, 4, 64, seed=4)[7].image)


def test_synthetic_labels_identities_and_masks():
    faces = SyntheticFaces(16, 4, 64, seed=0)
    assert [faces[i].label for i in range(8)] == list(DISEASE_CODES)
    assert [faces[i].identity for i in range(6)] == [0, 1, 2, 3, 0, 1]
    for i in range(8):
        sample = faces[i]
        assert sample.image.shape == (3, 64, 64)
        assert sample.image.min() >= -1 and sample.image.max() <= 1
        assert bool(sample.mask.any()) == (sample.label != "Normal")
    with pytest.raises(IndexError):
        faces[16]
    with pytest.raises(DataError):
        SyntheticFaces(0)


def test_collate():
    faces = SyntheticFaces(4, 2, 64)
    batch = collate([faces[i] for i in range(4)])
    assert len(batch) == 4
    assert batch.images.shape == (4, 3, 64, 64)
    assert batch.identities.tolist() == [0, 1, 0, 1]
    assert batch.masks.shape == (4, 64, 64)


def test_manifest_dataset(tmp_path):
    plan = distribution_guided_plan(TargetDistributions.uniform([30, 50]), 6, seed=0)
    faces = SyntheticFaces(6, 6, 64)
    records = []
    for i, request in enumerate(plan.requests):
        relative = f"images/{request.sample_id}.png"
        save_image(faces[i].image, tmp_path / relative)
        records.append(
            SampleRecord(
                sample_id=request.sample_id,
                disease=request.disease,
                severity=request.severity,
                age=request.age,
                gender=request.gender,
                injection_weight=request.injection_weight,
                reference_id=None,
                prompt=request.prompt,
                split="train" if i < 4 else "val",
                file_path=relative,
                leakage_distance=1.0,
            )
        )
    write_manifest(tmp_path / "manifest.jsonl", records)
    dataset = ManifestDataset(tmp_path / "manifest.jsonl", split="train", image_size=32)
    assert len(dataset) == 4
    sample = dataset[1]
    assert sample.image.shape == (3, 32, 32)
    assert sample.identity == 1
    assert sample.label == records[1].disease
    assert len(ManifestDataset(tmp_path / "manifest.jsonl")) == 6
