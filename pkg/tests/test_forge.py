"""Planning, prompts, references and the manifest format."""
import json
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from medsemdeid.errors import ConfigError, InvalidInputError, ManifestError, UnknownBackendError
from medsemdeid.evaluation import distribution_gaps
from medsemdeid.forge.planner import (
    ReferenceMatcher,
    distribution_guided_plan,
    largest_remainder,
    make_plan,
    random_plan,
    stratified_ages,
)
from medsemdeid.forge.prompts import build_prompt, sample_injection_weight
from medsemdeid.forge.records import (
    ManifestWriter,
    ReferenceFace,
    SampleRecord,
    TargetDistributions,
    apply_accept_list,
    assign_split,
    read_manifest,
    write_manifest,
    write_review_queue,
)
from medsemdeid.forge.references import StubEstimator, load_estimator, load_references
from medsemdeid.labels import DISEASE_CODES, SPLIT_SIZES


def skewed_targets():
    return TargetDistributions(
        disease={"BCC": 0.4, "TAO": 0.3, "Normal": 0.2, "SCC": 0.1},
        gender={"female": 0.8, "male": 0.2},
        ages=[50, 52, 53, 55, 55, 56, 57, 58, 60, 61],
    )


def record(sample_id, **overrides):
    values = dict(
        sample_id=sample_id,
        disease="BCC",
        severity="mid",
        age=40.0,
        gender="female",
        injection_weight=0.3,
        reference_id=None,
        prompt=build_prompt("BCC", "mid"),
        split="train",
        file_path=f"images/{sample_id}.png",
        leakage_distance=0.8,
    )
    values.update(overrides)
    return SampleRecord(**values)


def test_build_prompt():
    assert build_prompt("BCC", "slight") == "A face, eye with Basal Cell Carcinoma, slight-level"
    assert build_prompt("TAO", "heavy") == "A face, eye with Thyroid Associated Ophthalmopathy, heavy-level"
    with pytest.raises(InvalidInputError):
        build_prompt("Flu", "mid")
    with pytest.raises(InvalidInputError):
        build_prompt("BCC", "extreme")


def test_injection_weight_range_and_mean():
    rng = np.random.default_rng(0)
    weights = np.array([sample_injection_weight(rng) for _ in range(10000)])
    assert weights.min() >= 0.2 and weights.max() <= 0.4
    assert abs(weights.mean() - 0.3) < 0.005
    again = np.random.default_rng(0)
    assert sample_injection_weight(again) == weights[0]


def test_largest_remainder_sums_to_n():
    counts = largest_remainder({"a": 1 / 3, "b": 1 / 3, "c": 1 / 3}, 10)
    assert sum(counts.values()) == 10
    assert sorted(counts.values()) == [3, 3, 4]
    assert largest_remainder({"a": 0.58, "b": 0.42}, 100) == {"a": 58, "b": 42}


def test_stratified_ages_follow_targets():
    ages = stratified_ages([20, 40, 60, 80], 8)
    assert sorted(ages) == [20, 20, 40, 40, 60, 60, 80, 80]


def test_guided_plan_exact_uniform_counts():
    plan = distribution_guided_plan(TargetDistributions.uniform(range(20, 81, 5)), 1000, seed=0)
    diseases = Counter(r.disease for r in plan.requests)
    genders = Counter(r.gender for r in plan.requests)
    assert diseases == {code: 125 for code in DISEASE_CODES}
    assert genders == {"female": 500, "male": 500}
    assert len({r.sample_id for r in plan.requests}) == 1000
    assert plan.requests[0].sample_id == "s0-000000"


def test_plans_are_reproducible():
    targets = skewed_targets()
    assert distribution_guided_plan(targets, 50, seed=4).requests == distribution_guided_plan(targets, 50, seed=4).requests
    assert random_plan(50, seed=4).requests == random_plan(50, seed=4).requests
    assert distribution_guided_plan(targets, 50, seed=4).requests != distribution_guided_plan(targets, 50, seed=5).requests


@pytest.mark.parametrize("n", [100, 1000])
def test_guided_planner_beats_random(n):
    targets = skewed_targets()
    guided = distribution_gaps(distribution_guided_plan(targets, n, seed=0).requests, targets)
    unguided = distribution_gaps(random_plan(n, seed=0).requests, targets)
    for kind in ("disease", "age", "gender"):
        assert guided[kind] < unguided[kind]


def test_make_plan_dispatch():
    targets = skewed_targets()
    assert make_plan("random", targets, 5).requests == random_plan(5).requests
    with pytest.raises(InvalidInputError):
        make_plan("clever", targets, 5)
    with pytest.raises(InvalidInputError):
        distribution_guided_plan(targets, 0)


def test_requests_carry_consistent_prompts():
    for request in distribution_guided_plan(skewed_targets(), 40, seed=1).requests:
        assert request.prompt == build_prompt(request.disease, request.severity)
        assert 0.2 <= request.injection_weight <= 0.4
        assert request.split == assign_split(request.sample_id, 1)


def test_reference_matching_and_shortfalls():
    references = [ReferenceFace("f1", "f1.png", 55.0, "female"), ReferenceFace("f2", "f2.png", 55.0, "female")]
    plan = distribution_guided_plan(skewed_targets(), 50, seed=0, references=references)
    female = [r for r in plan.requests if r.gender == "female"]
    male = [r for r in plan.requests if r.gender == "male"]
    assert all(r.reference is not None for r in female)
    assert all(r.reference is None for r in male)
    assert plan.shortfall_summary() == {"male": len(male)}
    # equally close faces are used in turn
    uses = Counter(r.reference.face_id for r in female)
    assert abs(uses["f1"] - uses["f2"]) <= 1


def test_no_references_means_no_shortfalls():
    plan = distribution_guided_plan(skewed_targets(), 20, seed=0)
    assert plan.shortfalls == []


def test_reference_matcher_respects_age_gap():
    matcher = ReferenceMatcher([ReferenceFace("a", "a.png", 30.0, "male")], max_age_gap=5)
    assert matcher.match(34.0, "male").face_id == "a"
    assert matcher.match(36.0, "male") is None
    assert matcher.match(30.0, "female") is None


def test_target_validation():
    with pytest.raises(ConfigError) as exc:
        TargetDistributions(disease={"BCC": 0.5}, gender={"female": 1.0}, ages=[30])
    assert exc.value.key == "forge.targets.disease"
    with pytest.raises(ConfigError):
        TargetDistributions(disease={"Flu": 1.0}, gender={"female": 1.0}, ages=[30])
    with pytest.raises(ConfigError):
        TargetDistributions(disease={"BCC": 1.0}, gender={"female": 1.0}, ages=[])


def test_assign_split_ratios():
    splits = Counter(assign_split(f"s0-{i:06d}", 0) for i in range(20000))
    total = sum(SPLIT_SIZES.values())
    for split, size in SPLIT_SIZES.items():
        assert abs(splits[split] / 20000 - size / total) < 0.015
    assert assign_split("s0-000001", 0) == assign_split("s0-000001", 0)


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "manifest.jsonl"
    writer = ManifestWriter(path)
    writer.append(record("a"))
    writer.append(record("b", gender="male", reference_id="f1"))
    records = read_manifest(path)
    assert [r.sample_id for r in records] == ["a", "b"]
    assert records[1].reference_id == "f1"
    # reopening keeps the existing records
    ManifestWriter(path).append(record("c"))
    assert len(read_manifest(path)) == 3


def test_manifest_reader_errors(tmp_path):
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "missing.jsonl")
    bad_header = tmp_path / "header.jsonl"
    bad_header.write_text('{"schema": "other", "version": 1}\n', encoding="utf-8")
    with pytest.raises(ManifestError):
        read_manifest(bad_header)
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, [record("a")])
    with path.open("a", encoding="utf-8") as f:
        f.write("{not json\n")
    with pytest.raises(ManifestError, match=":3:"):
        read_manifest(path)
    invalid = tmp_path / "invalid.jsonl"
    write_manifest(invalid, [record("a")])
    data = json.loads(record("b").to_json())
    data["gender"] = "other"
    with invalid.open("a", encoding="utf-8") as f:
        f.write(json.dumps(data) + "\n")
    with pytest.raises(ManifestError):
        read_manifest(invalid)


def test_review_queue_and_accept_list(tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    write_manifest(manifest, [record("a"), record("b"), record("c")])
    assert write_review_queue(read_manifest(manifest), tmp_path / "queue.csv") == 3
    assert (tmp_path / "queue.csv").read_text(encoding="utf-8").splitlines()[0] == "sample_id,file_path"
    accept = tmp_path / "accept.txt"
    accept.write_text("a\nc\nzzz\n", encoding="utf-8")
    kept, dropped = apply_accept_list(manifest, accept, tmp_path / "reviewed.jsonl")
    assert (kept, dropped) == (2, 1)
    assert [r.sample_id for r in read_manifest(tmp_path / "reviewed.jsonl")] == ["a", "c"]


def test_load_references_from_directory(tmp_path):
    Image.new("RGB", (8, 8), (10, 20, 30)).save(tmp_path / "alice.png")
    Image.new("RGB", (8, 8), (200, 20, 30)).save(tmp_path / "bob.png")
    (tmp_path / "notes.txt").write_text("ignored", encoding="utf-8")
    faces = load_references(tmp_path)
    assert [f.face_id for f in faces] == ["alice", "bob"]
    assert faces[0].path == str(tmp_path / "alice.png")
    for face in faces:
        assert 20 <= face.age <= 80
        assert face.gender in ("female", "male")


def test_load_references_from_index(tmp_path):
    Image.new("RGB", (8, 8), (1, 2, 3)).save(tmp_path / "a.png")
    index = tmp_path / "refs.jsonl"
    index.write_text(
        json.dumps({"face_id": "a", "path": "a.png", "age": 33, "gender": "male"}) + "\n"
        + json.dumps({"face_id": "b", "path": "a.png"}) + "\n",
        encoding="utf-8",
    )
    faces = load_references(index)
    assert faces[0] == ReferenceFace("a", str(tmp_path / "a.png"), 33.0, "male")
    estimated = StubEstimator().estimate(Image.new("RGB", (8, 8), (1, 2, 3)))
    assert (faces[1].age, faces[1].gender) == estimated


def test_load_references_errors(tmp_path):
    index = tmp_path / "refs.jsonl"
    index.write_text(json.dumps({"face_id": "a"}) + "\n", encoding="utf-8")
    with pytest.raises(ManifestError):
        load_references(index)
    index.write_text(json.dumps({"face_id": "a", "path": "a.png", "age": 30, "gender": "x"}) + "\n", encoding="utf-8")
    with pytest.raises(ManifestError):
        load_references(index)
    with pytest.raises(UnknownBackendError) as exc:
        load_estimator("magic")
    assert exc.value.key == "forge.estimator"
