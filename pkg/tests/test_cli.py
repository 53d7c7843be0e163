"""End-to-end command tests on a toy configuration."""
import json

import pytest
import torch
import yaml
from click.testing import CliRunner

from medsemdeid.__main__ import cli
from medsemdeid.data import SyntheticFaces
from medsemdeid.forge.records import read_manifest
from medsemdeid.tensors import load_image, save_image

ENV = {"MEDSEM_PASSPHRASE": "correct horse battery staple"}


def toy_config(tmp_path, **sections):
    data = {
        "model": {
            "image_size": 64,
            "base_channels": 8,
            "encryptor_depth": 1,
            "decryptor_depth": 1,
            "num_heads": 2,
            "max_grid": 8,
            "disc_channels": 8,
            "disc_layers": 2,
        },
        "embedder": {"kind": "projection", "options": {"input_size": 64, "dim": 64}},
        "train": {"total_steps": 2, "lr_halve_step": 1, "batch_size": 2, "eval_every": 100, "checkpoint_every": 100},
        "io": {
            "output_dir": str(tmp_path / "run"),
            "synthetic_samples": 8,
            "synthetic_identities": 4,
            "holdout_samples": 4,
        },
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A toy checkpoint shared by the inference commands."""
    root = tmp_path_factory.mktemp("trained")
    config = toy_config(root)
    result = CliRunner().invoke(cli, ["train", str(config)])
    assert result.exit_code == 0, result.output
    return config, root / "run" / "final.pt"


@pytest.fixture
def faces(tmp_path):
    directory = tmp_path / "faces"
    corpus = SyntheticFaces(3, 3, 64, seed=5)
    for i in range(3):
        save_image(corpus[i].image, directory / f"patient{i}.png")
    return directory


def test_backends_lists_registries():
    result = CliRunner().invoke(cli, ["backends"])
    assert result.exit_code == 0
    assert "med-encoder diffusion-truncated" in result.output
    assert "embedder projection" in result.output
    assert "classifier oracle" in result.output


def test_train_writes_checkpoint_and_resolved_config(trained):
    config, checkpoint = trained
    run = checkpoint.parent
    assert checkpoint.exists()
    assert (run / "resolved_config.yaml").exists()
    assert (run / "train_log.jsonl").exists()


def test_missing_manifest_is_a_config_error(tmp_path):
    config = toy_config(tmp_path, io={"corpus": "manifest"})
    result = CliRunner().invoke(cli, ["train", str(config)])
    assert result.exit_code == 2
    assert "io.manifest" in result.output


def test_unknown_config_key_exit_code(tmp_path):
    config = toy_config(tmp_path, model={"colour": "red"})
    result = CliRunner().invoke(cli, ["train", str(config)])
    assert result.exit_code == 2
    assert "model.colour" in result.output


def test_deidentify_and_recover_via_sidecar(trained, faces, tmp_path):
    config, checkpoint = trained
    out = tmp_path / "deid"
    runner = CliRunner()
    result = runner.invoke(
        cli, ["deidentify", str(config), str(checkpoint), str(faces), str(out), "--emit-sidecar"], env=ENV
    )
    assert result.exit_code == 0, result.output
    for i in range(3):
        assert (out / f"patient{i}_deid.png").exists()
        assert (out / f"patient{i}_deid.msde").exists()
        metadata = json.loads((out / f"patient{i}_deid.json").read_text(encoding="utf-8"))
        assert metadata["source"] == f"patient{i}.png"
        assert metadata["password_digest"].startswith("pbkdf2-sha256$")
        assert not torch.equal(load_image(out / f"patient{i}_deid.png"), load_image(faces / f"patient{i}.png"))

    result = runner.invoke(cli, ["recover", str(config), str(checkpoint), str(out / "patient0_deid.png")], env=ENV)
    assert result.exit_code == 0, result.output
    report = json.loads((out / "patient0_rec.json").read_text(encoding="utf-8"))
    assert report["path"] == "sidecar"
    assert report["exact"] is True
    assert report["tags"] == []
    assert (out / "patient0_rec.png").exists()

    result = runner.invoke(
        cli,
        ["recover", str(config), str(checkpoint), str(out / "patient1_deid.png"), "--no-sidecar", "--no-reencode"],
        env=ENV,
    )
    assert result.exit_code == 4

    result = runner.invoke(
        cli,
        ["recover", str(config), str(checkpoint), str(out / "patient2_deid.png"), "--no-sidecar"],
        env={"MEDSEM_PASSPHRASE": "wrong guess"},
    )
    assert result.exit_code == 0, result.output
    report = json.loads((out / "patient2_rec.json").read_text(encoding="utf-8"))
    assert report["path"] == "re-encode"
    assert report["tags"] == ["digest-mismatch"]


def test_deidentify_output_is_reproducible(trained, faces, tmp_path):
    config, checkpoint = trained
    runner = CliRunner()
    for name in ("a", "b"):
        result = runner.invoke(cli, ["deidentify", str(config), str(checkpoint), str(faces), str(tmp_path / name)], env=ENV)
        assert result.exit_code == 0, result.output
    first, second = (json.loads((tmp_path / name / "patient0_deid.json").read_text(encoding="utf-8")) for name in "ab")
    # digests are salted per run; everything else matches
    assert first.pop("password_digest") != second.pop("password_digest")
    assert first == second
    assert (tmp_path / "a" / "patient0_deid.png").read_bytes() == (tmp_path / "b" / "patient0_deid.png").read_bytes()


def test_deidentify_needs_a_password(trained, faces, tmp_path):
    config, checkpoint = trained
    result = CliRunner().invoke(
        cli, ["deidentify", str(config), str(checkpoint), str(faces), str(tmp_path / "out")], env={"MEDSEM_PASSPHRASE": ""}
    )
    assert result.exit_code == 2
    assert "password" in result.output


def test_missing_checkpoint_is_a_data_error(trained, faces, tmp_path):
    config, _ = trained
    result = CliRunner().invoke(
        cli, ["deidentify", str(config), str(tmp_path / "none.pt"), str(faces), str(tmp_path / "out")], env=ENV
    )
    assert result.exit_code == 3


def test_eval_with_oracle_classifier(trained, tmp_path):
    _, checkpoint = trained
    config = toy_config(
        tmp_path,
        eval={"classifier": "oracle", "segmenter": "lesion-color", "batch_size": 2},
    )
    result = CliRunner().invoke(cli, ["eval", str(config), str(checkpoint), "--output", str(tmp_path / "report")])
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "report" / "eval_report.json").read_text(encoding="utf-8"))
    assert report["accuracy"] == 1.0
    assert report["samples"] == 4
    assert "dice" in report and "perceptual" not in report
    assert "Accuracy (overall)" in result.output


def forge_config(tmp_path, name):
    return toy_config(
        tmp_path / name,
        forge={"n": 6, "threshold": 0.001, "parallelism": 2},
        io={"output_dir": str(tmp_path / name / "run")},
    )


def test_forge_is_reproducible(tmp_path):
    runner = CliRunner()
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        result = runner.invoke(cli, ["forge", str(forge_config(tmp_path, name))])
        assert result.exit_code == 0, result.output
    manifest = (tmp_path / "a" / "run" / "manifest.jsonl").read_bytes()
    assert manifest == (tmp_path / "b" / "run" / "manifest.jsonl").read_bytes()
    assert len(read_manifest(tmp_path / "a" / "run" / "manifest.jsonl")) == 6
    report = json.loads((tmp_path / "a" / "run" / "forge_report.json").read_text(encoding="utf-8"))
    assert report["emitted"] == 6
    assert set(report["gaps"]) == {"disease", "age", "gender"}
    assert (tmp_path / "a" / "run" / "review_queue.csv").exists()


def test_forge_compare_planners_and_review(tmp_path):
    (tmp_path / "c").mkdir()
    runner = CliRunner()
    result = runner.invoke(cli, ["forge", str(forge_config(tmp_path, "c")), "--compare-planners"])
    assert result.exit_code == 0, result.output
    assert "Guided sampling" in result.output
    run = tmp_path / "c" / "run"
    assert set(json.loads((run / "planner_comparison.json").read_text(encoding="utf-8"))) == {"guided", "random"}

    records = read_manifest(run / "manifest.jsonl")
    accept = tmp_path / "accept.txt"
    accept.write_text(records[0].sample_id + "\n", encoding="utf-8")
    result = runner.invoke(cli, ["apply-review", str(run / "manifest.jsonl"), str(accept), str(tmp_path / "kept.jsonl")])
    assert result.exit_code == 0, result.output
    assert [r.sample_id for r in read_manifest(tmp_path / "kept.jsonl")] == [records[0].sample_id]


def test_forge_echo_client_rejects_everything(tmp_path):
    (tmp_path / "e").mkdir()
    config = toy_config(
        tmp_path / "e",
        forge={"n": 4, "threshold": 0.001, "retry_budget": 1, "client": {"kind": "echo"}},
        io={"output_dir": str(tmp_path / "e" / "run")},
    )
    result = CliRunner().invoke(cli, ["forge", str(config)])
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "e" / "run" / "forge_report.json").read_text(encoding="utf-8"))
    assert report["emitted"] == 0
    assert report["leakage_rejection_pct"] == 100.0


def test_forge_with_several_recognizers(tmp_path):
    (tmp_path / "m").mkdir()
    recognizers = [
        {"kind": "projection", "name": "proj-a", "options": {"input_size": 64, "dim": 64, "seed": 0}},
        {"kind": "projection", "name": "proj-b", "options": {"input_size": 64, "dim": 32, "seed": 1}},
    ]
    config = toy_config(
        tmp_path / "m",
        forge={"n": 4, "embedders": recognizers, "thresholds": {"proj-a": 0.001, "proj-b": 0.001}},
        io={"output_dir": str(tmp_path / "m" / "run")},
    )
    result = CliRunner().invoke(cli, ["forge", str(config)])
    assert result.exit_code == 0, result.output
    assert "leakage by recognizer: proj-a 0.00%, proj-b 0.00%" in result.output
    report = json.loads((tmp_path / "m" / "run" / "forge_report.json").read_text(encoding="utf-8"))
    assert report["thresholds"] == {"proj-a": 0.001, "proj-b": 0.001}
    assert set(report["leakage_pct_by_embedder"]) == {"proj-a", "proj-b"}
    assert report["emitted"] == 4


def test_forge_threshold_for_unknown_recognizer(tmp_path):
    config = toy_config(
        tmp_path,
        forge={"embedders": [{"kind": "projection", "name": "proj-a"}], "thresholds": {"arcface": 0.5}},
    )
    result = CliRunner().invoke(cli, ["forge", str(config)])
    assert result.exit_code == 2
    assert "forge.thresholds" in result.output
