"""Command line interface for medsemdeid."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import torch
from dotenv import load_dotenv

from .codec import LoadedCheckpoint, MedSemCodec, load_checkpoint
from .config import EmbedderConfig, RunConfig, dump_config, load_config, write_resolved
from .data import ManifestDataset, SyntheticFaces
from .encoders import load_backend, registry as backend_registry
from .encoders.base import MedicalEncoder
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GeneratorError,
    InvalidInputError,
    MedSemError,
    TrainingAbortedError,
)
from .evaluation import distribution_gaps, evaluate, read_ratings, render_table
from .forge.generators import EchoGalleryClient, GeneratorClient, HttpGeneratorClient, NoiseClient
from .forge.pipeline import (
    REPORT_NAME,
    LeakageGuard,
    ages_from_file,
    build_guards,
    compare_planners,
    gallery_images_as_pil,
    load_gallery,
    render_planner_table,
    run_forge,
)
from .forge.planner import make_plan
from .forge.records import TargetDistributions, apply_accept_list, read_manifest, write_review_queue
from .forge.references import load_estimator, load_references
from .identity import IdentityEmbedder, embedders as embedder_registry, load_embedder
from .passwords import password_digest, resolve_password, verify_digest
from .plugins import load_plugin, registry as plugin_registry
from .sweeps import SWEEP_PARAMS, render_rows, run_ablation, run_sweep
from .tensors import LOSSLESS_SUFFIXES, EncryptedFeature, load_image, read_sidecar, save_image, write_sidecar
from .trainer import init_codec, train

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = LOSSLESS_SUFFIXES | {".jpg", ".jpeg"}
METADATA_VERSION = 1


# ---------------------------------------------------------------------------
# builders


def build_med_encoder(config: RunConfig) -> MedicalEncoder:
    section = config.med_encoder
    return load_backend(
        section.backend,
        section.weights,
        image_size=config.model.image_size,
        seed=section.seed,
        **section.options,
    )


def build_embedder(section: EmbedderConfig) -> IdentityEmbedder:
    options = dict(section.options)
    if section.weights is not None:
        options["weights"] = section.weights
    return load_embedder(section.kind, **options)


def build_eval_embedders(config: RunConfig) -> Dict[str, IdentityEmbedder]:
    sections = config.eval.embedders or [config.embedder]
    return {section.label: build_embedder(section) for section in sections}


def build_forge_guards(config: RunConfig, gallery: torch.Tensor, identities: Sequence[int]) -> List[LeakageGuard]:
    section = config.forge
    sections = section.embedders or [config.embedder]
    thresholds = {s.label: section.thresholds.get(s.label, section.threshold) for s in sections}
    return build_guards(
        gallery,
        identities,
        {s.label: build_embedder(s) for s in sections},
        {label: value for label, value in thresholds.items() if value is not None},
        section.false_reject_rate,
    )


def build_corpus(config: RunConfig, split: str) -> Sequence:
    """Training corpus for ``split="train"``, held-out samples otherwise."""
    io = config.io
    if io.corpus == "synthetic":
        if split == "train":
            return SyntheticFaces(io.synthetic_samples, io.synthetic_identities, config.model.image_size, io.seed)
        return SyntheticFaces(io.holdout_samples, io.synthetic_identities, config.model.image_size, io.seed + 1)
    if not io.manifest:
        raise ConfigError("required when io.corpus is 'manifest'", key="io.manifest")
    if not Path(io.manifest).exists():
        raise ConfigError(f"manifest not found: {io.manifest}", key="io.manifest")
    return ManifestDataset(io.manifest, split=split, image_size=config.model.image_size)


def build_targets(config: RunConfig) -> TargetDistributions:
    section = config.forge.targets
    ages = ages_from_file(section.ages_file) if section.ages_file else section.ages
    return TargetDistributions(disease=section.disease, gender=section.gender, ages=ages)


def build_client(config: RunConfig, gallery: torch.Tensor) -> GeneratorClient:
    section = config.forge.client
    if section.kind == "http":
        token = os.getenv(section.token_env) if section.token_env else None
        if section.endpoint is None:
            raise ConfigError("required for the http client", key="forge.client.endpoint")
        return HttpGeneratorClient(section.endpoint, timeout=section.timeout, retries=section.retries, token=token)
    if section.kind == "echo":
        return EchoGalleryClient(gallery_images_as_pil(gallery), seed=config.io.seed)
    if section.kind == "noise":
        return NoiseClient(image_size=config.model.image_size, seed=config.io.seed)
    raise ConfigError(f"unknown client '{section.kind}' (known: http, echo, noise)", key="forge.client.kind")


def open_checkpoint(path: str, enc_med: MedicalEncoder, device: str) -> MedSemCodec:
    """Load a checkpoint and check it was trained against ``enc_med``."""
    loaded: LoadedCheckpoint = load_checkpoint(path, map_location=device)
    recorded = loaded.header.get("encoder_metadata", {})
    if not recorded:
        logger.warning("%s records no medical encoder; skipping the compatibility check", path)
    elif recorded.get("checksum") != enc_med.checksum():
        raise CheckpointError(
            f"{path} was trained with medical encoder {recorded.get('backend')} "
            f"({recorded.get('weights')}), which does not match the configured one"
        )
    return loaded.codec.to(device).eval()


def _prepare(config_path: str) -> RunConfig:
    config = load_config(config_path)
    logger.info("resolved config:\n%s", dump_config(config))
    return config


# ---------------------------------------------------------------------------
# commands


class MedSemGroup(click.Group):
    """Maps package errors to their stable exit codes."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except MedSemError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)


@click.group(cls=MedSemGroup)
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
def cli(verbose: int) -> None:
    """Reversible medical-semantics-preserving face de-identification."""
    load_dotenv()
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(message)s", force=True)


@cli.command(name="train")
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Continue from a checkpoint.")
def train_cmd(config_path: str, resume: Optional[str]) -> None:
    """Train a codec; checkpoints and train_log.jsonl go to io.output_dir."""
    config = _prepare(config_path)
    out = Path(config.io.output_dir)
    write_resolved(config, out)
    corpus = build_corpus(config, "train")
    holdout = build_corpus(config, "select")
    enc_med = build_med_encoder(config).to(config.io.device)
    embedder = build_embedder(config.embedder).to(config.io.device)
    codec = init_codec(config.model, config.train.seed)
    result = train(
        config.train,
        corpus,
        codec,
        enc_med,
        embedder,
        output_dir=out,
        holdout=holdout,
        resume=resume,
        device=config.io.device,
    )
    click.echo(f"trained to step {result.step}; {len(result.checkpoints)} checkpoints in {out}")
    if config.train.gate and not result.gate.passed:
        raise TrainingAbortedError("evaluation gate failed: " + "; ".join(result.gate.failures))


@dataclass
class ImageResult:
    """Outcome of one input image."""

    source: str
    success: bool
    output: Optional[str] = None
    error: Optional[str] = None


def _input_images(input_dir: Path) -> List[Path]:
    if not input_dir.is_dir():
        raise DataError(f"input directory not found: {input_dir}")
    return sorted(p for p in input_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.argument("input_dir", type=click.Path(file_okay=False))
@click.argument("output_dir", type=click.Path(file_okay=False))
@click.option("--password", "password_source", default="env:MEDSEM_PASSPHRASE", show_default=True,
              help="env:NAME, keyfile:PATH or prompt.")
@click.option("--emit-sidecar", is_flag=True, help="Also write the encrypted feature for exact recovery.")
def deidentify(
    config_path: str, checkpoint: str, input_dir: str, output_dir: str, password_source: str, emit_sidecar: bool
) -> None:
    """De-identify every image in INPUT_DIR."""
    config = _prepare(config_path)
    device = config.io.device
    enc_med = build_med_encoder(config).to(device)
    codec = open_checkpoint(checkpoint, enc_med, device)
    p = resolve_password(password_source).to(device)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    results: List[ImageResult] = []
    for path in _input_images(Path(input_dir)):
        stem = f"{path.stem}_deid"
        try:
            x = load_image(path).to(device)
            with torch.no_grad():
                x_enc, f_enc = codec.deidentify(x, p, enc_med, return_feature=True)
        except (OSError, InvalidInputError) as exc:
            logger.warning("skipping %s: %s", path.name, exc)
            results.append(ImageResult(path.name, False, error=str(exc)))
            continue
        save_image(x_enc, out / f"{stem}.png")
        sidecar = None
        if emit_sidecar:
            sidecar = f"{stem}.msde"
            write_sidecar(f_enc, out / sidecar)
        metadata = {
            "schema_version": METADATA_VERSION,
            "source": path.name,
            "sidecar": sidecar,
            "password_digest": password_digest(p),
        }
        (out / f"{stem}.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        results.append(ImageResult(path.name, True, output=f"{stem}.png"))

    done = sum(r.success for r in results)
    click.echo(f"de-identified {done}/{len(results)} images into {out}")
    if results and not done:
        raise DataError("no input image could be processed")


def _recovery_output(path: Path) -> Path:
    stem = path.stem[: -len("_deid")] if path.stem.endswith("_deid") else path.stem
    return path.with_name(f"{stem}_rec.png")


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.argument("input_path", type=click.Path(dir_okay=False))
@click.option("--password", "password_source", default="env:MEDSEM_PASSPHRASE", show_default=True,
              help="env:NAME, keyfile:PATH or prompt.")
@click.option("--use-sidecar/--no-sidecar", default=True, help="Prefer the stored encrypted feature.")
@click.option("--reencode/--no-reencode", default=True, help="Fall back to re-encoding the image.")
@click.option("--output", type=click.Path(dir_okay=False), help="Recovered image path.")
def recover(
    config_path: str,
    checkpoint: str,
    input_path: str,
    password_source: str,
    use_sidecar: bool,
    reencode: bool,
    output: Optional[str],
) -> None:
    """Recover the original face from a de-identified image."""
    config = _prepare(config_path)
    device = config.io.device
    enc_med = build_med_encoder(config).to(device)
    codec = open_checkpoint(checkpoint, enc_med, device)
    p = resolve_password(password_source).to(device)
    source_path = Path(input_path)
    if not source_path.exists():
        raise DataError(f"input not found: {source_path}")

    sidecar = source_path.with_suffix(".msde")
    if use_sidecar and sidecar.exists():
        stored = read_sidecar(sidecar)
        source: Any = EncryptedFeature(stored.tokens.to(device), stored.height, stored.width)
    else:
        source = load_image(source_path).to(device)
    with torch.no_grad():
        recovery = codec.recover(source, p, enc_med, allow_reencode=reencode)

    tags = []
    metadata_path = source_path.with_suffix(".json")
    if metadata_path.exists():
        digest = json.loads(metadata_path.read_text(encoding="utf-8")).get("password_digest")
        if digest and not verify_digest(p.cpu(), digest):
            logger.warning("password does not match the digest recorded at de-identification")
            tags.append("digest-mismatch")
    target = Path(output) if output else _recovery_output(source_path)
    save_image(recovery.image, target)
    report = {
        "schema_version": METADATA_VERSION,
        "source": source_path.name,
        "path": recovery.path,
        "exact": recovery.exact,
        "tags": tags,
    }
    target.with_suffix(".json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(f"recovered {target} via {recovery.path}" + (" [digest-mismatch]" if tags else ""))


@cli.command(name="eval")
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False), help="Evaluate on this manifest's eval.split.")
@click.option("--output", type=click.Path(file_okay=False), help="Report directory (default io.output_dir).")
def eval_cmd(config_path: str, checkpoint: str, manifest: Optional[str], output: Optional[str]) -> None:
    """Write eval_report.json and eval_report.txt."""
    config = _prepare(config_path)
    device = config.io.device
    section = config.eval
    enc_med = build_med_encoder(config).to(device)
    codec = open_checkpoint(checkpoint, enc_med, device)
    if manifest:
        dataset: Sequence = ManifestDataset(manifest, split=section.split, image_size=config.model.image_size)
    else:
        dataset = build_corpus(config, section.split)
    ratings = None
    if section.ratings_original and section.ratings_deid:
        ratings = (read_ratings(section.ratings_original)[1], read_ratings(section.ratings_deid)[1])
    gaps = distribution_gaps(read_manifest(manifest), build_targets(config)) if manifest else None

    report = evaluate(
        codec,
        enc_med,
        {name: phi.to(device) for name, phi in build_eval_embedders(config).items()},
        dataset,
        seed=section.seed,
        batch_size=section.batch_size,
        classifier=load_plugin(section.classifier, "classifier", **section.classifier_options),
        segmenter=load_plugin(section.segmenter, "segmenter", **section.segmenter_options),
        perceptual=load_plugin(section.perceptual, "perceptual", **section.perceptual_options),
        matching_threshold=section.matching_threshold,
        false_accept_rate=section.false_accept_rate,
        ratings=ratings,
        wasserstein=gaps,
    )
    out = Path(output or config.io.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(report)
    (out / "eval_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "eval_report.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)


@cli.command(name="forge")
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--compare-planners", "compare", is_flag=True, help="Also report guided vs random planner gaps.")
def forge_cmd(config_path: str, compare: bool) -> None:
    """Build a leakage-filtered synthetic corpus into io.output_dir."""
    config = _prepare(config_path)
    section = config.forge
    out = Path(config.io.output_dir)
    write_resolved(config, out)
    seed = config.io.seed
    size = config.model.image_size
    targets = build_targets(config)

    references = None
    if section.references:
        references = load_references(section.references, load_estimator(section.estimator))

    if section.gallery_dir:
        gallery, identities = load_gallery(section.gallery_dir, size)
    else:
        faces = SyntheticFaces(config.io.synthetic_samples, config.io.synthetic_identities, size, seed)
        gallery = torch.stack([faces[i].image for i in range(len(faces))])
        identities = [faces.identity_of(i) for i in range(len(faces))]
    guards = build_forge_guards(config, gallery, identities)

    plan = make_plan(section.planner, targets, section.n, seed=seed, references=references, max_age_gap=section.max_age_gap)
    report = run_forge(
        plan,
        build_client(config, gallery),
        guards,
        output_dir=out,
        image_size=size,
        parallelism=section.parallelism,
        retry_budget=section.retry_budget,
        targets=targets,
        planner=section.planner,
    )
    (out / REPORT_NAME).write_text(report.to_json() + "\n", encoding="utf-8")
    write_review_queue(read_manifest(report.manifest), out / "review_queue.csv")
    click.echo(
        f"{report.emitted}/{report.requested} samples emitted; "
        f"leakage rejections {100 * report.rejection_rate:.2f}% of {report.candidates} candidates"
    )
    if len(guards) > 1:
        per_embedder = report.leakage_by_embedder()
        click.echo("leakage by recognizer: " + ", ".join(f"{name} {pct:.2f}%" for name, pct in per_embedder.items()))
    if report.gaps:
        click.echo("W-gaps: " + ", ".join(f"{kind} {value:.3f}" for kind, value in report.gaps.items()))
    if compare:
        gaps = compare_planners(targets, section.n, seed=seed, references=references, max_age_gap=section.max_age_gap)
        (out / "planner_comparison.json").write_text(json.dumps(gaps, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(render_planner_table(gaps), nl=False)
    if report.failures:
        raise GeneratorError(f"{report.failures} requests failed; see the failure log in {out}")


def _experiment_inputs(config: RunConfig) -> Dict[str, Any]:
    return {
        "train_config": config.train,
        "codec_config": config.model,
        "corpus": build_corpus(config, "train"),
        "holdout": build_corpus(config, "select"),
        "enc_med": build_med_encoder(config).to(config.io.device),
        "embedder": build_embedder(config.embedder).to(config.io.device),
        "device": config.io.device,
        "output_dir": config.io.output_dir,
    }


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--param", type=click.Choice(SWEEP_PARAMS), default="lambda_med", show_default=True)
@click.option("--values", default="1,5,10", show_default=True, help="Comma-separated weights.")
def sweep(config_path: str, param: str, values: str) -> None:
    """Train once per loss weight and tabulate the trade-off."""
    try:
        points = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"not a list of numbers: {values}", param_hint="--values") from exc
    config = _prepare(config_path)
    write_resolved(config, config.io.output_dir)
    rows = run_sweep(param, points, **_experiment_inputs(config))
    click.echo(render_rows(rows), nl=False)


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
def ablate(config_path: str) -> None:
    """Train the (medical feature, medical loss) on/off grid."""
    config = _prepare(config_path)
    write_resolved(config, config.io.output_dir)
    rows = run_ablation(**_experiment_inputs(config))
    click.echo(render_rows(rows), nl=False)


@cli.command(name="apply-review")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.argument("accept_list", type=click.Path(dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
def apply_review(manifest: str, accept_list: str, output: str) -> None:
    """Keep only the manifest records listed in ACCEPT_LIST."""
    kept, dropped = apply_accept_list(manifest, accept_list, output)
    click.echo(f"kept {kept} records, dropped {dropped}; written to {output}")


@cli.command()
def backends() -> None:
    """List medical encoders, identity embedders and evaluator plugins."""
    for backend_id in backend_registry.list():
        click.echo(f"med-encoder {backend_id}: {backend_registry.get(backend_id).description}")
    for kind in embedder_registry.list():
        click.echo(f"embedder {kind}: {embedder_registry.get(kind).description}")
    for (kind, name), plugin in plugin_registry.plugins.items():
        click.echo(f"{kind} {name}: {plugin.description}")


if __name__ == "__main__":
    cli()
