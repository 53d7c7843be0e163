"""Forge pipeline: plan -> generate -> leakage filter -> manifest.

Requests run concurrently up to ``parallelism``; results reach the manifest
through a single appender in plan order, so a deterministic client gives a
byte-identical manifest. A candidate too close to a real identity under
any configured recognizer is regenerated until the retry budget is spent;
client failures end up in ``forge_failures.jsonl`` instead of silently
shrinking the corpus.
"""
from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from ..errors import DataError, EmptyGalleryError, GeneratorError
from ..evaluation import distribution_gaps, format_table
from ..metrics import calibrate_threshold, impostor_distances, pairwise_distances
from ..tensors import image_to_pil, load_image, pil_to_tensor, save_image
from .generators.base import GeneratorClient
from .planner import GenerationRequest, PlanResult, distribution_guided_plan, random_plan
from .records import ManifestWriter, ReferenceFace, SampleRecord, TargetDistributions, read_manifest
from .references import IMAGE_SUFFIXES

logger = logging.getLogger(__name__)

Embedder = Callable[[torch.Tensor], torch.Tensor]

MANIFEST_NAME = "manifest.jsonl"
FAILURE_LOG = "forge_failures.jsonl"
REPORT_NAME = "forge_report.json"
REPORT_SCHEMA_VERSION = 1


@dataclass
class LeakageDecision:
    keep: bool
    min_distance: float


@torch.no_grad()
def embed_images(images: torch.Tensor, phi: Embedder, batch_size: int = 32) -> torch.Tensor:
    if images.shape[0] == 0:
        return images.new_zeros((0, 0))
    return torch.cat([phi(images[i : i + batch_size]) for i in range(0, images.shape[0], batch_size)])


@torch.no_grad()
def leakage_filter(
    candidate: torch.Tensor, gallery: torch.Tensor, phi: Embedder, threshold: float
) -> LeakageDecision:
    """Reject iff the candidate's nearest gallery embedding is closer than ``threshold``."""
    if gallery.dim() != 2 or gallery.shape[0] == 0:
        raise EmptyGalleryError("leakage filtering needs a nonempty gallery of embeddings")
    embedding = phi(candidate if candidate.dim() == 4 else candidate.unsqueeze(0))
    distance = float(pairwise_distances(embedding, gallery).min())
    return LeakageDecision(keep=not distance < threshold, min_distance=distance)


def calibrate_leakage_threshold(
    embeddings: torch.Tensor, identities: Sequence[int], false_reject_rate: float = 0.01
) -> float:
    """Threshold at which ``false_reject_rate`` of distinct-identity pairs would be rejected."""
    return calibrate_threshold(impostor_distances(embeddings, identities), false_reject_rate)



@dataclass
class LeakageGuard:
    """One recognizer's embeddings of the real-patient gallery and its threshold."""

    name: str
    phi: Embedder
    gallery: torch.Tensor
    threshold: float


@dataclass
class ScreeningDecision:
    keep: bool
    decisions: Dict[str, LeakageDecision]

    @property
    def rejected_by(self) -> List[str]:
        return [name for name, decision in self.decisions.items() if not decision.keep]


def screen_candidate(candidate: torch.Tensor, guards: Sequence[LeakageGuard]) -> ScreeningDecision:
    """Keep a candidate only if no recognizer places it near a gallery identity."""
    if not guards:
        raise EmptyGalleryError("leakage filtering needs at least one recognizer")
    decisions = {guard.name: leakage_filter(candidate, guard.gallery, guard.phi, guard.threshold) for guard in guards}
    return ScreeningDecision(all(decision.keep for decision in decisions.values()), decisions)


def build_guards(
    images: torch.Tensor,
    identities: Sequence[int],
    embedders: Mapping[str, Embedder],
    thresholds: Optional[Mapping[str, float]] = None,
    false_reject_rate: float = 0.01,
) -> List[LeakageGuard]:
    """Embed the gallery once per recognizer; uncalibrated ones get a threshold
    at ``false_reject_rate`` on their own distinct-identity pairs."""
    thresholds = thresholds or {}
    guards = []
    for name, phi in embedders.items():
        embeddings = embed_images(images, phi)
        threshold = thresholds.get(name)
        if threshold is None:
            threshold = calibrate_leakage_threshold(embeddings, identities, false_reject_rate)
            logger.info("%s: leakage threshold %.4f at %.1f%% false rejects", name, threshold, 100 * false_reject_rate)
        guards.append(LeakageGuard(name, phi, embeddings, float(threshold)))
    return guards


def load_gallery(directory: str | Path, image_size: int) -> tuple[torch.Tensor, List[int]]:
    """Real-patient gallery from a directory.

    Images directly in ``directory`` are one identity each; images in a
    subdirectory share that subdirectory's identity.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"gallery directory not found: {directory}")
    images, identities = [], []
    groups = [directory] + sorted(p for p in directory.iterdir() if p.is_dir())
    next_id = 0
    for group in groups:
        files = sorted(p for p in group.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        for path in files:
            images.append(load_image(path, size=image_size))
            identities.append(next_id)
            if group == directory:
                next_id += 1
        if group != directory and files:
            next_id += 1
    if not images:
        raise EmptyGalleryError(f"no gallery images in {directory}")
    return torch.stack(images), identities


@dataclass
class ForgeResult:
    """Outcome of one generation request."""

    sample_id: str
    success: bool
    record: Optional[SampleRecord] = None
    error: Optional[str] = None
    attempts: int = 0
    rejections: int = 0
    rejected_by: Dict[str, int] = field(default_factory=dict)


@dataclass
class ForgeReport:
    planner: str
    thresholds: Dict[str, float]
    requested: int
    skipped: int = 0
    emitted: int = 0
    candidates: int = 0
    rejected: int = 0
    exhausted: int = 0
    failures: int = 0
    shortfalls: Dict[str, int] = field(default_factory=dict)
    gaps: Optional[Dict[str, float]] = None
    manifest: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION

    rejected_by: Dict[str, int] = field(default_factory=dict)

    @property
    def rejection_rate(self) -> float:
        """Fraction of candidates rejected by at least one recognizer."""
        return self.rejected / self.candidates if self.candidates else 0.0

    def leakage_by_embedder(self) -> Dict[str, float]:
        """Percentage of candidates each recognizer rejected on its own."""
        return {
            name: 100.0 * self.rejected_by.get(name, 0) / self.candidates if self.candidates else 0.0
            for name in self.thresholds
        }

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        per_embedder = self.leakage_by_embedder()
        data["leakage_rejection_pct"] = 100.0 * self.rejection_rate
        data["leakage_pct_by_embedder"] = per_embedder
        data["leakage_mean_pct"] = float(np.mean(list(per_embedder.values()))) if per_embedder else 0.0
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _reference_image(reference: Optional[ReferenceFace]) -> Optional[Image.Image]:
    if reference is None:
        return None
    try:
        with Image.open(reference.path) as image:
            return image.convert("RGB")
    except OSError as exc:
        logger.warning("reference %s unreadable, generating without injection: %s", reference.face_id, exc)
        return None


def _record(request: GenerationRequest, file_path: str, distance: float) -> SampleRecord:
    return SampleRecord(
        sample_id=request.sample_id,
        disease=request.disease,
        severity=request.severity,
        age=request.age,
        gender=request.gender,
        injection_weight=request.injection_weight,
        reference_id=request.reference.face_id if request.reference else None,
        prompt=request.prompt,
        split=request.split,
        file_path=file_path,
        leakage_distance=distance,
    )


async def forge(
    plan: PlanResult,
    client: GeneratorClient,
    guards: Sequence[LeakageGuard],
    *,
    output_dir: str | Path,
    image_size: int = 64,
    parallelism: int = 4,
    retry_budget: int = 3,
    targets: Optional[TargetDistributions] = None,
    planner: str = "guided",
) -> ForgeReport:
    """Generate, filter and append every request of ``plan``.

    A candidate is kept only if every guard keeps it. Requests already
    present in an existing manifest are skipped, so an interrupted run can
    be continued into the same directory.
    """
    if not guards:
        raise EmptyGalleryError("leakage filtering needs at least one recognizer")
    for guard in guards:
        if guard.gallery.dim() != 2 or guard.gallery.shape[0] == 0:
            raise EmptyGalleryError(f"{guard.name}: leakage filtering needs a nonempty gallery of embeddings")
    output_dir = Path(output_dir)
    images_dir = output_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = output_dir / MANIFEST_NAME
    done = set()
    if manifest_path.exists() and manifest_path.stat().st_size > 0:
        done = {record.sample_id for record in read_manifest(manifest_path)}
    writer = ManifestWriter(manifest_path)
    pending = [request for request in plan.requests if request.sample_id not in done]
    report = ForgeReport(
        planner=planner,
        thresholds={guard.name: guard.threshold for guard in guards},
        requested=len(plan.requests),
        skipped=len(plan.requests) - len(pending),
        shortfalls=plan.shortfall_summary(),
        manifest=str(manifest_path),
    )
    semaphore = asyncio.Semaphore(parallelism)

    async def attempt(request: GenerationRequest, result: ForgeResult) -> ForgeResult:
        reference = _reference_image(request.reference)
        for attempt_no in range(retry_budget + 1):
            result.attempts = attempt_no + 1
            try:
                image = await client.generate(request, reference, attempt_no)
            except GeneratorError as exc:
                result.error = str(exc)
                return result
            candidate = pil_to_tensor(image, image_size)
            screening = screen_candidate(candidate, guards)
            if screening.keep:
                relative = f"images/{request.sample_id}.png"
                save_image(candidate, output_dir / relative)
                result.success = True
                result.record = _record(request, relative, screening.decisions[guards[0].name].min_distance)
                return result
            result.rejections += 1
            for name in screening.rejected_by:
                result.rejected_by[name] = result.rejected_by.get(name, 0) + 1
            logger.debug("%s: rejected by %s", request.sample_id, ", ".join(screening.rejected_by))
        result.error = "identity leakage after retry budget"
        return result

    async def run(request: GenerationRequest) -> ForgeResult:
        result = ForgeResult(request.sample_id, False)
        async with semaphore:
            try:
                return await attempt(request, result)
            except Exception as exc:
                # one broken request must not cancel the rest of the batch
                logger.warning("%s: generation failed: %s", request.sample_id, exc, exc_info=True)
                result.success, result.record = False, None
                result.error = f"{type(exc).__name__}: {exc}"
                return result

    tasks = [asyncio.ensure_future(run(request)) for request in pending]
    failure_log = output_dir / FAILURE_LOG
    next_index = 0
    for finished in asyncio.as_completed(tasks):
        await finished
        # flush the completed prefix in plan order
        while next_index < len(tasks) and tasks[next_index].done():
            result = tasks[next_index].result()
            next_index += 1
            report.rejected += result.rejections
            for name, count in result.rejected_by.items():
                report.rejected_by[name] = report.rejected_by.get(name, 0) + count
            report.candidates += result.rejections + int(result.success)
            if result.success and result.record is not None:
                writer.append(result.record)
                report.emitted += 1
                continue
            if result.rejections > retry_budget:
                report.exhausted += 1
            else:
                report.failures += 1
            entry = {k: getattr(result, k) for k in ("sample_id", "error", "attempts", "rejections")}
            with failure_log.open("a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    if report.failures:
        logger.warning("%d requests failed; see %s", report.failures, failure_log)
    if targets is not None:
        records = read_manifest(manifest_path)
        if records:
            report.gaps = distribution_gaps(records, targets)
    logger.info(
        "forge: %d emitted, %d/%d candidates rejected (%.2f%%)",
        report.emitted,
        report.rejected,
        report.candidates,
        100.0 * report.rejection_rate,
    )
    return report


def run_forge(plan: PlanResult, client: GeneratorClient, *args: Any, **kwargs: Any) -> ForgeReport:
    async def main() -> ForgeReport:
        try:
            return await forge(plan, client, *args, **kwargs)
        finally:
            await client.close()

    return asyncio.run(main())


def compare_planners(
    targets: TargetDistributions,
    n: int,
    *,
    seed: int = 0,
    references: Optional[Sequence[ReferenceFace]] = None,
    max_age_gap: float = 10.0,
) -> Dict[str, Dict[str, float]]:
    """Attribute gaps of the guided and random planners for the same seed."""
    plans = {
        "random": random_plan(n, seed=seed, references=references, max_age_gap=max_age_gap),
        "guided": distribution_guided_plan(targets, n, seed=seed, references=references, max_age_gap=max_age_gap),
    }
    return {name: distribution_gaps(plan.requests, targets) for name, plan in plans.items()}


def render_planner_table(gaps: Dict[str, Dict[str, float]]) -> str:
    rows = [
        [name.capitalize() + " sampling", *(f"{values[kind]:.3f}" for kind in ("disease", "age", "gender"))]
        for name, values in gaps.items()
    ]
    return format_table(["Planner", "Disease", "Age", "Gender"], rows)


def gallery_images_as_pil(images: torch.Tensor) -> List[Image.Image]:
    return [image_to_pil(image) for image in images]


def ages_from_file(path: str | Path) -> List[float]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"ages file not found: {path}")
    text = path.read_text(encoding="utf-8").replace(",", " ")
    return [float(v) for v in np.asarray(text.split(), dtype=np.float64)]
