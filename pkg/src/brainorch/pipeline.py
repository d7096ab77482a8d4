"""End-to-end orchestration: validate, stage, run containers, fuse, bundle.

A run produces one bundle directory per subject and task:

    <output_dir>/<subject>/<task>/
        candidates/<algorithm-id>.nii.gz   exactly what each container wrote
        consensus.nii.gz                   fused mask (or the single mask)
        fusion.json                        method, weights, drops, iterations
        metrics.json                       per-candidate scores vs consensus
        native/consensus-native.nii.gz     optional inverse-warped mask
        manifest.json                      hashes of every file, job summary
        work/                              staged inputs and raw job output,
                                           only with keep_intermediate

Bundles are written to a staging directory and published with one atomic
rename, so a crashed run never leaves a partial bundle at the target path.
Partial algorithm failures degrade to warnings as long as at least one
candidate survives; zero survivors abort the run. The manifest's content
digest covers the file hash map only, never the timestamp, so identical
inputs with the mock engine produce identical digests.

The synthesis flow (INPAINT, MISSING_MRI) shares the skeleton but runs a
single algorithm and skips fusion and metrics.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AllJobsFailed,
    BrainorchError,
    EngineUnreachable,
    OutputCollision,
    ValidationFailed,
)
from .fusion import (
    METHOD_MAJORITY,
    CandidateSet,
    FusionResult,
    SimpleParams,
    fuse,
    identity_result,
)
from .geometry import (
    GridSpec,
    inverse_warp_image_to_native,
    inverse_warp_to_native,
    read_transform,
)
from .metrics import compute_metric_report
from .nifti import Volume, read_volume, write_mask, write_volume
from .registry import (
    LATEST_WINNER,
    MODALITIES,
    SEGMENTATION,
    SYNTHESIS,
    AlgorithmEntry,
    Catalog,
    TaskId,
    TaskSpec,
    builtin_catalog,
    get_task_spec,
    normalize_task_id,
)
from .runtime import JobResult, JobSpec
from .validation import (
    MISSING_TRANSFORM,
    SEVERITY_ERROR,
    Finding,
    SubjectInputs,
    ValidationReport,
    validate_subject,
)

logger = logging.getLogger("brainorch.pipeline")

MANIFEST_SCHEMA_VERSION = 1
CONSENSUS_NAME = "consensus.nii.gz"
SYNTHESIS_STEM = "synthesis"
_NIFTI_SUFFIXES = (".nii.gz", ".nii")


@dataclass
class PipelineConfig:
    """Knobs for one orchestrated run."""

    task: TaskId | str
    engine: object
    output_dir: Path
    algorithm_selectors: tuple[str, ...] = (LATEST_WINNER,)
    fusion_method: str = METHOD_MAJORITY
    fusion_params: SimpleParams | None = None
    parallel_jobs: int = 1
    native_space_output: bool = False
    keep_intermediate: bool = False
    force: bool = False
    catalog: Catalog | None = None

    def __post_init__(self):
        self.task = normalize_task_id(self.task)
        # engines mount job dirs and reject relative paths, so resolve now
        self.output_dir = Path(self.output_dir).resolve()
        self.algorithm_selectors = tuple(self.algorithm_selectors)
        if not self.algorithm_selectors:
            raise ValueError("algorithm_selectors must not be empty")
        if self.parallel_jobs < 1:
            raise ValueError(f"parallel_jobs must be >= 1, got {self.parallel_jobs}")


@dataclass(frozen=True)
class OutputBundle:
    """Published bundle locations plus the parsed manifest."""

    bundle_dir: Path
    consensus_path: Path
    per_algorithm_paths: dict[str, Path]
    fusion_metadata_path: Path | None
    metrics_path: Path | None
    native_space_paths: dict[str, Path]
    manifest_path: Path
    manifest: dict


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_digest(files: dict[str, str]) -> str:
    """Content digest over the bundle's file hash map (timestamp-free)."""
    return hashlib.sha256(canonical_json(files).encode()).hexdigest()


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_tree(root: Path) -> dict[str, str]:
    return {
        p.relative_to(root).as_posix(): _sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def _nifti_suffix(path: Path) -> str:
    name = path.name
    for suffix in _NIFTI_SUFFIXES:
        if name.endswith(suffix):
            return suffix
    raise ValueError(f"{path} is not a .nii or .nii.gz file")


def discover_subject_inputs(directory: str | Path, task: TaskId | str) -> SubjectInputs:
    """Build :class:`SubjectInputs` from a conventional subject directory.

    The directory name is the subject id; files are matched as
    ``<subject>-<tag>.nii[.gz]`` with lowercase tags (t1c, t1n, t2w, fla,
    mask), transform sidecars as ``<subject>_<from>2<to>.json``, and an
    optional native reference as ``<subject>-native.nii[.gz]``. Anything
    else rides along as an extra file for validation to flag.
    """
    # abspath, not resolve: "." gets a real name, symlinked dirs keep theirs
    directory = Path(os.path.abspath(directory))
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    get_task_spec(task)  # validate the task id early
    subject = directory.name
    files: dict[str, Path] = {}
    consumed: set[Path] = set()
    for tag in (*MODALITIES, "MASK"):
        for suffix in _NIFTI_SUFFIXES:
            candidate = directory / f"{subject}-{tag.lower()}{suffix}"
            if candidate.is_file():
                files[tag] = candidate
                consumed.add(candidate)
                break
    native_reference = None
    for suffix in _NIFTI_SUFFIXES:
        candidate = directory / f"{subject}-native{suffix}"
        if candidate.is_file():
            native_reference = candidate
            consumed.add(candidate)
            break
    sidecars = tuple(sorted(directory.glob(f"{subject}_*2*.json")))
    consumed |= set(sidecars)
    extras = tuple(
        p for p in sorted(directory.iterdir()) if p.is_file() and p not in consumed
    )
    return SubjectInputs(
        subject_id=subject,
        files=files,
        transform_sidecars=sidecars,
        native_reference=native_reference,
        extra_files=extras,
    )


def _resolve_entries(config: PipelineConfig, task: TaskSpec) -> list[AlgorithmEntry]:
    catalog = config.catalog or builtin_catalog()
    entries: list[AlgorithmEntry] = []
    seen: set[str] = set()
    for selector in config.algorithm_selectors:
        entry = catalog.resolve(task.task_id, selector)
        if entry.id in seen:
            logger.warning("selector %r resolves to %s again; skipping duplicate", selector, entry.id)
            continue
        seen.add(entry.id)
        entries.append(entry)
    return entries


def _find_forward_transform(inputs: SubjectInputs, task: TaskSpec):
    """The stored native->task-space registration, if any sidecar matches."""
    for path in inputs.transform_sidecars:
        try:
            transform = read_transform(path)
        except BrainorchError:
            continue
        if transform.source_space == "native" and transform.target_space == task.spatial_space:
            return transform
    return None


def _native_preflight(inputs: SubjectInputs, task: TaskSpec) -> list[Finding]:
    findings: list[Finding] = []
    if task.spatial_space == "native":
        return findings
    if _find_forward_transform(inputs, task) is None:
        findings.append(
            Finding(
                SEVERITY_ERROR,
                MISSING_TRANSFORM,
                f"native-space output needs a native->{task.spatial_space} transform sidecar",
            )
        )
    if inputs.native_reference is None:
        findings.append(
            Finding(
                SEVERITY_ERROR,
                MISSING_TRANSFORM,
                "native-space output needs a native reference volume for the target grid",
            )
        )
    return findings


def _validate(inputs: SubjectInputs, task: TaskSpec, config: PipelineConfig) -> ValidationReport:
    report = validate_subject(inputs, task)
    extra: list[Finding] = []
    if config.native_space_output:
        extra = _native_preflight(inputs, task)
    if extra:
        findings = report.findings + tuple(extra)
        verdict = "fail" if any(f.severity == SEVERITY_ERROR for f in findings) else report.verdict
        report = dataclasses.replace(report, findings=findings, verdict=verdict)
    if not report.passed:
        raise ValidationFailed(report)
    return report


def _stage_inputs(
    inputs: SubjectInputs, tags: list[str], stage_dir: Path
) -> dict[str, Path]:
    """Copy inputs under the container naming contract:
    ``<subject>-<tag>.nii[.gz]``, lowercase tags."""
    stage_dir.mkdir(parents=True, exist_ok=True)
    staged: dict[str, Path] = {}
    for tag in tags:
        source = inputs.files[tag]
        target = stage_dir / f"{inputs.subject_id}-{tag.lower()}{_nifti_suffix(source)}"
        shutil.copyfile(source, target)
        staged[tag] = target
    return staged


def _present_tags(inputs: SubjectInputs, task: TaskSpec) -> list[str]:
    if task.input_policy == "any-three-of-four":
        return [m for m in MODALITIES if m in inputs.files]
    return list(task.required_inputs)


def _run_jobs(
    entries: list[AlgorithmEntry],
    stage_dir: Path,
    jobs_root: Path,
    inputs: SubjectInputs,
    task: TaskSpec,
    config: PipelineConfig,
) -> list[tuple[AlgorithmEntry, "JobResult | Exception", Path]]:
    """Pull and run every entry with bounded parallelism.

    Engine exceptions are captured per job so one bad image cannot abort the
    survivors.
    """
    engine = config.engine

    def run_one(entry: AlgorithmEntry):
        out_dir = jobs_root / entry.id
        out_dir.mkdir(parents=True, exist_ok=True)
        try:
            engine.pull_image(entry.image_reference)
            spec = JobSpec(
                image_reference=entry.image_reference,
                input_dir=stage_dir,
                output_dir=out_dir,
                env={
                    "ORCH_SUBJECT": inputs.subject_id,
                    "ORCH_TASK": task.task_id.value,
                },
                requires_gpu=entry.requires_gpu,
                shm_bytes=entry.shm_bytes,
                timeout_seconds=entry.timeout_seconds,
                container_input_path=entry.input_mount_path,
                container_output_path=entry.output_mount_path,
            )
            return engine.run_job(spec)
        except Exception as exc:  # captured per job, reported in the manifest
            return exc

    with ThreadPoolExecutor(max_workers=config.parallel_jobs) as pool:
        outcomes = list(pool.map(run_one, entries))
    return [
        (entry, outcome, jobs_root / entry.id)
        for entry, outcome in zip(entries, outcomes)
    ]


def _pick_output_file(out_dir: Path, preferred_stems: tuple[str, ...]) -> Path | None:
    """The mask/volume a job produced: a preferred name, else the only NIfTI."""
    produced = [
        p
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and any(p.name.endswith(s) for s in _NIFTI_SUFFIXES)
    ]
    for stem in preferred_stems:
        for suffix in _NIFTI_SUFFIXES:
            for p in produced:
                if p.name == stem + suffix:
                    return p
    if len(produced) == 1:
        return produced[0]
    return None


def _check_candidate_grid(vol: Volume, grid: GridSpec) -> str | None:
    if vol.shape != tuple(grid.shape):
        return f"shape {vol.shape} does not match the input grid {tuple(grid.shape)}"
    if not np.allclose(vol.affine, grid.affine, atol=1e-3):
        return "affine does not match the input grid"
    return None


def _collect_candidates(
    outcomes,
    input_grid: GridSpec,
    task: TaskSpec,
    warnings: list[str],
):
    """Read and vet each job's mask; failures degrade to warnings."""
    allowed = set(task.label_codes) | {0}
    job_rows: list[dict] = []
    candidates: list[tuple[AlgorithmEntry, Volume, Path]] = []
    for entry, outcome, out_dir in outcomes:
        row = {"id": entry.id, "image_reference": entry.image_reference}
        if isinstance(outcome, Exception):
            row.update(status="engine_error", exit_code=None, duration_seconds=0.0, error=str(outcome))
            warnings.append(f"{entry.id}: {outcome}")
            job_rows.append(row)
            continue
        row.update(
            status=outcome.status,
            exit_code=outcome.exit_code,
            duration_seconds=outcome.duration_seconds,
            error=outcome.error,
        )
        if not outcome.ok:
            tail = outcome.log_excerpt.strip().splitlines()
            detail = f" ({tail[-1]})" if tail else ""
            warnings.append(f"{entry.id}: job {outcome.status}{detail}")
            job_rows.append(row)
            continue
        mask_path = _pick_output_file(out_dir, preferred_stems=("seg",))
        if mask_path is None:
            warnings.append(f"{entry.id}: job succeeded but produced no unambiguous mask")
            job_rows.append(row)
            continue
        try:
            vol = read_volume(mask_path)
        except BrainorchError as exc:
            warnings.append(f"{entry.id}: unreadable mask {mask_path.name}: {exc}")
            job_rows.append(row)
            continue
        problem = _check_candidate_grid(vol, input_grid)
        if problem is None and not np.issubdtype(vol.data.dtype, np.integer):
            problem = f"mask dtype {vol.data.dtype} is not integer"
        if problem is None:
            stray = {int(v) for v in np.unique(vol.data)} - allowed
            if stray:
                problem = f"mask holds label codes {sorted(stray)} outside the task's set"
        if problem is not None:
            warnings.append(f"{entry.id}: rejected candidate: {problem}")
            job_rows.append(row)
            continue
        row["candidate"] = True
        job_rows.append(row)
        candidates.append((entry, vol, mask_path))
    return job_rows, candidates


def _raise_for_no_candidates(outcomes, warnings: list[str]):
    exceptions = [o for _, o, _ in outcomes if isinstance(o, Exception)]
    if exceptions and len(exceptions) == len(outcomes) and all(
        isinstance(e, EngineUnreachable) for e in exceptions
    ):
        raise exceptions[0]
    raise AllJobsFailed(
        "no algorithm produced a usable candidate mask: " + "; ".join(warnings)
    )


def _atomic_publish(bundle_staging: Path, target: Path, force: bool) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    if target.exists():
        if any(target.iterdir()) and not force:
            raise OutputCollision(f"output bundle {target} already exists; use force to replace")
        shutil.rmtree(target)
    bundle_staging.replace(target)


def _check_collision(config: PipelineConfig, subject_id: str, task: TaskSpec) -> Path:
    target = config.output_dir / subject_id / task.task_id.value
    if target.exists() and any(target.iterdir()) and not config.force:
        raise OutputCollision(f"output bundle {target} already exists; use force to replace")
    return target


def _base_manifest(inputs: SubjectInputs, task: TaskSpec, config: PipelineConfig, staged):
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "tool": "brainorch",
        "tool_version": __version__,
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "subject": inputs.subject_id,
        "task": task.task_id.value,
        "inputs": {
            tag: {"file": staged[tag].name, "sha256": _sha256_file(staged[tag])}
            for tag in sorted(staged)
        },
        "parallel_jobs": config.parallel_jobs,
        "native_space_output": config.native_space_output,
    }


def _finish_bundle(
    bundle_staging: Path,
    target: Path,
    manifest: dict,
    config: PipelineConfig,
    warnings: list[str],
) -> tuple[Path, dict]:
    if not config.keep_intermediate:
        shutil.rmtree(bundle_staging / "work", ignore_errors=True)
    manifest["warnings"] = warnings
    files = _hash_tree(bundle_staging)
    manifest["files"] = files
    manifest["content_digest"] = manifest_digest(files)
    manifest_path = bundle_staging / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _atomic_publish(bundle_staging, target, config.force)
    return target / "manifest.json", manifest


def _warp_to_native(
    mask: Volume, inputs: SubjectInputs, task: TaskSpec, native_dir: Path, image: Volume | None = None
) -> dict[str, Path]:
    """Write native-space derivatives next to the atlas-space outputs."""
    forward = _find_forward_transform(inputs, task)
    native_vol = read_volume(inputs.native_reference)
    native_grid = GridSpec.from_volume(native_vol)
    native_dir.mkdir(parents=True, exist_ok=True)
    out: dict[str, Path] = {}
    if mask is not None:
        path = native_dir / "consensus-native.nii.gz"
        write_mask(inverse_warp_to_native(mask, forward, native_grid), path)
        out["consensus"] = path
    if image is not None:
        path = native_dir / f"{SYNTHESIS_STEM}-native.nii.gz"
        warped = inverse_warp_image_to_native(image, forward, native_grid)
        write_volume(warped, path, dtype=np.float32)
        out[SYNTHESIS_STEM] = path
    return out


def run_inference(inputs: SubjectInputs, config: PipelineConfig) -> OutputBundle:
    """Run a segmentation task end to end and publish the bundle."""
    task = get_task_spec(config.task)
    if task.kind != SEGMENTATION:
        raise ValueError(
            f"task {task.task_id.value!r} is a synthesis task; use run_synthesis"
        )
    entries = _resolve_entries(config, task)
    report = _validate(inputs, task, config)
    target = _check_collision(config, inputs.subject_id, task)

    config.output_dir.mkdir(parents=True, exist_ok=True)
    staging_root = config.output_dir / f".staging-{inputs.subject_id}-{task.task_id.value}-{uuid.uuid4().hex[:8]}"
    bundle = staging_root / "bundle"
    warnings = [f"{f.code}: {f.message}" for f in report.warnings]
    try:
        stage_dir = bundle / "work" / "input"
        staged = _stage_inputs(inputs, _present_tags(inputs, task), stage_dir)
        first_staged = staged[sorted(staged)[0]]
        input_grid = GridSpec.from_volume(read_volume(first_staged))

        logger.info(
            "running %d algorithm(s) for %s/%s", len(entries), inputs.subject_id, task.task_id.value
        )
        outcomes = _run_jobs(entries, stage_dir, bundle / "work" / "jobs", inputs, task, config)
        job_rows, collected = _collect_candidates(outcomes, input_grid, task, warnings)
        if not collected:
            _raise_for_no_candidates(outcomes, warnings)

        candidates_dir = bundle / "candidates"
        candidates_dir.mkdir(parents=True, exist_ok=True)
        per_algorithm: dict[str, str] = {}
        volumes: list[Volume] = []
        ids: list[str] = []
        for entry, vol, mask_path in collected:
            dest = candidates_dir / f"{entry.id}{_nifti_suffix(mask_path)}"
            shutil.copyfile(mask_path, dest)
            per_algorithm[entry.id] = dest.relative_to(bundle).as_posix()
            volumes.append(vol)
            ids.append(entry.id)

        candidate_set = CandidateSet(masks=tuple(volumes), source_ids=tuple(ids), labels=task.labels)
        if len(volumes) == 1:
            result: FusionResult = identity_result(candidate_set)
        else:
            result = fuse(candidate_set, config.fusion_method, config.fusion_params)
        write_mask(result.consensus, bundle / CONSENSUS_NAME)

        fusion_doc = result.to_json_dict()
        fusion_doc["labels"] = [{"code": lb.code, "name": lb.name} for lb in task.labels]
        fusion_doc["candidates"] = ids
        (bundle / "fusion.json").write_text(json.dumps(fusion_doc, indent=2, sort_keys=True) + "\n")

        metrics_rel = None
        if len(volumes) > 1:
            scores = {
                algo_id: compute_metric_report(
                    result.consensus.data, vol.data, task.labels, result.consensus.spacing
                ).to_json_dict()
                for algo_id, vol in zip(ids, volumes)
            }
            (bundle / "metrics.json").write_text(
                json.dumps({"reference": "consensus", "per_candidate": scores}, indent=2, sort_keys=True)
                + "\n"
            )
            metrics_rel = "metrics.json"

        native_rel: dict[str, str] = {}
        if config.native_space_output and task.spatial_space != "native":
            native_paths = _warp_to_native(result.consensus, inputs, task, bundle / "native")
            native_rel = {k: p.relative_to(bundle).as_posix() for k, p in native_paths.items()}

        manifest = _base_manifest(inputs, task, config, staged)
        manifest["algorithms"] = job_rows
        manifest["fusion"] = {
            "method": result.method,
            "iterations_run": result.iterations_run,
            "params": result.params,
        }
        manifest["validation"] = report.to_json_dict()
        manifest_path, manifest = _finish_bundle(bundle, target, manifest, config, warnings)
    finally:
        shutil.rmtree(staging_root, ignore_errors=True)

    return OutputBundle(
        bundle_dir=target,
        consensus_path=target / CONSENSUS_NAME,
        per_algorithm_paths={k: target / v for k, v in per_algorithm.items()},
        fusion_metadata_path=target / "fusion.json",
        metrics_path=(target / metrics_rel) if metrics_rel else None,
        native_space_paths={k: target / v for k, v in native_rel.items()},
        manifest_path=manifest_path,
        manifest=manifest,
    )


def _missing_modality(inputs: SubjectInputs) -> str:
    present = {m for m in MODALITIES if m in inputs.files}
    missing = [m for m in MODALITIES if m not in present]
    # Validation guarantees exactly one by this point.
    return missing[0]


def run_synthesis(inputs: SubjectInputs, config: PipelineConfig) -> OutputBundle:
    """Run a synthesis task (INPAINT or MISSING_MRI) with one algorithm."""
    task = get_task_spec(config.task)
    if task.kind != SYNTHESIS:
        raise ValueError(
            f"task {task.task_id.value!r} is a segmentation task; use run_inference"
        )
    entries = _resolve_entries(config, task)
    if len(entries) != 1:
        raise ValueError(
            f"synthesis runs exactly one algorithm, got {len(entries)} selectors"
        )
    entry = entries[0]
    report = _validate(inputs, task, config)
    target = _check_collision(config, inputs.subject_id, task)

    synthesized = (
        "T1n" if task.task_id == TaskId.INPAINT else _missing_modality(inputs)
    )

    config.output_dir.mkdir(parents=True, exist_ok=True)
    staging_root = config.output_dir / f".staging-{inputs.subject_id}-{task.task_id.value}-{uuid.uuid4().hex[:8]}"
    bundle = staging_root / "bundle"
    warnings = [f"{f.code}: {f.message}" for f in report.warnings]
    try:
        stage_dir = bundle / "work" / "input"
        staged = _stage_inputs(inputs, _present_tags(inputs, task), stage_dir)
        first_staged = staged[sorted(staged)[0]]
        input_grid = GridSpec.from_volume(read_volume(first_staged))

        outcomes = _run_jobs([entry], stage_dir, bundle / "work" / "jobs", inputs, task, config)
        _, outcome, out_dir = outcomes[0]
        job_rows: list[dict] = []
        if isinstance(outcome, Exception):
            if isinstance(outcome, EngineUnreachable):
                raise outcome
            raise AllJobsFailed(f"{entry.id}: {outcome}")
        job_rows.append(
            {
                "id": entry.id,
                "image_reference": entry.image_reference,
                "status": outcome.status,
                "exit_code": outcome.exit_code,
                "duration_seconds": outcome.duration_seconds,
                "error": outcome.error,
            }
        )
        if not outcome.ok:
            raise AllJobsFailed(f"{entry.id}: job {outcome.status}: {outcome.error}")
        produced = _pick_output_file(out_dir, preferred_stems=(SYNTHESIS_STEM,))
        if produced is None:
            raise AllJobsFailed(f"{entry.id}: job succeeded but produced no unambiguous volume")
        vol = read_volume(produced)
        problem = _check_candidate_grid(vol, input_grid)
        if problem is not None:
            raise AllJobsFailed(f"{entry.id}: rejected synthesis output: {problem}")

        out_name = f"{SYNTHESIS_STEM}{_nifti_suffix(produced)}"
        shutil.copyfile(produced, bundle / out_name)
        job_rows[0]["candidate"] = True

        native_rel: dict[str, str] = {}
        if config.native_space_output and task.spatial_space != "native":
            native_paths = _warp_to_native(None, inputs, task, bundle / "native", image=vol)
            native_rel = {k: p.relative_to(bundle).as_posix() for k, p in native_paths.items()}

        manifest = _base_manifest(inputs, task, config, staged)
        manifest["algorithms"] = job_rows
        manifest["synthesized_modality"] = synthesized
        manifest["synthesis_output"] = out_name
        manifest["validation"] = report.to_json_dict()
        manifest_path, manifest = _finish_bundle(bundle, target, manifest, config, warnings)
    finally:
        shutil.rmtree(staging_root, ignore_errors=True)

    return OutputBundle(
        bundle_dir=target,
        consensus_path=target / out_name,
        per_algorithm_paths={entry.id: target / out_name},
        fusion_metadata_path=None,
        metrics_path=None,
        native_space_paths={k: target / v for k, v in native_rel.items()},
        manifest_path=manifest_path,
        manifest=manifest,
    )
