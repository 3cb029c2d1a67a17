"""Resumable, parallel pipeline runs over append-only JSONL stage files.

A run walks ingest -> question generation -> answering -> reasoning ->
filtering -> assembly.  Progress is journaled in an append-only checkpoint
whose first line identifies the run and pins a configuration fingerprint;
every later line records one completed unit of work.  Image work executes in
a bounded thread pool, but results are flushed strictly in image order by a
single writer, so output files are byte-identical regardless of worker count
and every crash leaves a clean prefix plus at most one torn trailing line,
which recovery drops.

Crash windows and their recovery:

* torn data line, no checkpoint lines  -> truncate the torn line, redo work
  (keys were never marked complete, so re-calling the backend is allowed);
* data flushed, checkpoint lines partial -> completed keys are served from
  the already-flushed rows, only unfinished keys call the backend, and
  re-flushed duplicate rows are skipped by key;
* everything flushed -> resume finds the image marker and skips the image
  without touching the backend.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .assemble import MANIFEST_NAME, assemble_run, compute_stats
from .backend import (
    MockBackend,
    RateLimitPolicy,
    RemoteBackend,
    mock_load_script,
)
from .clock import SystemClock, VirtualClock
from .config import PipelineConfig, config_fingerprint
from .data_model import (
    KIND_WITH_REASONING,
    AnswerSet,
    AnswerVariant,
    DatasetStats,
    ImageRecord,
    Question,
    VqaSample,
    jsonl_line,
    sample_id_for,
)
from .filtering import ConsistencyPolicy, filter_sample
from .generate import answer_all, final_answer, reason, self_question
from .ingest import ScriptedOcr, ingest
from .prompts import load_exemplars, load_registry

logger = logging.getLogger(__name__)

__all__ = [
    "OrchestratorError",
    "CheckpointError",
    "InjectedCrash",
    "RunPaths",
    "RunResult",
    "CHECKPOINT_FORMAT",
    "FIXED_TIMESTAMP",
    "build_backend",
    "run_pipeline",
    "resume_pipeline",
    "default_run_id",
]


class OrchestratorError(RuntimeError):
    """Fatal run-level failure."""


class CheckpointError(OrchestratorError):
    """Unusable checkpoint journal; the message carries a recovery hint."""


class InjectedCrash(RuntimeError):
    """Raised by the test-only crash hook after N journal writes."""


CHECKPOINT_FORMAT = 1
CHECKPOINT_NAME = "checkpoint.json"
REPORT_NAME = "report.json"
FIXED_TIMESTAMP = "2000-01-01T00:00:00Z"

# Stage files written through the sequenced journal, in flush order.
_DATA_FILES = (
    "questions.jsonl",
    "answers.jsonl",
    "reasoning.jsonl",
    "kept.jsonl",
    "discarded.jsonl",
    "skips.jsonl",
)

# Checkpoint stages.  "ingest" and "assemble" are run-wide; "image_done"
# marks one image's batch fully flushed; the rest are per-key completions.
_STAGE_INGEST = "ingest"
_STAGE_SELF_QUESTION = "self_question"
_STAGE_ANSWER = "answer"
_STAGE_REASONING = "reasoning"
_STAGE_FILTER = "filter"
_STAGE_IMAGE_DONE = "image_done"
_STAGE_ASSEMBLE = "assemble"

_KNOWN_STAGES = {
    _STAGE_INGEST,
    _STAGE_SELF_QUESTION,
    _STAGE_ANSWER,
    _STAGE_REASONING,
    _STAGE_FILTER,
    _STAGE_IMAGE_DONE,
    _STAGE_ASSEMBLE,
}

_RECOVERY_HINT = (
    "delete the run directory to start over, or restore checkpoint.json "
    "from a backup"
)


@dataclass(frozen=True)
class RunPaths:
    """All files belonging to one run directory."""

    run_dir: Path

    @property
    def checkpoint(self) -> Path:
        return self.run_dir / CHECKPOINT_NAME

    @property
    def report(self) -> Path:
        return self.run_dir / REPORT_NAME

    @property
    def manifest(self) -> Path:
        return self.run_dir / MANIFEST_NAME

    def stage(self, name: str) -> Path:
        return self.run_dir / name


def default_run_id(fingerprint: str) -> str:
    return f"run-{fingerprint[:12]}"


def _key_to_row(key: tuple) -> dict[str, str]:
    row = {"stage": key[0]}
    if len(key) > 1:
        row["image_id"] = key[1]
    if len(key) > 2:
        row["question_id"] = key[2]
    return row


def _row_to_key(row: Mapping[str, Any]) -> tuple:
    stage = row.get("stage")
    if stage not in _KNOWN_STAGES:
        raise CheckpointError(
            f"checkpoint contains unknown stage {stage!r}; {_RECOVERY_HINT}"
        )
    key: tuple = (stage,)
    if "image_id" in row:
        key += (row["image_id"],)
    if "question_id" in row:
        key += (row["question_id"],)
    return key


def _scan_jsonl(path: Path, *, what: str) -> tuple[list[dict[str, Any]], int]:
    """Parse a journal file, truncating a torn trailing line in place.

    Returns the parsed rows and the byte length of the clean prefix.  A
    newline-terminated line that fails to parse is corruption and fatal.
    """
    if not path.exists():
        return [], 0
    data = path.read_bytes()
    if not data:
        return [], 0
    keep = len(data)
    if not data.endswith(b"\n"):
        cut = data.rfind(b"\n") + 1
        torn = data[cut:]
        logger.warning(
            "%s: dropping torn trailing line (%d bytes) in %s", what, len(torn), path
        )
        keep = cut
        with open(path, "r+b") as handle:
            handle.truncate(keep)
        data = data[:keep]
    rows = []
    for lineno, line in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CheckpointError(
                f"{what} file {path} is corrupted at line {lineno} ({exc}); "
                f"{_RECOVERY_HINT}"
            ) from None
    return rows, keep


def _load_checkpoint(path: Path) -> tuple[dict[str, Any] | None, list[tuple]]:
    """Read the journal: (header, completion keys).  Missing file -> fresh."""
    rows, _ = _scan_jsonl(path, what="checkpoint")
    if not rows:
        return None, []
    header = rows[0]
    if (
        not isinstance(header, dict)
        or header.get("format") != CHECKPOINT_FORMAT
        or "run_id" not in header
        or "config_fingerprint" not in header
    ):
        raise CheckpointError(
            f"checkpoint file {path} has an unrecognized header; {_RECOVERY_HINT}"
        )
    return header, [_row_to_key(row) for row in rows[1:]]


class _Journal:
    """Append-only writer for stage files and the checkpoint.

    Tracks present row keys so resumed flushes never duplicate a line, and
    hosts the test-only crash hook: after ``crash_after_writes`` appended
    lines the next append flushes and raises :class:`InjectedCrash`.
    """

    def __init__(self, paths: RunPaths, crash_after_writes: int | None = None) -> None:
        self._paths = paths
        self._handles: dict[str, Any] = {}
        self._crash_after = crash_after_writes
        self.writes = 0
        self.present: dict[str, set[tuple]] = {name: set() for name in _DATA_FILES}
        self.checkpoint_present: set[tuple] = set()

    def _handle(self, name: str):
        handle = self._handles.get(name)
        if handle is None:
            handle = open(self._paths.stage(name), "a", encoding="utf-8", newline="")
            self._handles[name] = handle
        return handle

    def reset_file(self, name: str) -> None:
        """Truncate a stage file for a from-scratch rewrite (ingest redo)."""
        if name in self._handles:
            self._handles.pop(name).close()
        open(self._paths.stage(name), "w", encoding="utf-8").close()

    def ensure_files(self) -> None:
        """Create every stage file so empty stages still leave a file."""
        for name in _DATA_FILES:
            self._handle(name)

    def _count_write(self) -> None:
        self.writes += 1
        if self._crash_after is not None and self.writes >= self._crash_after:
            self.flush()
            raise InjectedCrash(f"injected crash after {self.writes} journal writes")

    def append_row(self, name: str, key: tuple, row: Mapping[str, Any]) -> None:
        if key in self.present[name]:
            return
        self._handle(name).write(jsonl_line(row))
        self.present[name].add(key)
        self._count_write()

    def append_raw(self, name: str, row: Mapping[str, Any]) -> None:
        self._handle(name).write(jsonl_line(row))
        self._count_write()

    def append_checkpoint(self, key: tuple) -> None:
        if key in self.checkpoint_present:
            return
        self._handle(CHECKPOINT_NAME).write(jsonl_line(_key_to_row(key)))
        self.checkpoint_present.add(key)
        self._count_write()

    def write_header(self, header: Mapping[str, Any]) -> None:
        self._handle(CHECKPOINT_NAME).write(jsonl_line(header))
        self._count_write()

    def flush(self) -> None:
        for handle in self._handles.values():
            handle.flush()

    def close(self) -> None:
        for handle in self._handles.values():
            handle.close()
        self._handles.clear()


# Row keys used for duplicate suppression, per data file.
def _question_row_key(row: Mapping[str, Any]) -> tuple:
    return (row["image_id"], row["question_id"])


def _sample_row_key(row: Mapping[str, Any]) -> tuple:
    return (row["image_id"], row["question"]["question_id"])


_ROW_KEYS = {
    "questions.jsonl": _question_row_key,
    "answers.jsonl": _question_row_key,
    "reasoning.jsonl": _question_row_key,
    "kept.jsonl": _sample_row_key,
    "discarded.jsonl": _sample_row_key,
    "skips.jsonl": _question_row_key,
}


@dataclass
class _ImageCache:
    """Rows already flushed for one partially completed image."""

    questions: list[dict[str, Any]] = field(default_factory=list)
    answer_sets: dict[str, AnswerSet] = field(default_factory=dict)
    reasoning: dict[str, dict[str, Any]] = field(default_factory=dict)
    skip_qids: set[str] = field(default_factory=set)


@dataclass
class _ImageBatch:
    """Everything one image's worker produced, flushed as a unit."""

    ordinal: int
    image_id: str
    rows: dict[str, list[dict[str, Any]]] = field(
        default_factory=lambda: {name: [] for name in _DATA_FILES}
    )
    checkpoint: list[tuple] = field(default_factory=list)
    executed: list[tuple] = field(default_factory=list)
    no_questions: bool = False


class _RunContext:
    """Shared read-only state for image workers."""

    def __init__(
        self,
        *,
        backend,
        registry,
        exemplars,
        policy: ConsistencyPolicy,
        config: PipelineConfig,
        completed: frozenset[tuple],
        caches: Mapping[str, _ImageCache],
        timestamp: Any,
    ) -> None:
        self.backend = backend
        self.registry = registry
        self.exemplars = exemplars
        self.policy = policy
        self.config = config
        self.completed = completed
        self.caches = caches
        self.timestamp = timestamp


def _missing_cache(stage: str, image_id: str) -> CheckpointError:
    return CheckpointError(
        f"checkpoint marks {stage} complete for image {image_id} but the "
        f"stage file rows are missing; {_RECOVERY_HINT}"
    )


def _process_image(ctx: _RunContext, ordinal: int, image: ImageRecord) -> _ImageBatch:
    batch = _ImageBatch(ordinal=ordinal, image_id=image.image_id)
    if (_STAGE_IMAGE_DONE, image.image_id) in ctx.completed:
        return batch
    cache = ctx.caches.get(image.image_id, _ImageCache())
    gen = ctx.config.generate

    sq_key = (_STAGE_SELF_QUESTION, image.image_id)
    if sq_key in ctx.completed:
        questions = [Question.from_json_dict(row) for row in cache.questions]
    else:
        questions = self_question(
            image,
            gen.questions_per_image,
            ctx.backend,
            ctx.registry,
            temperature=gen.temperature_question,
        )
        batch.executed.append(sq_key)
        batch.rows["questions.jsonl"] = [q.to_json_dict() for q in questions]
        if not questions:
            batch.no_questions = True
    batch.checkpoint.append(sq_key)

    for question in questions:
        qid = question.question_id
        answer_key = (_STAGE_ANSWER, image.image_id, qid)
        skipped = False
        answer_set: AnswerSet | None = None
        if answer_key in ctx.completed:
            if qid in cache.skip_qids:
                skipped = True
            else:
                answer_set = cache.answer_sets.get(qid)
                if answer_set is None:
                    raise _missing_cache(_STAGE_ANSWER, image.image_id)
        else:
            outcome = answer_all(
                image,
                question,
                ctx.backend,
                ctx.registry,
                exemplars=ctx.exemplars,
                temperature=gen.temperature_answer,
            )
            batch.executed.append(answer_key)
            if outcome.complete:
                answer_set = outcome.answer_set
                batch.rows["answers.jsonl"].append(
                    {"image_id": image.image_id, **answer_set.to_json_dict()}
                )
            else:
                skipped = True
                batch.rows["skips.jsonl"].append(
                    {
                        "image_id": image.image_id,
                        "question_id": qid,
                        "stage": _STAGE_ANSWER,
                        "cause": outcome.cause,
                    }
                )
        batch.checkpoint.append(answer_key)
        if skipped:
            continue

        reasoning_key = (_STAGE_REASONING, image.image_id, qid)
        if reasoning_key in ctx.completed:
            row = cache.reasoning.get(qid)
            if row is None:
                raise _missing_cache(_STAGE_REASONING, image.image_id)
            reasoning_text = row["reasoning"]
            variant_row = row.get("with_reasoning_variant")
            if variant_row is not None:
                answer_set = AnswerSet(
                    question_id=answer_set.question_id,
                    variants=answer_set.variants
                    + (AnswerVariant.from_json_dict(variant_row),),
                )
        else:
            if final_answer(answer_set):
                reasoning_text, answer_set = reason(
                    image,
                    question,
                    answer_set,
                    ctx.backend,
                    ctx.registry,
                    temperature=gen.temperature_answer,
                )
            else:
                reasoning_text = ""
            batch.executed.append(reasoning_key)
            extended = answer_set.by_kind(KIND_WITH_REASONING)
            batch.rows["reasoning.jsonl"].append(
                {
                    "image_id": image.image_id,
                    "question_id": qid,
                    "reasoning": reasoning_text,
                    "with_reasoning_variant": (
                        extended[0].to_json_dict() if extended else None
                    ),
                }
            )
        batch.checkpoint.append(reasoning_key)

        filter_key = (_STAGE_FILTER, image.image_id, qid)
        if filter_key not in ctx.completed:
            verdict, decision = filter_sample(
                image, question, answer_set, ctx.policy, ctx.backend, ctx.registry
            )
            batch.executed.append(filter_key)
            sample = VqaSample(
                sample_id=sample_id_for(image.image_id, qid, ctx.backend.model_tag),
                image_id=image.image_id,
                question=question,
                final_answer=final_answer(answer_set),
                reasoning=reasoning_text,
                answer_set=answer_set,
                eval=verdict,
                filter=decision,
                created_at=ctx.timestamp(),
            )
            target = "kept.jsonl" if decision.decision == "keep" else "discarded.jsonl"
            batch.rows[target].append(sample.to_json_dict())
        batch.checkpoint.append(filter_key)

    batch.checkpoint.append((_STAGE_IMAGE_DONE, image.image_id))
    return batch


def _flush_batch(journal: _Journal, batch: _ImageBatch) -> None:
    for name in _DATA_FILES:
        keyfn = _ROW_KEYS[name]
        for row in batch.rows[name]:
            journal.append_row(name, keyfn(row), row)
    for key in batch.checkpoint:
        journal.append_checkpoint(key)
    journal.flush()


def _recover_stage_files(
    paths: RunPaths, done_images: set[str]
) -> tuple[dict[str, set[tuple]], dict[str, _ImageCache]]:
    """Collect present row keys and cache rows of unfinished images."""
    present: dict[str, set[tuple]] = {}
    caches: dict[str, _ImageCache] = {}

    def cache_for(image_id: str) -> _ImageCache:
        if image_id not in caches:
            caches[image_id] = _ImageCache()
        return caches[image_id]

    for name in _DATA_FILES:
        rows, _ = _scan_jsonl(paths.stage(name), what=name)
        keyfn = _ROW_KEYS[name]
        present[name] = set()
        for row in rows:
            present[name].add(keyfn(row))
            image_id = row["image_id"]
            if image_id in done_images:
                continue
            if name == "questions.jsonl":
                cache_for(image_id).questions.append(row)
            elif name == "answers.jsonl":
                body = {k: v for k, v in row.items() if k != "image_id"}
                cache_for(image_id).answer_sets[row["question_id"]] = (
                    AnswerSet.from_json_dict(body)
                )
            elif name == "reasoning.jsonl":
                cache_for(image_id).reasoning[row["question_id"]] = dict(row)
            elif name == "skips.jsonl":
                cache_for(image_id).skip_qids.add(row["question_id"])
    return present, caches


@dataclass
class RunResult:
    """Outcome of one orchestrated run (or resume)."""

    run_id: str
    run_dir: Path
    report: dict[str, Any]
    stats: DatasetStats
    backend: Any
    executed_keys: list[tuple]
    resumed: bool


def build_backend(config: PipelineConfig, mock_script_path, clock):
    backend_cfg = config.backend
    if mock_script_path is not None:
        return mock_load_script(
            mock_script_path,
            strict=True,
            model_tag=backend_cfg.model,
            max_retries=backend_cfg.max_retries,
            seed=config.run.seed,
            clock=clock,
        )
    if backend_cfg.url:
        api_key = None
        if backend_cfg.api_key_env:
            api_key = os.environ.get(backend_cfg.api_key_env) or None
        return RemoteBackend(
            backend_cfg.url,
            backend_cfg.model,
            RateLimitPolicy(
                requests_per_second=backend_cfg.rps,
                burst=backend_cfg.burst,
                max_retries=backend_cfg.max_retries,
            ),
            api_key=api_key,
            clock=clock,
            seed=config.run.seed,
        )
    raise OrchestratorError(
        "no backend configured: pass a mock script or set [backend] url"
    )


def run_pipeline(
    *,
    manifest_path: str | Path,
    config: PipelineConfig,
    run_root: str | Path,
    mock_script_path: str | Path | None = None,
    ocr_script_path: str | Path | None = None,
    assets_dir: str | Path | None = None,
    run_id: str | None = None,
    fixed_clock: bool = False,
    crash_after_writes: int | None = None,
) -> RunResult:
    """Execute (or resume) a full pipeline run.

    The run directory is ``run_root / run_id`` where ``run_id`` defaults to a
    prefix of the configuration fingerprint, so identical inputs land in the
    same directory and re-running a finished run is a no-op.  A checkpoint
    whose fingerprint disagrees with the current inputs aborts the run.
    """
    manifest_path = Path(manifest_path)
    fingerprint = config_fingerprint(
        config,
        manifest_path=manifest_path,
        mock_script_path=mock_script_path,
        ocr_script_path=ocr_script_path,
        assets_dir=assets_dir,
    )
    run_id = run_id or default_run_id(fingerprint)
    run_dir = Path(run_root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = RunPaths(run_dir)

    header, completed_keys = _load_checkpoint(paths.checkpoint)
    resumed = header is not None
    if header is None:
        stale = [
            name
            for name in _DATA_FILES
            if paths.stage(name).exists() and paths.stage(name).stat().st_size > 0
        ]
        if stale:
            raise CheckpointError(
                f"run directory {run_dir} contains stage files ({', '.join(stale)}) "
                f"but no usable checkpoint; {_RECOVERY_HINT}"
            )
    if header is not None:
        if header["run_id"] != run_id:
            raise CheckpointError(
                f"checkpoint in {run_dir} belongs to run {header['run_id']!r}, "
                f"not {run_id!r}; {_RECOVERY_HINT}"
            )
        if header["config_fingerprint"] != fingerprint:
            raise CheckpointError(
                f"run {run_id} was started with a different configuration "
                f"(fingerprint {header['config_fingerprint'][:12]}.. != "
                f"{fingerprint[:12]}..); resume with the original config and "
                f"inputs, or start a new run"
            )
    completed = set(completed_keys)

    clock = VirtualClock() if fixed_clock else SystemClock()
    # Timed on the run clock so a fixed-clock report is byte-reproducible.
    started = clock.monotonic()
    if fixed_clock:
        timestamp = lambda: FIXED_TIMESTAMP  # noqa: E731
    else:
        system = SystemClock()
        timestamp = system.utc_iso
    backend = build_backend(config, mock_script_path, clock)
    registry = load_registry(assets_dir) if assets_dir is not None else load_registry()
    exemplars = (
        load_exemplars(Path(assets_dir) / "exemplars.json")
        if assets_dir is not None and (Path(assets_dir) / "exemplars.json").is_file()
        else load_exemplars()
    )
    policy = ConsistencyPolicy(
        strategy=config.filter.strategy,
        overlap_threshold=config.filter.overlap_threshold,
        require_all_pairs=config.filter.require_all_pairs,
    )

    journal = _Journal(paths, crash_after_writes=crash_after_writes)
    executed: list[tuple] = []
    ingest_skips = 0
    images_with_no_questions = 0
    try:
        if header is None:
            journal.write_header(
                {
                    "format": CHECKPOINT_FORMAT,
                    "run_id": run_id,
                    "config_fingerprint": fingerprint,
                }
            )
        journal.checkpoint_present.update(completed)
        journal.ensure_files()

        # --- ingest ---------------------------------------------------
        if (_STAGE_INGEST,) not in completed:
            ocr = ScriptedOcr.load_script(ocr_script_path) if ocr_script_path else None
            result = ingest(
                manifest_path, max_hamming=config.dedup.max_hamming, ocr=ocr
            )
            ingest_skips = len(result.skipped)
            journal.reset_file("images.jsonl")
            journal.reset_file("dropped.jsonl")
            for record in result.kept:
                journal.append_raw("images.jsonl", record.to_json_dict())
            for drop in result.dropped:
                journal.append_raw("dropped.jsonl", drop.to_json_dict())
            journal.flush()
            journal.append_checkpoint((_STAGE_INGEST,))
            executed.append((_STAGE_INGEST,))
            images = list(result.kept)
        else:
            rows, _ = _scan_jsonl(paths.stage("images.jsonl"), what="images")
            images = [ImageRecord.from_json_dict(row) for row in rows]

        # --- recovery -------------------------------------------------
        done_images = {key[1] for key in completed if key[0] == _STAGE_IMAGE_DONE}
        present, caches = _recover_stage_files(paths, done_images)
        for name, keys in present.items():
            journal.present[name].update(keys)

        ctx = _RunContext(
            backend=backend,
            registry=registry,
            exemplars=exemplars,
            policy=policy,
            config=config,
            completed=frozenset(completed),
            caches=caches,
            timestamp=timestamp,
        )

        # --- parallel generate/filter, sequenced flush ----------------
        workers = config.run.workers
        window = max(workers * 2, 4)
        results: dict[int, _ImageBatch] = {}
        pending: dict[Future, int] = {}
        next_submit = 0
        next_flush = 0
        with ThreadPoolExecutor(max_workers=workers) as pool:
            try:
                while next_flush < len(images):
                    while (
                        next_submit < len(images)
                        and len(pending) + len(results) < window
                    ):
                        future = pool.submit(
                            _process_image, ctx, next_submit, images[next_submit]
                        )
                        pending[future] = next_submit
                        next_submit += 1
                    if pending:
                        done, _ = wait(set(pending), return_when=FIRST_COMPLETED)
                        for future in done:
                            ordinal = pending.pop(future)
                            results[ordinal] = future.result()
                    while next_flush in results:
                        batch = results.pop(next_flush)
                        _flush_batch(journal, batch)
                        executed.extend(batch.executed)
                        if batch.no_questions:
                            images_with_no_questions += 1
                        next_flush += 1
            except BaseException:
                for future in pending:
                    future.cancel()
                raise

        # --- assemble -------------------------------------------------
        if (_STAGE_ASSEMBLE,) not in completed or not paths.manifest.is_file():
            manifest = assemble_run(run_dir, config.assemble.shard_size)
            journal.append_checkpoint((_STAGE_ASSEMBLE,))
            executed.append((_STAGE_ASSEMBLE,))
        else:
            manifest = json.loads(paths.manifest.read_text(encoding="utf-8"))
        journal.flush()
    finally:
        journal.close()

    # --- report (rewritten every invocation) --------------------------
    stats = compute_stats(run_dir)
    with open(paths.stage("discarded.jsonl"), "r", encoding="utf-8") as handle:
        discarded = sum(1 for line in handle if line.strip())
    with open(paths.stage("skips.jsonl"), "r", encoding="utf-8") as handle:
        skipped = sum(1 for line in handle if line.strip())
    counters = backend.counters.snapshot()
    report = {
        "dataset": {
            "run_id": run_id,
            "config_fingerprint": fingerprint,
            "stats": stats.to_json_dict(),
            "samples_discarded": discarded,
            "samples_skipped": skipped,
            "shards": manifest["shards"],
        },
        "execution": {
            "backend_calls": counters["calls"],
            "retries": counters["retries"],
            "wall_time_s": clock.monotonic() - started,
            "workers": config.run.workers,
            "images_with_no_questions": images_with_no_questions,
            "ingest_skipped_images": ingest_skips,
            "resumed": resumed,
        },
    }
    with open(paths.report, "w", encoding="utf-8", newline="") as handle:
        handle.write(json.dumps(report, sort_keys=True, indent=2))
        handle.write("\n")
    logger.info(
        "run %s: kept %d of %d questions (retention %.3f), %d backend calls",
        run_id,
        stats.samples_kept,
        stats.questions_generated,
        stats.retention,
        counters["calls"],
    )
    return RunResult(
        run_id=run_id,
        run_dir=run_dir,
        report=report,
        stats=stats,
        backend=backend,
        executed_keys=executed,
        resumed=resumed,
    )


def resume_pipeline(
    run_id: str,
    *,
    manifest_path: str | Path,
    config: PipelineConfig,
    run_root: str | Path,
    mock_script_path: str | Path | None = None,
    ocr_script_path: str | Path | None = None,
    assets_dir: str | Path | None = None,
    fixed_clock: bool = False,
    crash_after_writes: int | None = None,
) -> RunResult:
    """Resume an existing run; unknown run ids are an error."""
    run_dir = Path(run_root) / run_id
    if not (run_dir / CHECKPOINT_NAME).is_file():
        raise OrchestratorError(
            f"cannot resume {run_id!r}: no checkpoint under {run_dir}"
        )
    return run_pipeline(
        manifest_path=manifest_path,
        config=config,
        run_root=run_root,
        mock_script_path=mock_script_path,
        ocr_script_path=ocr_script_path,
        assets_dir=assets_dir,
        run_id=run_id,
        fixed_clock=fixed_clock,
        crash_after_writes=crash_after_writes,
    )
