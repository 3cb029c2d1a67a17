"""Command-line interface for the pipeline.

Exit codes: 0 on success, 1 for configuration or runtime failures (the
message names the offending input), 2 for usage errors.  Logs go to stderr
as JSON lines, data goes to files, and stdout carries short human summaries.

Stage commands (``ingest``, ``generate``, ``filter``, ``assemble``,
``stats``) operate directly on the stage files in ``--run-dir``; ``run`` and
``resume`` treat ``--run-dir`` as a root and manage ``<run-dir>/<run_id>``
with checkpointing.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

from .assemble import (
    AssembleError,
    assemble_run,
    compute_stats,
    format_stats_table,
    write_stats_files,
)
from .backend import (
    MockScriptError,
    PermanentBackendError,
    ProtocolError,
    TransientBackendError,
)
from .clock import SystemClock, VirtualClock
from .config import ConfigError, PipelineConfig, apply_overrides, load_config
from .data_model import (
    AnswerSet,
    AnswerVariant,
    ImageRecord,
    KIND_WITH_REASONING,
    Question,
    VqaSample,
    jsonl_line,
    parse_jsonl,
    sample_id_for,
)
from .filtering import ConsistencyPolicy, filter_sample
from .generate import answer_all, final_answer, reason, self_question
from .ingest import ManifestError, OcrError, ScriptedOcr, ingest
from .orchestrator import (
    FIXED_TIMESTAMP,
    OrchestratorError,
    build_backend,
    resume_pipeline,
    run_pipeline,
)
from .prompts import TemplateError, load_exemplars, load_registry
from .scaling import (
    METRICS,
    LogFit,
    ScalingError,
    fit_curve_rows,
    fit_metric,
    monotone_diagnostics,
    predict,
    read_points_csv,
    write_curve_csv,
)

logger = logging.getLogger(__name__)

__all__ = ["cli_main", "main"]

_EXPECTED_ERRORS = (
    ConfigError,
    ManifestError,
    OcrError,
    MockScriptError,
    ProtocolError,
    TransientBackendError,
    PermanentBackendError,
    TemplateError,
    ScalingError,
    AssembleError,
    OrchestratorError,
    FileNotFoundError,
    ValueError,
)

_LOGGING_READY = False


class _JsonLineHandler(logging.Handler):
    """One JSON object per log record, written to the current stderr."""

    def emit(self, record: logging.LogRecord) -> None:
        payload = {
            "ts": round(time.time(), 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info and record.exc_info[0] is not None:
            payload["error_type"] = record.exc_info[0].__name__
        try:
            print(json.dumps(payload, ensure_ascii=False), file=sys.stderr)
        except Exception:  # pragma: no cover - logging must never raise
            self.handleError(record)


def _configure_logging() -> None:
    global _LOGGING_READY
    if _LOGGING_READY:
        return
    package_logger = logging.getLogger("vqaforge")
    package_logger.setLevel(logging.INFO)
    package_logger.addHandler(_JsonLineHandler())
    _LOGGING_READY = True


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqaforge",
        description="Self-questioning VQA dataset pipeline over text-rich images.",
    )
    parser.add_argument("--config", type=Path, help="TOML configuration file")
    parser.add_argument(
        "--run-dir",
        type=Path,
        default=Path("runs"),
        help="stage-file directory (stage commands) or run root (run/resume)",
    )
    parser.add_argument("--mock-script", type=Path, help="scripted backend JSONL")
    parser.add_argument("--workers", type=int, help="override [run] workers")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument(
        "--fixed-clock",
        action="store_true",
        help="use the deterministic virtual clock and a fixed timestamp",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", help="decode, hash, dedup, and OCR manifest images")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ocr-script", type=Path)

    sub.add_parser("generate", help="generate questions, answers, and reasoning")
    sub.add_parser("filter", help="evaluate and filter answered questions")
    sub.add_parser("assemble", help="shard kept samples and write the manifest")
    sub.add_parser("stats", help="compute and export dataset statistics")

    p = sub.add_parser("run", help="execute the full checkpointed pipeline")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ocr-script", type=Path)
    p.add_argument("--run-id", help="override the fingerprint-derived run id")

    p = sub.add_parser("resume", help="resume an interrupted run")
    p.add_argument("run_id")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ocr-script", type=Path)

    scaling = sub.add_parser("scaling", help="data-scale trend fitting")
    ssub = scaling.add_subparsers(dest="scaling_command", required=True, metavar="action")
    p = ssub.add_parser("fit", help="fit y = slope*ln(x) + intercept to a points CSV")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--metric", choices=list(METRICS), default="loss")
    p.add_argument("--curve-out", type=Path, help="write fitted-curve CSV here")
    p.add_argument("--diagnostics", action="store_true",
                   help="also report diminishing-returns diagnostics")
    p = ssub.add_parser("predict", help="evaluate a fitted trend at a data scale")
    p.add_argument("--slope", type=float, required=True)
    p.add_argument("--intercept", type=float, required=True)
    p.add_argument("--scale", type=float, required=True)
    return parser


# ---------------------------------------------------------------------------
# shared helpers for stage commands
# ---------------------------------------------------------------------------

def _read_stage_rows(run_dir: Path, name: str) -> list[dict[str, Any]]:
    path = run_dir / name
    if not path.is_file():
        raise OrchestratorError(
            f"missing stage file: {path} (run the earlier stage first)"
        )
    with open(path, "r", encoding="utf-8") as handle:
        return list(parse_jsonl(handle))


def _write_stage_rows(run_dir: Path, name: str, rows: Sequence[dict[str, Any]]) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / name, "w", encoding="utf-8", newline="") as handle:
        for row in rows:
            handle.write(jsonl_line(row))


def _timestamp_fn(fixed_clock: bool) -> Callable[[], str]:
    if fixed_clock:
        return lambda: FIXED_TIMESTAMP
    return SystemClock().utc_iso


def _stage_tools(args: argparse.Namespace, config: PipelineConfig):
    clock = VirtualClock() if args.fixed_clock else SystemClock()
    backend = build_backend(config, args.mock_script, clock)
    return backend, load_registry(), load_exemplars(), _timestamp_fn(args.fixed_clock)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_ingest(args: argparse.Namespace, config: PipelineConfig) -> int:
    ocr = ScriptedOcr.load_script(args.ocr_script) if args.ocr_script else None
    result = ingest(args.manifest, max_hamming=config.dedup.max_hamming, ocr=ocr)
    _write_stage_rows(args.run_dir, "images.jsonl", [r.to_json_dict() for r in result.kept])
    _write_stage_rows(args.run_dir, "dropped.jsonl", [d.to_json_dict() for d in result.dropped])
    print(
        f"ingested {len(result.kept)} images into {args.run_dir} "
        f"({len(result.dropped)} near-duplicates dropped, "
        f"{len(result.skipped)} unreadable entries skipped)"
    )
    return 0


def _cmd_generate(args: argparse.Namespace, config: PipelineConfig) -> int:
    backend, registry, exemplars, _ = _stage_tools(args, config)
    images = [
        ImageRecord.from_json_dict(row)
        for row in _read_stage_rows(args.run_dir, "images.jsonl")
    ]
    gen = config.generate
    question_rows: list[dict[str, Any]] = []
    answer_rows: list[dict[str, Any]] = []
    reasoning_rows: list[dict[str, Any]] = []
    skip_rows: list[dict[str, Any]] = []
    for image in images:
        questions = self_question(
            image,
            gen.questions_per_image,
            backend,
            registry,
            temperature=gen.temperature_question,
        )
        question_rows.extend(q.to_json_dict() for q in questions)
        for question in questions:
            outcome = answer_all(
                image,
                question,
                backend,
                registry,
                exemplars=exemplars,
                temperature=gen.temperature_answer,
            )
            if not outcome.complete:
                skip_rows.append(
                    {
                        "image_id": image.image_id,
                        "question_id": question.question_id,
                        "stage": "answer",
                        "cause": outcome.cause,
                    }
                )
                continue
            answer_set = outcome.answer_set
            answer_rows.append({"image_id": image.image_id, **answer_set.to_json_dict()})
            if final_answer(answer_set):
                reasoning_text, answer_set = reason(
                    image, question, answer_set, backend, registry,
                    temperature=gen.temperature_answer,
                )
            else:
                reasoning_text = ""
            extended = answer_set.by_kind(KIND_WITH_REASONING)
            reasoning_rows.append(
                {
                    "image_id": image.image_id,
                    "question_id": question.question_id,
                    "reasoning": reasoning_text,
                    "with_reasoning_variant": (
                        extended[0].to_json_dict() if extended else None
                    ),
                }
            )
    _write_stage_rows(args.run_dir, "questions.jsonl", question_rows)
    _write_stage_rows(args.run_dir, "answers.jsonl", answer_rows)
    _write_stage_rows(args.run_dir, "reasoning.jsonl", reasoning_rows)
    _write_stage_rows(args.run_dir, "skips.jsonl", skip_rows)
    print(
        f"generated {len(question_rows)} questions from {len(images)} images "
        f"({len(answer_rows)} answered, {len(skip_rows)} skipped)"
    )
    return 0


def _cmd_filter(args: argparse.Namespace, config: PipelineConfig) -> int:
    backend, registry, _, timestamp = _stage_tools(args, config)
    policy = ConsistencyPolicy(
        strategy=config.filter.strategy,
        overlap_threshold=config.filter.overlap_threshold,
        require_all_pairs=config.filter.require_all_pairs,
    )
    images = {
        row["image_id"]: ImageRecord.from_json_dict(row)
        for row in _read_stage_rows(args.run_dir, "images.jsonl")
    }
    questions = {
        row["question_id"]: Question.from_json_dict(row)
        for row in _read_stage_rows(args.run_dir, "questions.jsonl")
    }
    reasoning_by_qid = {
        row["question_id"]: row
        for row in _read_stage_rows(args.run_dir, "reasoning.jsonl")
    }
    kept_rows: list[dict[str, Any]] = []
    discarded_rows: list[dict[str, Any]] = []
    for row in _read_stage_rows(args.run_dir, "answers.jsonl"):
        body = {k: v for k, v in row.items() if k != "image_id"}
        answer_set = AnswerSet.from_json_dict(body)
        question = questions.get(answer_set.question_id)
        image = images.get(row["image_id"])
        if question is None or image is None:
            raise OrchestratorError(
                f"answers.jsonl references unknown question or image "
                f"({answer_set.question_id}, {row['image_id']})"
            )
        reasoning_row = reasoning_by_qid.get(answer_set.question_id)
        reasoning_text = ""
        if reasoning_row is not None:
            reasoning_text = reasoning_row["reasoning"]
            variant_row = reasoning_row.get("with_reasoning_variant")
            if variant_row is not None:
                answer_set = AnswerSet(
                    question_id=answer_set.question_id,
                    variants=answer_set.variants
                    + (AnswerVariant.from_json_dict(variant_row),),
                )
        verdict, decision = filter_sample(
            image, question, answer_set, policy, backend, registry
        )
        sample = VqaSample(
            sample_id=sample_id_for(
                image.image_id, question.question_id, backend.model_tag
            ),
            image_id=image.image_id,
            question=question,
            final_answer=final_answer(answer_set),
            reasoning=reasoning_text,
            answer_set=answer_set,
            eval=verdict,
            filter=decision,
            created_at=timestamp(),
        )
        target = kept_rows if decision.decision == "keep" else discarded_rows
        target.append(sample.to_json_dict())
    _write_stage_rows(args.run_dir, "kept.jsonl", kept_rows)
    _write_stage_rows(args.run_dir, "discarded.jsonl", discarded_rows)
    total = len(kept_rows) + len(discarded_rows)
    print(f"kept {len(kept_rows)} and discarded {len(discarded_rows)} of {total} answered questions")
    return 0


def _cmd_assemble(args: argparse.Namespace, config: PipelineConfig) -> int:
    manifest = assemble_run(args.run_dir, config.assemble.shard_size)
    total = sum(shard["count"] for shard in manifest["shards"])
    print(
        f"assembled {total} samples into {len(manifest['shards'])} shards "
        f"under {args.run_dir}"
    )
    return 0


def _cmd_stats(args: argparse.Namespace, config: PipelineConfig) -> int:
    stats = compute_stats(args.run_dir)
    write_stats_files(stats, args.run_dir)
    print(format_stats_table(stats), end="")
    return 0


def _print_run_summary(result) -> None:
    stats = result.stats
    print(f"run {result.run_id} complete in {result.run_dir}")
    print(
        f"images {stats.images_after_dedup}/{stats.images_total}, "
        f"questions {stats.questions_generated}, kept {stats.samples_kept}, "
        f"retention {stats.retention:.3f}"
    )


def _cmd_run(args: argparse.Namespace, config: PipelineConfig) -> int:
    result = run_pipeline(
        manifest_path=args.manifest,
        config=config,
        run_root=args.run_dir,
        mock_script_path=args.mock_script,
        ocr_script_path=args.ocr_script,
        run_id=args.run_id,
        fixed_clock=args.fixed_clock,
    )
    _print_run_summary(result)
    return 0


def _cmd_resume(args: argparse.Namespace, config: PipelineConfig) -> int:
    result = resume_pipeline(
        args.run_id,
        manifest_path=args.manifest,
        config=config,
        run_root=args.run_dir,
        mock_script_path=args.mock_script,
        ocr_script_path=args.ocr_script,
        fixed_clock=args.fixed_clock,
    )
    _print_run_summary(result)
    return 0


def _cmd_scaling(args: argparse.Namespace, config: PipelineConfig) -> int:
    if args.scaling_command == "fit":
        points = read_points_csv(args.input)
        fit = fit_metric(points, args.metric)
        print(f"metric={args.metric} n={fit.n}")
        print(f"slope={fit.slope!r} intercept={fit.intercept!r} r2={fit.r_squared!r}")
        if args.curve_out is not None:
            write_curve_csv(args.curve_out, fit_curve_rows(points, args.metric, fit))
            print(f"curve written to {args.curve_out}")
        if args.diagnostics:
            report = monotone_diagnostics(points)
            for metric_name in METRICS:
                diag = getattr(report, metric_name)
                if diag is None:
                    print(f"{metric_name}: insufficient measurements")
                else:
                    print(
                        f"{metric_name}: diminishing={diag.diminishing} "
                        f"violations={len(diag.violations)}"
                    )
        return 0
    fit = LogFit(slope=args.slope, intercept=args.intercept, r_squared=1.0, n=2)
    print(f"predicted={predict(fit, args.scale)!r}")
    return 0


_DISPATCH: dict[str, Callable[[argparse.Namespace, PipelineConfig], int]] = {
    "ingest": _cmd_ingest,
    "generate": _cmd_generate,
    "filter": _cmd_filter,
    "assemble": _cmd_assemble,
    "stats": _cmd_stats,
    "run": _cmd_run,
    "resume": _cmd_resume,
    "scaling": _cmd_scaling,
}


def cli_main(argv: Sequence[str] | None = None) -> int:
    """Entry point returning the process exit code."""
    _configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        config = load_config(args.config)
        config = apply_overrides(config, workers=args.workers, seed=args.seed)
        return _DISPATCH[args.command](args, config)
    except _EXPECTED_ERRORS as exc:
        logger.error("%s", exc)
        return 1
    except Exception as exc:  # unexpected: keep the type visible in the log
        logger.error("unexpected failure: %s: %s", type(exc).__name__, exc, exc_info=True)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
