"""Dataset assembly: sharding, manifests, and aggregate statistics.

Kept samples are packed into fixed-size JSONL shards with a manifest that
records per-shard content hashes, and the run directory's stage files are
folded into one :class:`~vqaforge.data_model.DatasetStats`.  Everything here
is a pure function of the files on disk, so rebuilding is always safe and
deterministic.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .data_model import (
    DatasetStats,
    ImageRecord,
    VqaSample,
    jsonl_line,
    parse_jsonl,
    token_count,
)

logger = logging.getLogger(__name__)

__all__ = [
    "AssembleError",
    "ShardInfo",
    "SHARD_DIR_NAME",
    "MANIFEST_NAME",
    "STAGE_FILES",
    "shard_name",
    "write_shards",
    "compute_stats",
    "assemble_run",
    "write_stats_files",
]


class AssembleError(ValueError):
    """Raised for missing stage files or inconsistent run accounting."""


SHARD_DIR_NAME = "shards"
MANIFEST_NAME = "manifest.json"

# Stage files a completed run directory must contain.
STAGE_FILES = (
    "images.jsonl",
    "dropped.jsonl",
    "questions.jsonl",
    "answers.jsonl",
    "reasoning.jsonl",
    "kept.jsonl",
    "discarded.jsonl",
    "skips.jsonl",
)


@dataclass(frozen=True)
class ShardInfo:
    """One output shard: relative file name, row count, content hash."""

    file: str
    count: int
    sha256: str

    def to_json_dict(self) -> dict[str, Any]:
        return {"file": self.file, "count": self.count, "sha256": self.sha256}


def shard_name(index: int) -> str:
    return f"square-{index:05d}.jsonl"


def write_shards(
    rows: Iterable[Mapping[str, Any]],
    shards_dir: str | Path,
    shard_size: int,
) -> list[ShardInfo]:
    """Pack sample rows into shard files of at most ``shard_size`` rows.

    Row order is preserved.  Stale shard files in the directory are removed
    first so a rebuild never leaves leftovers.  With no rows, no shard files
    are written and the returned list is empty.
    """
    if shard_size < 1:
        raise AssembleError(f"shard_size must be >= 1, got {shard_size!r}")
    shards_dir = Path(shards_dir)
    shards_dir.mkdir(parents=True, exist_ok=True)
    for stale in sorted(shards_dir.glob("square-*.jsonl")):
        stale.unlink()

    infos: list[ShardInfo] = []
    handle = None
    digest = None
    count = 0
    try:
        for row in rows:
            if handle is None:
                path = shards_dir / shard_name(len(infos))
                handle = open(path, "w", encoding="utf-8", newline="")
                digest = hashlib.sha256()
                count = 0
            line = jsonl_line(row)
            handle.write(line)
            digest.update(line.encode("utf-8"))
            count += 1
            if count == shard_size:
                handle.close()
                infos.append(
                    ShardInfo(
                        file=f"{SHARD_DIR_NAME}/{shard_name(len(infos))}",
                        count=count,
                        sha256=digest.hexdigest(),
                    )
                )
                handle = None
        if handle is not None:
            handle.close()
            infos.append(
                ShardInfo(
                    file=f"{SHARD_DIR_NAME}/{shard_name(len(infos))}",
                    count=count,
                    sha256=digest.hexdigest(),
                )
            )
            handle = None
    finally:
        if handle is not None:
            handle.close()
    return infos


def _read_stage(run_dir: Path, name: str) -> list[dict[str, Any]]:
    path = run_dir / name
    if not path.is_file():
        raise AssembleError(f"missing stage file: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        return list(parse_jsonl(handle))


def _mean(values: list[int]) -> float:
    return sum(values) / len(values) if values else 0.0


def compute_stats(run_dir: str | Path) -> DatasetStats:
    """Aggregate statistics from a run directory's stage files.

    Requires every stage file to exist (an absent file is reported by name)
    and enforces the accounting identity ``kept + discarded + skipped ==
    questions_generated``.
    """
    run_dir = Path(run_dir)
    images = [ImageRecord.from_json_dict(row) for row in _read_stage(run_dir, "images.jsonl")]
    dropped = _read_stage(run_dir, "dropped.jsonl")
    questions = _read_stage(run_dir, "questions.jsonl")
    _read_stage(run_dir, "answers.jsonl")
    _read_stage(run_dir, "reasoning.jsonl")
    kept = [VqaSample.from_json_dict(row) for row in _read_stage(run_dir, "kept.jsonl")]
    discarded = _read_stage(run_dir, "discarded.jsonl")
    skips = _read_stage(run_dir, "skips.jsonl")

    accounted = len(kept) + len(discarded) + len(skips)
    if accounted != len(questions):
        raise AssembleError(
            f"run accounting broken in {run_dir}: kept {len(kept)} + discarded "
            f"{len(discarded)} + skipped {len(skips)} = {accounted} "
            f"!= questions generated {len(questions)}"
        )

    per_category: dict[str, int] = {}
    for record in images:
        key = record.category.value
        per_category[key] = per_category.get(key, 0) + 1

    return DatasetStats.build(
        images_total=len(images) + len(dropped),
        images_after_dedup=len(images),
        questions_generated=len(questions),
        samples_kept=len(kept),
        per_category_counts=dict(sorted(per_category.items())),
        avg_question_tokens=_mean([token_count(s.question.text) for s in kept]),
        avg_answer_tokens=_mean([token_count(s.final_answer) for s in kept]),
        avg_reasoning_tokens=_mean([token_count(s.reasoning) for s in kept]),
    )


def assemble_run(run_dir: str | Path, shard_size: int) -> dict[str, Any]:
    """Shard a run's kept samples and write the dataset manifest.

    Returns the manifest mapping, which is also written to ``manifest.json``
    in the run directory: shard descriptors plus the dataset statistics.  The
    sum of shard counts always equals ``samples_kept``.
    """
    run_dir = Path(run_dir)
    stats = compute_stats(run_dir)
    kept_rows = _read_stage(run_dir, "kept.jsonl")
    infos = write_shards(kept_rows, run_dir / SHARD_DIR_NAME, shard_size)
    total = sum(info.count for info in infos)
    if total != stats.samples_kept:
        raise AssembleError(
            f"shard counts sum to {total} but samples_kept is {stats.samples_kept}"
        )
    manifest = {
        "shards": [info.to_json_dict() for info in infos],
        "stats": stats.to_json_dict(),
    }
    manifest_path = run_dir / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8", newline="") as handle:
        handle.write(json.dumps(manifest, sort_keys=True, indent=2))
        handle.write("\n")
    logger.info(
        "assembled %d samples into %d shards under %s", total, len(infos), run_dir
    )
    return manifest


_STAT_ROWS = (
    ("images_total", "images ingested"),
    ("images_after_dedup", "images after dedup"),
    ("questions_generated", "questions generated"),
    ("samples_kept", "samples kept"),
    ("retention", "retention"),
    ("avg_question_tokens", "avg question tokens"),
    ("avg_answer_tokens", "avg answer tokens"),
    ("avg_reasoning_tokens", "avg reasoning tokens"),
)


def format_stats_table(stats: DatasetStats) -> str:
    """Fixed-width text table for terminals and logs."""
    lines = []
    width = max(len(label) for _, label in _STAT_ROWS)
    for field_name, label in _STAT_ROWS:
        value = getattr(stats, field_name)
        text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{label.ljust(width)}  {text}")
    if stats.per_category_counts:
        lines.append("")
        lines.append("images per category:")
        cat_width = max(len(name) for name in stats.per_category_counts)
        for name in sorted(stats.per_category_counts):
            lines.append(f"  {name.ljust(cat_width)}  {stats.per_category_counts[name]}")
    return "\n".join(lines) + "\n"


def write_stats_files(stats: DatasetStats, out_dir: str | Path) -> list[Path]:
    """Export statistics as JSON, a text table, and a plot-ready CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    json_path = out_dir / "stats.json"
    with open(json_path, "w", encoding="utf-8", newline="") as handle:
        handle.write(json.dumps(stats.to_json_dict(), sort_keys=True, indent=2))
        handle.write("\n")

    text_path = out_dir / "stats.txt"
    with open(text_path, "w", encoding="utf-8", newline="") as handle:
        handle.write(format_stats_table(stats))

    csv_path = out_dir / "category_counts.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["category", "count"])
        for name in sorted(stats.per_category_counts):
            writer.writerow([name, stats.per_category_counts[name]])

    return [json_path, text_path, csv_path]
