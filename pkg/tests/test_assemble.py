"""Tests for sharding, manifests, and dataset statistics."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from helpers import build_run_dir, make_answer_set, make_image, make_question, make_sample
from vqaforge.assemble import (
    AssembleError,
    ShardInfo,
    assemble_run,
    compute_stats,
    format_stats_table,
    shard_name,
    write_shards,
    write_stats_files,
)
from vqaforge.data_model import DatasetStats, SourceCategory, VqaSample, parse_jsonl


def make_rows(n: int) -> list[dict[str, int]]:
    return [{"ordinal": i} for i in range(n)]


def read_rows(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as handle:
        return list(parse_jsonl(handle))


def populated_run(root: Path, *, kept: int = 3, discarded: int = 1, skipped: int = 1) -> Path:
    """A consistent little run directory with real records."""
    categories = [SourceCategory.RECEIPT, SourceCategory.CHART, SourceCategory.TABLE]
    images = [make_image(i + 1, category=categories[i % len(categories)]) for i in range(3)]
    questions = []
    kept_samples = []
    discarded_samples = []
    skip_rows = []
    answer_sets = []
    reasoning_rows = []
    texts = [
        "What is the total?",
        "Which month is highest?",
        "How many rows are shown?",
        "What store issued this?",
        "What is the date shown?",
    ]
    for i in range(kept + discarded + skipped):
        image = images[i % len(images)]
        question = make_question(image, texts[i % len(texts)], ordinal=i)
        questions.append(question)
        if i < kept:
            answer_set = make_answer_set(question, "$23.80", "$23.80", "$23.80")
            answer_sets.append((image.image_id, answer_set))
            reasoning_rows.append(
                {"image_id": image.image_id, "question_id": question.question_id,
                 "reasoning": "The total line reads $23.80.", "with_reasoning_variant": None}
            )
            kept_samples.append(make_sample(image, question, answer_set))
        elif i < kept + discarded:
            answer_set = make_answer_set(question, "$23.80", "twenty", "other")
            answer_sets.append((image.image_id, answer_set))
            reasoning_rows.append(
                {"image_id": image.image_id, "question_id": question.question_id,
                 "reasoning": "", "with_reasoning_variant": None}
            )
            discarded_samples.append(make_sample(image, question, answer_set, keep=False))
        else:
            skip_rows.append(
                {"image_id": image.image_id, "question_id": question.question_id,
                 "stage": "answer", "cause": "backend gave up"}
            )
    return build_run_dir(
        root / "run",
        images=images,
        dropped=[{"image_id": "img-9999", "duplicate_of": images[0].image_id}],
        questions=questions,
        answer_sets=answer_sets,
        reasoning_rows=reasoning_rows,
        kept=kept_samples,
        discarded=discarded_samples,
        skips=skip_rows,
    )


def test_shard_rotation_10_by_4(tmp_path: Path) -> None:
    infos = write_shards(make_rows(10), tmp_path / "shards", 4)
    assert [info.count for info in infos] == [4, 4, 2]
    assert [info.file for info in infos] == [
        "shards/square-00000.jsonl",
        "shards/square-00001.jsonl",
        "shards/square-00002.jsonl",
    ]
    first = read_rows(tmp_path / "shards" / "square-00000.jsonl")
    last = read_rows(tmp_path / "shards" / "square-00002.jsonl")
    assert first == make_rows(10)[:4]
    assert last == make_rows(10)[8:]


def test_shard_exact_multiple(tmp_path: Path) -> None:
    infos = write_shards(make_rows(8), tmp_path / "shards", 4)
    assert [info.count for info in infos] == [4, 4]
    assert not (tmp_path / "shards" / shard_name(2)).exists()


def test_shard_empty_input(tmp_path: Path) -> None:
    infos = write_shards([], tmp_path / "shards", 4)
    assert infos == []
    assert list((tmp_path / "shards").glob("*.jsonl")) == []


def test_shard_hashes_match_file_bytes(tmp_path: Path) -> None:
    infos = write_shards(make_rows(5), tmp_path / "shards", 2)
    for info in infos:
        data = (tmp_path / info.file).read_bytes()
        assert hashlib.sha256(data).hexdigest() == info.sha256


def test_shard_rebuild_removes_stale_files(tmp_path: Path) -> None:
    write_shards(make_rows(10), tmp_path / "shards", 2)
    assert len(list((tmp_path / "shards").glob("square-*.jsonl"))) == 5
    infos = write_shards(make_rows(3), tmp_path / "shards", 2)
    assert len(infos) == 2
    assert sorted(p.name for p in (tmp_path / "shards").glob("square-*.jsonl")) == [
        shard_name(0),
        shard_name(1),
    ]


def test_shard_order_is_stable(tmp_path: Path) -> None:
    rows = [{"sample_id": f"s-{i}"} for i in range(7)]
    write_shards(rows, tmp_path / "shards", 3)
    recovered = []
    for path in sorted((tmp_path / "shards").glob("square-*.jsonl")):
        recovered.extend(read_rows(path))
    assert recovered == rows


def test_shard_size_validated(tmp_path: Path) -> None:
    with pytest.raises(AssembleError, match="shard_size"):
        write_shards(make_rows(1), tmp_path / "shards", 0)


def test_compute_stats_counts(tmp_path: Path) -> None:
    run_dir = populated_run(tmp_path)
    stats = compute_stats(run_dir)
    assert stats.images_total == 4
    assert stats.images_after_dedup == 3
    assert stats.questions_generated == 5
    assert stats.samples_kept == 3
    assert stats.retention == 3 / 5
    assert stats.per_category_counts == {"chart": 1, "receipt": 1, "table": 1}


def test_compute_stats_token_averages(tmp_path: Path) -> None:
    run_dir = populated_run(tmp_path)
    stats = compute_stats(run_dir)
    kept = [VqaSample.from_json_dict(row) for row in read_rows(run_dir / "kept.jsonl")]
    assert stats.avg_question_tokens == sum(len(s.question.text.split()) for s in kept) / 3
    assert stats.avg_answer_tokens == 1.0
    assert stats.avg_reasoning_tokens == sum(len(s.reasoning.split()) for s in kept) / 3


def test_compute_stats_empty_run(tmp_path: Path) -> None:
    run_dir = build_run_dir(tmp_path / "run")
    stats = compute_stats(run_dir)
    assert stats.images_total == 0
    assert stats.questions_generated == 0
    assert stats.retention == 0.0
    assert stats.avg_question_tokens == 0.0
    assert stats.per_category_counts == {}


def test_compute_stats_missing_file_named(tmp_path: Path) -> None:
    run_dir = populated_run(tmp_path)
    (run_dir / "reasoning.jsonl").unlink()
    with pytest.raises(AssembleError, match=r"missing stage file: .*reasoning\.jsonl"):
        compute_stats(run_dir)


def test_compute_stats_accounting_identity_enforced(tmp_path: Path) -> None:
    run_dir = populated_run(tmp_path)
    with open(run_dir / "skips.jsonl", "a", encoding="utf-8") as handle:
        handle.write('{"image_id": "img-0001", "question_id": "q", "stage": "answer", "cause": "x"}\n')
    with pytest.raises(AssembleError, match="accounting broken"):
        compute_stats(run_dir)


def test_assemble_run_writes_manifest(tmp_path: Path) -> None:
    run_dir = populated_run(tmp_path)
    manifest = assemble_run(run_dir, shard_size=2)
    on_disk = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest == on_disk
    assert [s["count"] for s in manifest["shards"]] == [2, 1]
    assert sum(s["count"] for s in manifest["shards"]) == manifest["stats"]["samples_kept"]
    for shard in manifest["shards"]:
        data = (run_dir / shard["file"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == shard["sha256"]


def test_assemble_shards_concatenate_to_kept(tmp_path: Path) -> None:
    run_dir = populated_run(tmp_path)
    manifest = assemble_run(run_dir, shard_size=2)
    joined = b"".join((run_dir / s["file"]).read_bytes() for s in manifest["shards"])
    assert joined == (run_dir / "kept.jsonl").read_bytes()


def test_assemble_empty_run(tmp_path: Path) -> None:
    run_dir = build_run_dir(tmp_path / "run")
    manifest = assemble_run(run_dir, shard_size=10)
    assert manifest["shards"] == []
    assert list((run_dir / "shards").glob("*.jsonl")) == []
    assert (run_dir / "manifest.json").is_file()


def test_assemble_is_idempotent_and_deterministic(tmp_path: Path) -> None:
    run_dir = populated_run(tmp_path)
    assemble_run(run_dir, shard_size=2)
    first = {p.name: p.read_bytes() for p in (run_dir / "shards").glob("*.jsonl")}
    first_manifest = (run_dir / "manifest.json").read_bytes()
    assemble_run(run_dir, shard_size=2)
    second = {p.name: p.read_bytes() for p in (run_dir / "shards").glob("*.jsonl")}
    assert first == second
    assert (run_dir / "manifest.json").read_bytes() == first_manifest


def test_stats_files_round_trip(tmp_path: Path) -> None:
    run_dir = populated_run(tmp_path)
    stats = compute_stats(run_dir)
    paths = write_stats_files(stats, tmp_path / "out")
    names = [p.name for p in paths]
    assert names == ["stats.json", "stats.txt", "category_counts.csv"]
    loaded = DatasetStats.from_json_dict(
        json.loads((tmp_path / "out" / "stats.json").read_text(encoding="utf-8"))
    )
    assert loaded == stats
    csv_text = (tmp_path / "out" / "category_counts.csv").read_text(encoding="utf-8")
    assert csv_text == "category,count\nchart,1\nreceipt,1\ntable,1\n"
    table = (tmp_path / "out" / "stats.txt").read_text(encoding="utf-8")
    assert "retention" in table
    assert "images per category:" in table


def test_stats_table_mentions_every_headline_number(tmp_path: Path) -> None:
    stats = DatasetStats.build(
        images_total=10,
        images_after_dedup=8,
        questions_generated=40,
        samples_kept=18,
        per_category_counts={"chart": 8},
        avg_question_tokens=6.25,
    )
    table = format_stats_table(stats)
    assert "10" in table and "8" in table and "40" in table and "18" in table
    assert repr(18 / 40) in table
    assert table.endswith("\n")


def test_shard_info_json_shape() -> None:
    info = ShardInfo(file="shards/square-00000.jsonl", count=3, sha256="ab" * 32)
    assert info.to_json_dict() == {
        "file": "shards/square-00000.jsonl",
        "count": 3,
        "sha256": "ab" * 32,
    }
