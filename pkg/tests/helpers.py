"""Shared factories for building records and run directories in tests."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from PIL import Image

from vqaforge.data_model import (
    KIND_COT,
    KIND_FEW_SHOT,
    KIND_NAIVE,
    KIND_WITH_REASONING,
    AnswerSet,
    AnswerVariant,
    EvaluationVerdict,
    FilterVerdict,
    ImageRecord,
    OcrLine,
    Question,
    SourceCategory,
    VqaSample,
    image_id_for,
    jsonl_line,
    paraphrase_kind,
    question_id_for,
    sample_id_for,
)

FIXED_TIMESTAMP = "2000-01-01T00:00:00Z"


def make_image(
    index: int = 1,
    category: SourceCategory = SourceCategory.RECEIPT,
    ocr: Iterable[str] = ("TOTAL: $23.80", "Thank you for shopping"),
) -> ImageRecord:
    return ImageRecord(
        image_id=image_id_for(f"fixture-image-{index:04d}".encode("utf-8")),
        uri=f"file:///fixtures/{index:04d}.png",
        category=category,
        phash=(index * 0x9E3779B97F4A7C15) % (1 << 64),
        ocr_lines=tuple(OcrLine(text=t) for t in ocr),
        width_px=64,
        height_px=48,
    )


def make_question(
    image: ImageRecord,
    text: str = "What is the total?",
    ordinal: int = 0,
    prompt_id: str = "self-question-a",
) -> Question:
    return Question(
        question_id=question_id_for(image.image_id, prompt_id, ordinal, text),
        image_id=image.image_id,
        text=text,
        prompt_id=prompt_id,
        model_tag="mock",
    )


def make_answer_set(question: Question, *texts: str, with_reasoning: str | None = None) -> AnswerSet:
    """Answer set with naive paraphrases, one cot, one few-shot variant.

    ``texts`` supplies the naive paraphrase answers (first one canonical);
    cot and few-shot reuse the last text.
    """
    if not texts:
        texts = ("$23.80",)
    variants = []
    for i, text in enumerate(texts):
        kind = KIND_NAIVE if i == 0 else paraphrase_kind(i)
        variants.append(
            AnswerVariant(
                variant_kind=kind,
                prompt_id=f"answer-naive-{chr(97 + i)}",
                answer_text=text,
                model_tag="mock",
            )
        )
    variants.append(
        AnswerVariant(
            variant_kind=KIND_COT,
            prompt_id="answer-cot-a",
            answer_text=texts[-1],
            model_tag="mock",
        )
    )
    variants.append(
        AnswerVariant(
            variant_kind=KIND_FEW_SHOT,
            prompt_id="answer-few-shot-a",
            answer_text=texts[-1],
            model_tag="mock",
        )
    )
    if with_reasoning is not None:
        variants.append(
            AnswerVariant(
                variant_kind=KIND_WITH_REASONING,
                prompt_id="answer-naive-a",
                answer_text=with_reasoning,
                model_tag="mock",
            )
        )
    return AnswerSet(question_id=question.question_id, variants=tuple(variants))


def make_sample(
    image: ImageRecord,
    question: Question,
    answer_set: AnswerSet,
    *,
    keep: bool = True,
    reasoning: str = "The receipt total line reads $23.80.",
    reason_codes: tuple[str, ...] = ("multi_prompt_inconsistent",),
    created_at: str = FIXED_TIMESTAMP,
) -> VqaSample:
    verdict = EvaluationVerdict(
        question_meaningful=True,
        answer_correct=keep,
        judge_model_tag="mock",
        raw_judge_text="MEANINGFUL: yes\nCORRECT: yes" if keep else "MEANINGFUL: yes\nCORRECT: no",
    )
    if keep:
        filter_verdict = FilterVerdict(decision="keep")
    else:
        codes = tuple(reason_codes) if reason_codes else ("wrong_answer",)
        filter_verdict = FilterVerdict(decision="discard", reason_codes=codes)
    final = answer_set.by_kind(KIND_NAIVE)[0].answer_text
    return VqaSample(
        sample_id=sample_id_for(image.image_id, question.question_id, "mock"),
        image_id=image.image_id,
        question=question,
        final_answer=final,
        reasoning=reasoning,
        answer_set=answer_set,
        eval=verdict,
        filter=filter_verdict,
        created_at=created_at,
    )


def fixture_png(variant: int, size: tuple[int, int] = (64, 48)) -> bytes:
    """Deterministic grayscale PNG whose pattern depends on ``variant``."""
    width, height = size
    img = Image.new("L", (width, height))
    pixels = img.load()
    for y in range(height):
        for x in range(width):
            pixels[x, y] = (x * (11 + 2 * variant) + y * (3 + variant) + variant * 37) % 251
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class ImageScript:
    """Scripted behavior of one fixture image across every pipeline stage."""

    name: str
    variant: int
    category: str = "receipt"
    ocr: tuple[str, ...] = ("TOTAL: $23.80", "Thank you for shopping")
    questions: tuple[str, ...] = ("What is the total amount?",)
    naive: tuple[str, str, str] = ("$23.80", "$23.80", "$23.80")
    cot: str = "The receipt lists one total line.\nAnswer: $23.80"
    few_shot: str = "$23.80"
    reasoning: str = "The OCR text contains a single total of $23.80."
    with_reasoning: str = "$23.80"
    evaluation: str = "MEANINGFUL: yes\nCORRECT: yes"
    consistency: str | None = None
    faults: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    duplicate_of: str | None = None
    ocr_fail: bool = False


def numbered_questions(questions: Iterable[str]) -> str:
    return "\n".join(f"{i}. {text}" for i, text in enumerate(questions, start=1))


def build_pipeline_fixture(root: Path, scripts: Iterable[ImageScript]) -> dict[str, Any]:
    """Write images, manifest, OCR script, and mock script for a full run.

    Returns the paths plus the content-derived image id of each image name.
    """
    scripts = list(scripts)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    png_by_name: dict[str, bytes] = {}
    image_ids: dict[str, str] = {}
    manifest_rows = []
    ocr_rows = []
    mock_rows: list[dict[str, Any]] = []

    def add_mock(image_id: str, stage: str, prompt_id: str, text: str,
                 faults: tuple[str, ...] = ()) -> None:
        row: dict[str, Any] = {
            "stage": stage,
            "image_id": image_id,
            "prompt_id": prompt_id,
            "output_text": text,
        }
        if faults:
            row["faults"] = list(faults)
        mock_rows.append(row)

    for script in scripts:
        if script.duplicate_of is not None:
            data = png_by_name[script.duplicate_of]
        else:
            data = fixture_png(script.variant)
        png_by_name[script.name] = data
        uri = f"images/{script.name}.png"
        (root / uri).write_bytes(data)
        manifest_rows.append({"uri": uri, "category": script.category})
        if script.ocr_fail:
            ocr_rows.append({"uri": uri, "fail": True})
        elif script.ocr:
            ocr_rows.append({"uri": uri, "lines": [{"text": t} for t in script.ocr]})
        if script.duplicate_of is not None:
            continue

        image_id = image_id_for(data)
        image_ids[script.name] = image_id
        faults = {stage: tuple(fs) for stage, fs in script.faults.items()}
        add_mock(image_id, "self_question", "self-question-a",
                 numbered_questions(script.questions), faults.get("self_question", ()))
        for i, text in enumerate(script.naive):
            prompt_id = f"answer-naive-{chr(97 + i)}"
            add_mock(image_id, "answer_naive", prompt_id, text,
                     faults.get(f"answer_naive:{prompt_id}", ()))
        add_mock(image_id, "answer_cot", "answer-cot-a", script.cot,
                 faults.get("answer_cot", ()))
        add_mock(image_id, "answer_few_shot", "answer-few-shot-a", script.few_shot,
                 faults.get("answer_few_shot", ()))
        add_mock(image_id, "reasoning", "reasoning-a", script.reasoning,
                 faults.get("reasoning", ()))
        add_mock(image_id, "answer_with_reasoning", "answer-naive-a",
                 script.with_reasoning, faults.get("answer_with_reasoning", ()))
        add_mock(image_id, "evaluation", "evaluation-a", script.evaluation,
                 faults.get("evaluation", ()))
        if script.consistency is not None:
            add_mock(image_id, "consistency", "consistency-judge", script.consistency,
                     faults.get("consistency", ()))

    manifest_path = root / "manifest.jsonl"
    write_jsonl(manifest_path, manifest_rows)
    ocr_path = root / "ocr.jsonl"
    write_jsonl(ocr_path, ocr_rows)
    mock_path = root / "mock.jsonl"
    with open(mock_path, "w", encoding="utf-8", newline="") as handle:
        for row in mock_rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return {
        "root": root,
        "manifest": manifest_path,
        "ocr": ocr_path,
        "mock": mock_path,
        "image_ids": image_ids,
    }


def write_jsonl(path: Path, rows: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        for row in rows:
            handle.write(jsonl_line(row))


def build_run_dir(
    root: Path,
    *,
    images: Iterable[ImageRecord] = (),
    dropped: Iterable[Mapping[str, Any]] = (),
    questions: Iterable[Question] = (),
    answer_sets: Iterable[tuple[str, AnswerSet]] = (),
    reasoning_rows: Iterable[Mapping[str, Any]] = (),
    kept: Iterable[VqaSample] = (),
    discarded: Iterable[VqaSample] = (),
    skips: Iterable[Mapping[str, Any]] = (),
) -> Path:
    """Write a run directory's stage files from in-memory records."""
    root.mkdir(parents=True, exist_ok=True)
    write_jsonl(root / "images.jsonl", [r.to_json_dict() for r in images])
    write_jsonl(root / "dropped.jsonl", dropped)
    write_jsonl(root / "questions.jsonl", [q.to_json_dict() for q in questions])
    write_jsonl(
        root / "answers.jsonl",
        [{"image_id": image_id, **s.to_json_dict()} for image_id, s in answer_sets],
    )
    write_jsonl(root / "reasoning.jsonl", reasoning_rows)
    write_jsonl(root / "kept.jsonl", [s.to_json_dict() for s in kept])
    write_jsonl(root / "discarded.jsonl", [s.to_json_dict() for s in discarded])
    write_jsonl(root / "skips.jsonl", skips)
    return root
