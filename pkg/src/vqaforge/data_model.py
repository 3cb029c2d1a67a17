"""Domain types for the VQA dataset factory.

Everything that crosses a stage boundary is defined here as a frozen dataclass
with an explicit JSON mapping. Serialization is canonical (sorted keys, compact
separators) so that identical values always produce identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping

__all__ = [
    "SourceCategory",
    "ReasonCode",
    "OcrLine",
    "ImageRecord",
    "Question",
    "AnswerVariant",
    "AnswerSet",
    "EvaluationVerdict",
    "PairScore",
    "FilterVerdict",
    "VqaSample",
    "DatasetStats",
    "KIND_NAIVE",
    "KIND_COT",
    "KIND_FEW_SHOT",
    "KIND_WITH_REASONING",
    "paraphrase_kind",
    "is_multi_prompt_kind",
    "content_id",
    "image_id_for",
    "question_id_for",
    "sample_id_for",
    "token_count",
    "canonical_json",
    "jsonl_line",
    "phash_to_hex",
    "phash_from_hex",
]

_ID_RE = re.compile(r"^[0-9a-f]{32}$")
_PARAPHRASE_RE = re.compile(r"^paraphrase:\d+$")

KIND_NAIVE = "naive"
KIND_COT = "cot"
KIND_FEW_SHOT = "few_shot"
KIND_WITH_REASONING = "with_reasoning"

_FIXED_KINDS = frozenset({KIND_NAIVE, KIND_COT, KIND_FEW_SHOT, KIND_WITH_REASONING})


class SourceCategory(str, Enum):
    """Where a text-rich image came from."""

    CHART = "chart"
    TABLE = "table"
    SLIDE = "slide"
    SCREENSHOT = "screenshot"
    WEB_IMAGE = "web_image"
    DOCUMENT_PDF = "document_pdf"
    RECEIPT = "receipt"
    ECOMMERCE = "ecommerce"
    STREET_VIEW = "street_view"
    BOOK = "book"
    OTHER = "other"


class ReasonCode(str, Enum):
    """Why a sample was discarded by the filter."""

    MEANINGLESS_QUESTION = "meaningless_question"
    WRONG_ANSWER = "wrong_answer"
    MULTI_PROMPT_INCONSISTENT = "multi_prompt_inconsistent"
    MULTI_CONTEXT_INCONSISTENT = "multi_context_inconsistent"


def paraphrase_kind(index: int) -> str:
    """Variant kind for an explicitly labeled paraphrase answer."""
    if index < 0:
        raise ValueError(f"paraphrase index must be >= 0, got {index}")
    return f"paraphrase:{index}"


def is_multi_prompt_kind(kind: str) -> bool:
    """True for variants that belong to the multi-prompt consistency pool."""
    return kind == KIND_NAIVE or kind.startswith("paraphrase:")


def _check_kind(kind: str) -> None:
    if kind not in _FIXED_KINDS and not _PARAPHRASE_RE.match(kind):
        raise ValueError(f"unknown variant kind: {kind!r}")


def _check_id(name: str, value: str) -> None:
    if not _ID_RE.match(value):
        raise ValueError(f"{name} must be 32 lowercase hex chars, got {value!r}")


# --------------------------------------------------------------------------
# identifiers
# --------------------------------------------------------------------------

def content_id(*parts: str | bytes) -> str:
    """128-bit content hash of the given parts, as 32 hex chars.

    Parts are length-prefixed before hashing so that distinct tuples can never
    collide through concatenation.
    """
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        raw = part.encode("utf-8") if isinstance(part, str) else part
        h.update(len(raw).to_bytes(8, "big"))
        h.update(raw)
    return h.hexdigest()


def image_id_for(data: bytes) -> str:
    """Identifier of an image: hash of its raw bytes (same bytes, same id)."""
    return hashlib.blake2b(data, digest_size=16).hexdigest()


def question_id_for(image_id: str, prompt_id: str, ordinal: int, text: str) -> str:
    return content_id("question", image_id, prompt_id, str(ordinal), text)


def sample_id_for(image_id: str, question_id: str, model_tag: str) -> str:
    return content_id("sample", image_id, question_id, model_tag)


# --------------------------------------------------------------------------
# canonical JSON
# --------------------------------------------------------------------------

def canonical_json(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, compact separators, raw unicode."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def jsonl_line(obj: Any) -> str:
    return canonical_json(obj) + "\n"


def phash_to_hex(phash: int) -> str:
    return f"{phash:016x}"


def phash_from_hex(text: str) -> int:
    if not re.match(r"^[0-9a-f]{16}$", text):
        raise ValueError(f"phash must be 16 lowercase hex chars, got {text!r}")
    return int(text, 16)


# --------------------------------------------------------------------------
# token counting
# --------------------------------------------------------------------------

def token_count(text: str, counter: Callable[[str], int] | None = None) -> int:
    """Number of tokens in ``text``.

    The default tokenizer counts maximal runs of non-whitespace; pass
    ``counter`` to plug in a different one.
    """
    if counter is not None:
        return counter(text)
    return len(text.split())


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OcrLine:
    """One recognized text line, with an optional (x, y, w, h) pixel box."""

    text: str
    box: tuple[int, int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.box is not None:
            box = tuple(int(v) for v in self.box)
            if len(box) != 4:
                raise ValueError(f"box must be (x, y, w, h), got {self.box!r}")
            if any(v < 0 for v in box):
                raise ValueError(f"box coordinates must be nonnegative, got {box}")
            object.__setattr__(self, "box", box)

    def to_json_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"text": self.text}
        if self.box is not None:
            d["box"] = list(self.box)
        return d

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "OcrLine":
        box = d.get("box")
        return cls(text=d["text"], box=tuple(box) if box is not None else None)


@dataclass(frozen=True)
class ImageRecord:
    """One ingested image, after decode, hashing, and OCR attachment."""

    image_id: str
    uri: str
    category: SourceCategory
    phash: int
    ocr_lines: tuple[OcrLine, ...] = ()
    width_px: int = 0
    height_px: int = 0
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_id("image_id", self.image_id)
        if not isinstance(self.category, SourceCategory):
            object.__setattr__(self, "category", SourceCategory(self.category))
        if not 0 <= self.phash < 1 << 64:
            raise ValueError(f"phash out of 64-bit range: {self.phash}")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError(
                f"image dimensions must be positive, got {self.width_px}x{self.height_px}"
            )
        object.__setattr__(self, "ocr_lines", tuple(self.ocr_lines))
        for line in self.ocr_lines:
            if line.box is not None:
                x, y, w, h = line.box
                if x + w > self.width_px or y + h > self.height_px:
                    raise ValueError(
                        f"ocr box {line.box} outside {self.width_px}x{self.height_px} image"
                    )
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.uri == other.uri
            and self.category == other.category
            and self.phash == other.phash
            and self.ocr_lines == other.ocr_lines
            and self.width_px == other.width_px
            and self.height_px == other.height_px
            and self.metadata == other.metadata
        )

    def __hash__(self) -> int:
        return hash((self.image_id, self.uri, self.phash))

    def ocr_text(self) -> str:
        """All OCR lines joined with newlines, ready for prompt substitution."""
        return "\n".join(line.text for line in self.ocr_lines)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "uri": self.uri,
            "category": self.category.value,
            "phash": phash_to_hex(self.phash),
            "ocr_lines": [line.to_json_dict() for line in self.ocr_lines],
            "width_px": self.width_px,
            "height_px": self.height_px,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "ImageRecord":
        return cls(
            image_id=d["image_id"],
            uri=d["uri"],
            category=SourceCategory(d["category"]),
            phash=phash_from_hex(d["phash"]),
            ocr_lines=tuple(OcrLine.from_json_dict(x) for x in d["ocr_lines"]),
            width_px=d["width_px"],
            height_px=d["height_px"],
            metadata=d["metadata"],
        )


@dataclass(frozen=True)
class Question:
    """One generated question about one image."""

    question_id: str
    image_id: str
    text: str
    prompt_id: str
    model_tag: str

    def __post_init__(self) -> None:
        _check_id("question_id", self.question_id)
        _check_id("image_id", self.image_id)
        if not self.text:
            raise ValueError("question text must be non-empty")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "image_id": self.image_id,
            "text": self.text,
            "prompt_id": self.prompt_id,
            "model_tag": self.model_tag,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "Question":
        return cls(
            question_id=d["question_id"],
            image_id=d["image_id"],
            text=d["text"],
            prompt_id=d["prompt_id"],
            model_tag=d["model_tag"],
        )


@dataclass(frozen=True)
class AnswerVariant:
    """One answer to a question, produced under one prompting context."""

    variant_kind: str
    prompt_id: str
    answer_text: str
    model_tag: str

    def __post_init__(self) -> None:
        _check_kind(self.variant_kind)

    @property
    def label(self) -> str:
        """Stable short name used in pairwise score reports."""
        return f"{self.variant_kind}:{self.prompt_id}"

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "variant_kind": self.variant_kind,
            "prompt_id": self.prompt_id,
            "answer_text": self.answer_text,
            "model_tag": self.model_tag,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "AnswerVariant":
        return cls(
            variant_kind=d["variant_kind"],
            prompt_id=d["prompt_id"],
            answer_text=d["answer_text"],
            model_tag=d["model_tag"],
        )


@dataclass(frozen=True)
class AnswerSet:
    """All answer variants collected for one question."""

    question_id: str
    variants: tuple[AnswerVariant, ...] = ()

    def __post_init__(self) -> None:
        _check_id("question_id", self.question_id)
        object.__setattr__(self, "variants", tuple(self.variants))
        seen: set[tuple[str, str]] = set()
        for v in self.variants:
            key = (v.variant_kind, v.prompt_id)
            if key in seen:
                raise ValueError(f"duplicate answer variant {key}")
            seen.add(key)

    def by_kind(self, kind: str) -> tuple[AnswerVariant, ...]:
        """Variants of one kind, in prompt_id order."""
        return tuple(
            sorted((v for v in self.variants if v.variant_kind == kind),
                   key=lambda v: v.prompt_id)
        )

    def multi_prompt_pool(self) -> tuple[AnswerVariant, ...]:
        """Naive and paraphrase variants, in (kind, prompt_id) order."""
        pool = [v for v in self.variants if is_multi_prompt_kind(v.variant_kind)]
        return tuple(sorted(pool, key=lambda v: (v.variant_kind, v.prompt_id)))

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "variants": [v.to_json_dict() for v in self.variants],
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "AnswerSet":
        return cls(
            question_id=d["question_id"],
            variants=tuple(AnswerVariant.from_json_dict(x) for x in d["variants"]),
        )


@dataclass(frozen=True)
class EvaluationVerdict:
    """Judge verdict on one (question, answer) pair."""

    question_meaningful: bool
    answer_correct: bool
    judge_model_tag: str
    raw_judge_text: str

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "question_meaningful": self.question_meaningful,
            "answer_correct": self.answer_correct,
            "judge_model_tag": self.judge_model_tag,
            "raw_judge_text": self.raw_judge_text,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "EvaluationVerdict":
        return cls(
            question_meaningful=bool(d["question_meaningful"]),
            answer_correct=bool(d["answer_correct"]),
            judge_model_tag=d["judge_model_tag"],
            raw_judge_text=d["raw_judge_text"],
        )


@dataclass(frozen=True)
class PairScore:
    """Consistency score between two answer variants."""

    a_variant: str
    b_variant: str
    score: float

    def to_json_dict(self) -> dict[str, Any]:
        return {"a_variant": self.a_variant, "b_variant": self.b_variant, "score": self.score}

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "PairScore":
        return cls(a_variant=d["a_variant"], b_variant=d["b_variant"], score=d["score"])


@dataclass(frozen=True)
class FilterVerdict:
    """Final keep/discard decision with the evidence behind it."""

    decision: str
    reason_codes: tuple[str, ...] = ()
    pairwise_scores: tuple[PairScore, ...] = ()

    def __post_init__(self) -> None:
        if self.decision not in ("keep", "discard"):
            raise ValueError(f"decision must be keep or discard, got {self.decision!r}")
        codes = tuple(str(c) for c in self.reason_codes)
        object.__setattr__(self, "reason_codes", codes)
        for code in codes:
            ReasonCode(code)
        if (self.decision == "discard") != bool(codes):
            raise ValueError("discard decisions require reason codes and keep forbids them")
        object.__setattr__(self, "pairwise_scores", tuple(self.pairwise_scores))

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "decision": self.decision,
            "reason_codes": list(self.reason_codes),
            "pairwise_scores": [p.to_json_dict() for p in self.pairwise_scores],
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "FilterVerdict":
        return cls(
            decision=d["decision"],
            reason_codes=tuple(d["reason_codes"]),
            pairwise_scores=tuple(PairScore.from_json_dict(x) for x in d["pairwise_scores"]),
        )


@dataclass(frozen=True)
class VqaSample:
    """One fully processed dataset sample."""

    sample_id: str
    image_id: str
    question: Question
    final_answer: str
    reasoning: str
    answer_set: AnswerSet
    eval: EvaluationVerdict
    filter: FilterVerdict
    created_at: str

    def __post_init__(self) -> None:
        _check_id("sample_id", self.sample_id)
        _check_id("image_id", self.image_id)
        if self.question.image_id != self.image_id:
            raise ValueError("question belongs to a different image")
        if self.answer_set.question_id != self.question.question_id:
            raise ValueError("answer set belongs to a different question")
        if not self.created_at:
            raise ValueError("created_at must be set")
        if self.filter.decision == "keep":
            if not (self.eval.question_meaningful and self.eval.answer_correct):
                raise ValueError("kept sample must have a fully positive evaluation")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "image_id": self.image_id,
            "question": self.question.to_json_dict(),
            "final_answer": self.final_answer,
            "reasoning": self.reasoning,
            "answer_set": self.answer_set.to_json_dict(),
            "eval": self.eval.to_json_dict(),
            "filter": self.filter.to_json_dict(),
            "created_at": self.created_at,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "VqaSample":
        return cls(
            sample_id=d["sample_id"],
            image_id=d["image_id"],
            question=Question.from_json_dict(d["question"]),
            final_answer=d["final_answer"],
            reasoning=d["reasoning"],
            answer_set=AnswerSet.from_json_dict(d["answer_set"]),
            eval=EvaluationVerdict.from_json_dict(d["eval"]),
            filter=FilterVerdict.from_json_dict(d["filter"]),
            created_at=d["created_at"],
        )


@dataclass(frozen=True)
class DatasetStats:
    """Aggregate numbers describing one assembled dataset."""

    images_total: int
    images_after_dedup: int
    questions_generated: int
    samples_kept: int
    retention: float
    per_category_counts: Mapping[str, int] = field(default_factory=dict)
    avg_question_tokens: float = 0.0
    avg_answer_tokens: float = 0.0
    avg_reasoning_tokens: float = 0.0

    _RETENTION_TOL = 1e-12

    def __post_init__(self) -> None:
        for name in ("images_total", "images_after_dedup", "questions_generated", "samples_kept"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.images_after_dedup > self.images_total:
            raise ValueError("images_after_dedup cannot exceed images_total")
        if self.samples_kept > self.questions_generated:
            raise ValueError("samples_kept cannot exceed questions_generated")
        if self.questions_generated > 0:
            expected = self.samples_kept / self.questions_generated
        else:
            expected = 0.0
        if abs(self.retention - expected) > self._RETENTION_TOL:
            raise ValueError(
                f"retention {self.retention!r} does not match "
                f"{self.samples_kept}/{self.questions_generated}"
            )
        counts = dict(self.per_category_counts)
        for key, value in counts.items():
            SourceCategory(key)
            if value < 0:
                raise ValueError(f"negative count for category {key}")
        if counts and sum(counts.values()) != self.images_after_dedup:
            raise ValueError("per_category_counts must sum to images_after_dedup")
        object.__setattr__(self, "per_category_counts", counts)

    @classmethod
    def build(
        cls,
        *,
        images_total: int,
        images_after_dedup: int,
        questions_generated: int,
        samples_kept: int,
        per_category_counts: Mapping[str, int] | None = None,
        avg_question_tokens: float = 0.0,
        avg_answer_tokens: float = 0.0,
        avg_reasoning_tokens: float = 0.0,
    ) -> "DatasetStats":
        """Build stats with retention derived from the counts."""
        retention = samples_kept / questions_generated if questions_generated > 0 else 0.0
        return cls(
            images_total=images_total,
            images_after_dedup=images_after_dedup,
            questions_generated=questions_generated,
            samples_kept=samples_kept,
            retention=retention,
            per_category_counts=dict(per_category_counts or {}),
            avg_question_tokens=avg_question_tokens,
            avg_answer_tokens=avg_answer_tokens,
            avg_reasoning_tokens=avg_reasoning_tokens,
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "images_total": self.images_total,
            "images_after_dedup": self.images_after_dedup,
            "questions_generated": self.questions_generated,
            "samples_kept": self.samples_kept,
            "retention": self.retention,
            "per_category_counts": dict(self.per_category_counts),
            "avg_question_tokens": self.avg_question_tokens,
            "avg_answer_tokens": self.avg_answer_tokens,
            "avg_reasoning_tokens": self.avg_reasoning_tokens,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "DatasetStats":
        return cls(
            images_total=d["images_total"],
            images_after_dedup=d["images_after_dedup"],
            questions_generated=d["questions_generated"],
            samples_kept=d["samples_kept"],
            retention=d["retention"],
            per_category_counts=d["per_category_counts"],
            avg_question_tokens=d["avg_question_tokens"],
            avg_answer_tokens=d["avg_answer_tokens"],
            avg_reasoning_tokens=d["avg_reasoning_tokens"],
        )


def parse_jsonl(lines: Iterable[str]) -> Iterable[dict[str, Any]]:
    """Parse JSONL content, skipping blank lines."""
    for line in lines:
        line = line.strip()
        if line:
            yield json.loads(line)
