"""Per-image generation stages: question proposal, multi-variant answering,
and reasoning with a context-conditioned follow-up answer.

Stage order is strict: questions, then answers under every prompting variant,
then reasoning, then the answer re-asked with that reasoning as context.
Permanent backend failures surface as structured outcomes so the pipeline can
write exact skip records instead of dropping work silently.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .backend import (
    Backend,
    BackendRequest,
    PermanentBackendError,
    ProtocolError,
    STAGE_ANSWER_COT,
    STAGE_ANSWER_FEW_SHOT,
    STAGE_ANSWER_NAIVE,
    STAGE_ANSWER_WITH_REASONING,
    STAGE_REASONING,
    STAGE_SELF_QUESTION,
)
from .data_model import (
    AnswerSet,
    AnswerVariant,
    ImageRecord,
    KIND_COT,
    KIND_FEW_SHOT,
    KIND_NAIVE,
    KIND_WITH_REASONING,
    Question,
    paraphrase_kind,
    question_id_for,
)
from .prompts import (
    NAIVE_GROUP,
    PromptRegistry,
    compose_few_shot,
    compose_with_reasoning,
    default_exemplars,
    exemplar_block,
    render,
)

logger = logging.getLogger(__name__)

__all__ = [
    "AnswerOutcome",
    "parse_question_lines",
    "extract_answer",
    "request_id_for",
    "self_question",
    "answer_all",
    "reason",
    "final_answer",
]

# numbered-list items: "1. text", "2) text", or "- text"
_QUESTION_LINE_RE = re.compile(r"^\s*(?:\d+\s*[.)]\s*|-\s+)(.+)$")

_ANSWER_PREFIX = "answer:"
_ANSWER_PHRASE = "the answer is"

_BACKEND_FAILURES = (PermanentBackendError, ProtocolError)


def parse_question_lines(text: str, k: int) -> list[str]:
    """Pull up to k list items out of a model response, in order."""
    out: list[str] = []
    for line in text.splitlines():
        m = _QUESTION_LINE_RE.match(line)
        if not m:
            continue
        item = m.group(1).strip()
        if item:
            out.append(item)
        if len(out) == k:
            break
    return out


def extract_answer(raw: str) -> str:
    """Reduce a model response to its answer: the last non-empty line, with a
    leading "Answer:" or "The answer is" marker stripped when present."""
    last = ""
    for line in raw.splitlines():
        stripped = line.strip()
        if stripped:
            last = stripped
    low = last.lower()
    if low.startswith(_ANSWER_PREFIX):
        return last[len(_ANSWER_PREFIX):].strip()
    if low.startswith(_ANSWER_PHRASE):
        rest = last[len(_ANSWER_PHRASE):].strip()
        if rest.startswith(":"):
            rest = rest[1:].strip()
        return rest
    return last


def request_id_for(stage: str, image_id: str, prompt_id: str) -> str:
    """Deterministic, human-readable request id."""
    return f"{image_id}:{stage}:{prompt_id}"


def _request(
    stage: str,
    image: ImageRecord,
    prompt_id: str,
    prompt_text: str,
    temperature: float,
) -> BackendRequest:
    return BackendRequest(
        request_id=request_id_for(stage, image.image_id, prompt_id),
        image_ref=image.uri,
        prompt_text=prompt_text,
        temperature=temperature,
        stage=stage,
        image_id=image.image_id,
        prompt_id=prompt_id,
    )


# ---------------------------------------------------------------------------
# stage 1: question proposal
# ---------------------------------------------------------------------------

def self_question(
    image: ImageRecord,
    k: int,
    backend: Backend,
    registry: PromptRegistry,
    *,
    temperature: float = 0.7,
) -> list[Question]:
    """Ask the model for up to k questions about the image.

    An unparseable or failed response yields zero questions and a warning;
    there is no retry beyond the backend's own policy.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    template = registry.first_for_stage("self_question")
    prompt = render(template, {"ocr_text": image.ocr_text(), "k": k})
    req = _request(STAGE_SELF_QUESTION, image, template.prompt_id, prompt, temperature)
    try:
        resp = backend.complete(req)
    except _BACKEND_FAILURES as exc:
        logger.warning("question generation failed for image %s: %s",
                       image.image_id, exc)
        return []
    texts = parse_question_lines(resp.output_text, k)
    if not texts:
        logger.warning("question parse failure for image %s: no list items in %r",
                       image.image_id, resp.output_text[:200])
        return []
    return [
        Question(
            question_id=question_id_for(image.image_id, template.prompt_id,
                                        ordinal, text),
            image_id=image.image_id,
            text=text,
            prompt_id=template.prompt_id,
            model_tag=resp.model_tag,
        )
        for ordinal, text in enumerate(texts)
    ]


# ---------------------------------------------------------------------------
# stage 2: answering under every variant
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnswerOutcome:
    """Result of answering one question under all prompt variants.

    ``answer_set`` is None when any required variant failed permanently; the
    pipeline then writes a skip record carrying ``cause``.
    """

    answer_set: AnswerSet | None
    cause: str = ""

    @property
    def complete(self) -> bool:
        return self.answer_set is not None


def answer_all(
    image: ImageRecord,
    question: Question,
    backend: Backend,
    registry: PromptRegistry,
    *,
    exemplars: Mapping[str, Sequence[tuple[str, str]]] | None = None,
    temperature: float = 0.2,
) -> AnswerOutcome:
    """Answer one question with every reworded prompt plus the step-by-step
    and few-shot variants. The first reworded prompt (by prompt_id) is the
    canonical plain answer; the rest become the numbered paraphrase pool."""
    if question.image_id != image.image_id:
        raise ValueError(
            f"question {question.question_id} belongs to image "
            f"{question.image_id}, not {image.image_id}")
    if exemplars is None:
        exemplars = default_exemplars()
    ctx = {"ocr_text": image.ocr_text(), "question": question.text}
    variants: list[AnswerVariant] = []
    failures: list[str] = []

    def ask(stage: str, prompt_id: str, prompt: str, kind: str) -> None:
        req = _request(stage, image, prompt_id, prompt, temperature)
        try:
            resp = backend.complete(req)
        except _BACKEND_FAILURES as exc:
            failures.append(f"{stage}/{prompt_id}: {exc}")
            return
        variants.append(AnswerVariant(
            variant_kind=kind,
            prompt_id=prompt_id,
            answer_text=extract_answer(resp.output_text),
            model_tag=resp.model_tag,
        ))

    for i, template in enumerate(registry.paraphrases(NAIVE_GROUP)):
        kind = KIND_NAIVE if i == 0 else paraphrase_kind(i)
        ask(STAGE_ANSWER_NAIVE, template.prompt_id, render(template, ctx), kind)

    cot = registry.first_for_stage("answer_cot")
    ask(STAGE_ANSWER_COT, cot.prompt_id, render(cot, ctx), KIND_COT)

    few_shot = registry.first_for_stage("answer_few_shot")
    block = exemplar_block(exemplars, image.category)
    ask(STAGE_ANSWER_FEW_SHOT, few_shot.prompt_id,
        compose_few_shot(block, render(few_shot, ctx)), KIND_FEW_SHOT)

    if failures:
        cause = "; ".join(failures)
        logger.warning("incomplete answer set for question %s: %s",
                       question.question_id, cause)
        return AnswerOutcome(answer_set=None, cause=cause)
    return AnswerOutcome(
        answer_set=AnswerSet(question_id=question.question_id,
                             variants=tuple(variants)))


def final_answer(answer_set: AnswerSet) -> str:
    """The canonical answer: the plain variant from the first reworded
    prompt. Empty when that variant is missing."""
    naive = answer_set.by_kind(KIND_NAIVE)
    return naive[0].answer_text if naive else ""


# ---------------------------------------------------------------------------
# stage 3: reasoning plus the context-conditioned answer
# ---------------------------------------------------------------------------

def reason(
    image: ImageRecord,
    question: Question,
    answer_set: AnswerSet,
    backend: Backend,
    registry: PromptRegistry,
    *,
    temperature: float = 0.2,
) -> tuple[str, AnswerSet]:
    """Ask for reasoning behind the canonical answer, then re-ask the plain
    prompt with that reasoning prepended as context.

    Returns (reasoning_text, possibly-extended answer set). Any failure
    degrades softly: empty reasoning and/or no context-conditioned variant,
    which the downstream agreement check treats as a failure to agree.
    """
    answer = final_answer(answer_set)
    if not answer:
        raise ValueError(
            f"question {question.question_id}: reasoning requires a non-empty "
            f"canonical answer")
    template = registry.first_for_stage("reasoning")
    prompt = render(template, {"ocr_text": image.ocr_text(),
                               "question": question.text, "answer": answer})
    req = _request(STAGE_REASONING, image, template.prompt_id, prompt, temperature)
    try:
        resp = backend.complete(req)
    except _BACKEND_FAILURES as exc:
        logger.warning("reasoning failed for question %s: %s",
                       question.question_id, exc)
        return "", answer_set
    reasoning_text = resp.output_text
    if not reasoning_text.strip():
        logger.warning("empty reasoning for question %s", question.question_id)
        return "", answer_set

    naive_first = registry.paraphrases(NAIVE_GROUP)[0]
    rendered_naive = render(naive_first, {"ocr_text": image.ocr_text(),
                                          "question": question.text})
    follow_up = _request(
        STAGE_ANSWER_WITH_REASONING,
        image,
        naive_first.prompt_id,
        compose_with_reasoning(reasoning_text, rendered_naive),
        temperature,
    )
    try:
        follow_resp = backend.complete(follow_up)
    except _BACKEND_FAILURES as exc:
        logger.warning("context-conditioned answer failed for question %s: %s",
                       question.question_id, exc)
        return reasoning_text, answer_set
    extended = AnswerSet(
        question_id=answer_set.question_id,
        variants=answer_set.variants + (AnswerVariant(
            variant_kind=KIND_WITH_REASONING,
            prompt_id=naive_first.prompt_id,
            answer_text=extract_answer(follow_resp.output_text),
            model_tag=follow_resp.model_tag,
        ),),
    )
    return reasoning_text, extended
