"""Quality filtering: self-evaluation, cross-prompt and cross-context
agreement checks, and the shared answer-equivalence test they rest on.

Every check fails closed: missing variants, unparseable judge output, or a
failed judge call all count against the sample, never for it. Decisions are a
pure function of the sample, the policy, and the judge's scripted/recorded
responses, which is what makes verdicts replayable.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from itertools import combinations

from .backend import (
    Backend,
    BackendRequest,
    PermanentBackendError,
    ProtocolError,
    STAGE_CONSISTENCY,
    STAGE_EVALUATION,
)
from .data_model import (
    AnswerSet,
    AnswerVariant,
    EvaluationVerdict,
    FilterVerdict,
    ImageRecord,
    KIND_COT,
    KIND_FEW_SHOT,
    KIND_NAIVE,
    KIND_WITH_REASONING,
    PairScore,
    Question,
    ReasonCode,
)
from .generate import final_answer, request_id_for
from .prompts import PromptRegistry, render

logger = logging.getLogger(__name__)

__all__ = [
    "STRATEGIES",
    "JUDGE_PROMPT_ID",
    "ConsistencyPolicy",
    "Agreement",
    "ConsistencyResult",
    "normalize",
    "overlap_score",
    "semantic_consistent",
    "self_evaluate",
    "multi_prompt_check",
    "multi_context_check",
    "filter_sample",
]

STRATEGIES = ("exact_normalized", "token_overlap", "judge_backend")

# the agreement judge's prompt is owned by this module, not the registry:
# its output format is part of the filter's parsing contract
JUDGE_PROMPT_ID = "consistency-judge"

_BACKEND_FAILURES = (PermanentBackendError, ProtocolError)

_WS_RE = re.compile(r"\s+")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d{3}\b)")
_TERMINAL_PUNCT = ".,!?;:"
_QUOTE_PAIRS = (('"', '"'), ("'", "'"), ("“", "”"), ("‘", "’"))

_AGREE_RE = re.compile(r"^agree:\s*(yes|no)\s*$", re.IGNORECASE)
_MEANINGFUL_RE = re.compile(r"^meaningful:\s*(yes|no)\s*$", re.IGNORECASE)
_CORRECT_RE = re.compile(r"^correct:\s*(yes|no)\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class ConsistencyPolicy:
    """How answer agreement is decided."""

    strategy: str = "exact_normalized"
    overlap_threshold: float = 0.6
    require_all_pairs: bool = True

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ValueError(
                f"overlap_threshold must be in [0, 1], got {self.overlap_threshold}")


@dataclass(frozen=True)
class Agreement:
    """Outcome of one pairwise answer comparison."""

    consistent: bool
    score: float


@dataclass(frozen=True)
class ConsistencyResult:
    """Outcome of one multi-answer check."""

    consistent: bool
    pairwise: tuple[PairScore, ...] = ()


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(text: str) -> str:
    """Canonical answer form: lowercased, whitespace collapsed, terminal
    punctuation and matched surrounding quotes stripped to a fixpoint, and
    digit-group commas removed."""
    s = _WS_RE.sub(" ", text.lower()).strip()
    while True:
        before = s
        while s and s[-1] in _TERMINAL_PUNCT:
            s = s[:-1].rstrip()
        if len(s) >= 2:
            for open_q, close_q in _QUOTE_PAIRS:
                if s[0] == open_q and s[-1] == close_q:
                    s = s[1:-1].strip()
                    break
        if s == before:
            break
    return _THOUSANDS_RE.sub("", s)


def _tokens(text: str) -> frozenset[str]:
    return frozenset(normalize(text).split())


def overlap_score(a: str, b: str) -> float:
    """|A ∩ B| / max(|A|, |B|) over normalized token sets; 1.0 when both
    are empty."""
    ta, tb = _tokens(a), _tokens(b)
    if not ta and not tb:
        return 1.0
    return len(ta & tb) / max(len(ta), len(tb))


# ---------------------------------------------------------------------------
# pairwise agreement
# ---------------------------------------------------------------------------

def _judge_prompt(first: str, second: str) -> str:
    return (
        "Do these two answers to the same question agree in meaning?\n"
        f"Answer 1: {first}\n"
        f"Answer 2: {second}\n"
        "Reply with exactly one line:\n"
        "AGREE: yes or no"
    )


def _ask_judge(a: str, b: str, judge: Backend, image_id: str, image_ref: str) -> Agreement:
    # one query per unordered pair: canonical order by normalized text
    first, second = sorted((a, b), key=normalize)
    req = BackendRequest(
        request_id=request_id_for(STAGE_CONSISTENCY, image_id, JUDGE_PROMPT_ID),
        image_ref=image_ref,
        prompt_text=_judge_prompt(first, second),
        temperature=0.0,
        stage=STAGE_CONSISTENCY,
        image_id=image_id,
        prompt_id=JUDGE_PROMPT_ID,
    )
    try:
        resp = judge.complete(req)
    except _BACKEND_FAILURES as exc:
        logger.warning("agreement judge failed for image %s: %s; treating pair "
                       "as inconsistent", image_id, exc)
        return Agreement(consistent=False, score=0.0)
    for line in resp.output_text.splitlines():
        m = _AGREE_RE.match(line.strip())
        if m:
            agreed = m.group(1).lower() == "yes"
            return Agreement(consistent=agreed, score=1.0 if agreed else 0.0)
    logger.warning("unparseable judge reply for image %s: %r; treating pair as "
                   "inconsistent", image_id, resp.output_text[:200])
    return Agreement(consistent=False, score=0.0)


def semantic_consistent(
    a: str,
    b: str,
    policy: ConsistencyPolicy,
    judge: Backend | None = None,
    *,
    image_id: str = "",
    image_ref: str = "",
) -> Agreement:
    """Decide whether two answers agree under the policy's strategy."""
    if policy.strategy == "exact_normalized":
        equal = normalize(a) == normalize(b)
        return Agreement(consistent=equal, score=1.0 if equal else 0.0)
    if policy.strategy == "token_overlap":
        score = overlap_score(a, b)
        return Agreement(consistent=score >= policy.overlap_threshold, score=score)
    if judge is None:
        raise ValueError("judge_backend strategy requires a judge backend")
    return _ask_judge(a, b, judge, image_id, image_ref)


# ---------------------------------------------------------------------------
# self-evaluation
# ---------------------------------------------------------------------------

def _find_yes_no(text: str, pattern: re.Pattern[str]) -> bool | None:
    for line in text.splitlines():
        m = pattern.match(line.strip())
        if m:
            return m.group(1).lower() == "yes"
    return None


def self_evaluate(
    image: ImageRecord,
    question: Question,
    answer: str,
    judge: Backend,
    registry: PromptRegistry,
) -> EvaluationVerdict:
    """One judge call scoring the question/answer pair; unparseable or failed
    replies score negative on both axes."""
    template = registry.first_for_stage("evaluation")
    prompt = render(template, {"ocr_text": image.ocr_text(),
                               "question": question.text, "answer": answer})
    req = BackendRequest(
        request_id=request_id_for(STAGE_EVALUATION, image.image_id,
                                  template.prompt_id),
        image_ref=image.uri,
        prompt_text=prompt,
        temperature=0.0,
        stage=STAGE_EVALUATION,
        image_id=image.image_id,
        prompt_id=template.prompt_id,
    )
    try:
        resp = judge.complete(req)
    except _BACKEND_FAILURES as exc:
        logger.warning("evaluation failed for question %s: %s; scoring negative",
                       question.question_id, exc)
        return EvaluationVerdict(question_meaningful=False, answer_correct=False,
                                 judge_model_tag="", raw_judge_text="")
    meaningful = _find_yes_no(resp.output_text, _MEANINGFUL_RE)
    correct = _find_yes_no(resp.output_text, _CORRECT_RE)
    if meaningful is None or correct is None:
        logger.warning("unparseable evaluation for question %s: %r; scoring "
                       "negative", question.question_id, resp.output_text[:200])
        return EvaluationVerdict(question_meaningful=False, answer_correct=False,
                                 judge_model_tag=resp.model_tag,
                                 raw_judge_text=resp.output_text)
    return EvaluationVerdict(question_meaningful=meaningful,
                             answer_correct=correct,
                             judge_model_tag=resp.model_tag,
                             raw_judge_text=resp.output_text)


# ---------------------------------------------------------------------------
# agreement checks
# ---------------------------------------------------------------------------

def _score_pairs(
    variants: list[tuple[AnswerVariant, AnswerVariant]],
    policy: ConsistencyPolicy,
    judge: Backend | None,
    image_id: str,
    image_ref: str,
) -> tuple[list[bool], tuple[PairScore, ...]]:
    verdicts: list[bool] = []
    scores: list[PairScore] = []
    for va, vb in variants:
        agreement = semantic_consistent(
            va.answer_text, vb.answer_text, policy, judge,
            image_id=image_id, image_ref=image_ref)
        verdicts.append(agreement.consistent)
        scores.append(PairScore(a_variant=va.label, b_variant=vb.label,
                                score=agreement.score))
    return verdicts, tuple(scores)


def multi_prompt_check(
    answer_set: AnswerSet,
    policy: ConsistencyPolicy,
    judge: Backend | None = None,
    *,
    image_id: str = "",
    image_ref: str = "",
) -> ConsistencyResult:
    """Do the answers from the reworded prompts agree with each other?

    All pairs over the naive/paraphrase pool; fewer than 2 pool members is an
    automatic fail."""
    pool = answer_set.multi_prompt_pool()
    if len(pool) < 2:
        logger.warning("multi-prompt check for question %s: %d pool variant(s); "
                       "failing closed", answer_set.question_id, len(pool))
        return ConsistencyResult(consistent=False)
    verdicts, scores = _score_pairs(
        list(combinations(pool, 2)), policy, judge, image_id, image_ref)
    if policy.require_all_pairs:
        consistent = all(verdicts)
    else:
        consistent = sum(verdicts) * 2 > len(verdicts)
    return ConsistencyResult(consistent=consistent, pairwise=scores)


def _first_of_kind(answer_set: AnswerSet, kind: str) -> AnswerVariant | None:
    variants = answer_set.by_kind(kind)
    return variants[0] if variants else None


def multi_context_check(
    answer_set: AnswerSet,
    policy: ConsistencyPolicy,
    judge: Backend | None = None,
    *,
    image_id: str = "",
    image_ref: str = "",
) -> ConsistencyResult:
    """Do the context-conditioned, in-context, and plain answers all agree?

    The triple is {with_reasoning, cot (or few_shot when cot is absent),
    naive}; a missing member is an automatic fail."""
    with_reasoning = _first_of_kind(answer_set, KIND_WITH_REASONING)
    in_context = (_first_of_kind(answer_set, KIND_COT)
                  or _first_of_kind(answer_set, KIND_FEW_SHOT))
    naive = _first_of_kind(answer_set, KIND_NAIVE)
    triple = (with_reasoning, in_context, naive)
    if any(v is None for v in triple):
        missing = [name for name, v in
                   zip(("with_reasoning", "in_context", "naive"), triple)
                   if v is None]
        logger.warning("multi-context check for question %s: missing %s; "
                       "failing closed", answer_set.question_id,
                       ", ".join(missing))
        return ConsistencyResult(consistent=False)
    verdicts, scores = _score_pairs(
        list(combinations(triple, 2)), policy, judge, image_id, image_ref)
    return ConsistencyResult(consistent=all(verdicts), pairwise=scores)


# ---------------------------------------------------------------------------
# the full filter
# ---------------------------------------------------------------------------

def filter_sample(
    image: ImageRecord,
    question: Question,
    answer_set: AnswerSet,
    policy: ConsistencyPolicy,
    judge: Backend,
    registry: PromptRegistry,
) -> tuple[EvaluationVerdict, FilterVerdict]:
    """Run every check on one complete answer set.

    All checks always run, so discard reasons are complete rather than
    first-failure-only. Reason codes appear in a fixed order; decision is
    keep exactly when no check failed.
    """
    verdict = self_evaluate(image, question, final_answer(answer_set), judge,
                            registry)
    prompt_check = multi_prompt_check(answer_set, policy, judge,
                                      image_id=image.image_id,
                                      image_ref=image.uri)
    context_check = multi_context_check(answer_set, policy, judge,
                                        image_id=image.image_id,
                                        image_ref=image.uri)
    codes: list[str] = []
    if not verdict.question_meaningful:
        codes.append(ReasonCode.MEANINGLESS_QUESTION.value)
    if not verdict.answer_correct:
        codes.append(ReasonCode.WRONG_ANSWER.value)
    if not prompt_check.consistent:
        codes.append(ReasonCode.MULTI_PROMPT_INCONSISTENT.value)
    if not context_check.consistent:
        codes.append(ReasonCode.MULTI_CONTEXT_INCONSISTENT.value)
    filter_verdict = FilterVerdict(
        decision="keep" if not codes else "discard",
        reason_codes=tuple(codes),
        pairwise_scores=prompt_check.pairwise + context_check.pairwise,
    )
    return verdict, filter_verdict
