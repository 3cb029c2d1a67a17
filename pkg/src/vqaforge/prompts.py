"""Prompt template registry.

Templates are data: plain-text asset files with a small header, loaded into
an immutable registry. Paraphrase groups provide the reworded prompt sets the
agreement checks compare across, and small helpers compose the few-shot and
context-prepended variants on top of rendered templates.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .data_model import SourceCategory

logger = logging.getLogger(__name__)

__all__ = [
    "PROMPT_STAGES",
    "LEGAL_PLACEHOLDERS",
    "NAIVE_GROUP",
    "DEFAULT_ASSETS_DIR",
    "TemplateError",
    "RenderError",
    "PromptTemplate",
    "PromptRegistry",
    "render",
    "parse_template_file",
    "load_templates",
    "load_registry",
    "default_registry",
    "load_exemplars",
    "default_exemplars",
    "exemplar_block",
    "compose_few_shot",
    "compose_with_reasoning",
]

PROMPT_STAGES = (
    "self_question",
    "answer_naive",
    "answer_cot",
    "answer_few_shot",
    "reasoning",
    "evaluation",
)

# which placeholders a template body may reference, per stage
LEGAL_PLACEHOLDERS: Mapping[str, frozenset[str]] = {
    "self_question": frozenset({"ocr_text", "k"}),
    "answer_naive": frozenset({"ocr_text", "question"}),
    "answer_cot": frozenset({"ocr_text", "question"}),
    "answer_few_shot": frozenset({"ocr_text", "question"}),
    "reasoning": frozenset({"ocr_text", "question", "answer"}),
    "evaluation": frozenset({"ocr_text", "question", "answer", "reasoning"}),
}

# the paraphrase group whose members double as the plain answering prompts
NAIVE_GROUP = "naive_answer"

DEFAULT_ASSETS_DIR = Path(__file__).resolve().parent / "assets"

_PLACEHOLDER_NAMES = ("ocr_text", "question", "answer", "reasoning", "k")
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(_PLACEHOLDER_NAMES) + r")\}")
_BRACE_RE = re.compile(r"\{([a-z_]+)\}")


class TemplateError(ValueError):
    """A template file or registry fails validation."""


class RenderError(ValueError):
    """A render call lacks a placeholder value."""


@dataclass(frozen=True)
class PromptTemplate:
    prompt_id: str
    stage: str
    body: str
    paraphrase_group: str | None = None

    def __post_init__(self) -> None:
        if not self.prompt_id:
            raise TemplateError("prompt_id must be non-empty")
        if self.stage not in LEGAL_PLACEHOLDERS:
            raise TemplateError(
                f"template {self.prompt_id}: unknown stage {self.stage!r}")
        if not self.body.strip():
            raise TemplateError(f"template {self.prompt_id}: empty body")
        legal = LEGAL_PLACEHOLDERS[self.stage]
        for name in _BRACE_RE.findall(self.body):
            if name not in _PLACEHOLDER_NAMES:
                raise TemplateError(
                    f"template {self.prompt_id}: unknown placeholder {{{name}}}")
            if name not in legal:
                raise TemplateError(
                    f"template {self.prompt_id}: placeholder {{{name}}} is "
                    f"illegal for stage {self.stage}")

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))


def _coerce_value(template_id: str, name: str, value: Any) -> str:
    if name == "ocr_text" and isinstance(value, (list, tuple)):
        if not all(isinstance(item, str) for item in value):
            raise RenderError(
                f"template {template_id}: {{ocr_text}} lines must be strings")
        return "\n".join(value)
    if name == "k" and isinstance(value, int) and not isinstance(value, bool):
        return str(value)
    if isinstance(value, str):
        return value
    raise RenderError(
        f"template {template_id}: value for {{{name}}} must be a string, "
        f"got {type(value).__name__}")


def render(template: PromptTemplate, ctx: Mapping[str, Any]) -> str:
    """Substitute ctx into the body. OCR lines may be passed as a list of
    strings; they are joined with single newlines."""
    values: dict[str, str] = {}
    for name in sorted(template.placeholders):
        if name not in ctx:
            raise RenderError(
                f"template {template.prompt_id}: missing placeholder {{{name}}}")
        values[name] = _coerce_value(template.prompt_id, name, ctx[name])
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template.body)


class PromptRegistry:
    """Immutable lookup over a validated set of templates."""

    def __init__(self, templates: Iterable[PromptTemplate]) -> None:
        by_id: dict[str, PromptTemplate] = {}
        groups: dict[str, list[PromptTemplate]] = {}
        for template in templates:
            if template.prompt_id in by_id:
                raise TemplateError(f"duplicate prompt_id {template.prompt_id}")
            by_id[template.prompt_id] = template
            if template.paraphrase_group is not None:
                groups.setdefault(template.paraphrase_group, []).append(template)
        for group, members in groups.items():
            if len(members) < 2:
                raise TemplateError(
                    f"paraphrase group {group} has {len(members)} member(s); "
                    f"need at least 2")
            stages = {t.stage for t in members}
            if len(stages) != 1:
                raise TemplateError(
                    f"paraphrase group {group} mixes stages {sorted(stages)}")
            names = {t.placeholders for t in members}
            if len(names) != 1:
                raise TemplateError(
                    f"paraphrase group {group} members use different "
                    f"placeholder sets")
        self._by_id = by_id
        self._groups = {g: tuple(sorted(ms, key=lambda t: t.prompt_id))
                        for g, ms in groups.items()}

    def __len__(self) -> int:
        return len(self._by_id)

    def template(self, prompt_id: str) -> PromptTemplate:
        try:
            return self._by_id[prompt_id]
        except KeyError:
            raise TemplateError(f"unknown prompt_id {prompt_id}") from None

    def for_stage(self, stage: str) -> tuple[PromptTemplate, ...]:
        if stage not in LEGAL_PLACEHOLDERS:
            raise TemplateError(f"unknown stage {stage!r}")
        return tuple(sorted((t for t in self._by_id.values() if t.stage == stage),
                            key=lambda t: t.prompt_id))

    def first_for_stage(self, stage: str) -> PromptTemplate:
        candidates = self.for_stage(stage)
        if not candidates:
            raise TemplateError(f"no template for stage {stage}")
        return candidates[0]

    def paraphrases(self, group: str) -> tuple[PromptTemplate, ...]:
        try:
            return self._groups[group]
        except KeyError:
            raise TemplateError(f"unknown paraphrase group {group}") from None

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(sorted(self._groups))


# ---------------------------------------------------------------------------
# asset loading
# ---------------------------------------------------------------------------

_HEADER_KEYS = frozenset({"prompt_id", "stage", "paraphrase_group"})


def parse_template_file(path: str | Path) -> PromptTemplate:
    """Parse one template asset: 'key: value' header lines, a '---' line,
    then the body verbatim."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    header: dict[str, str] = {}
    body_start = None
    for i, line in enumerate(lines):
        if line.strip() == "---":
            body_start = i + 1
            break
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or key not in _HEADER_KEYS:
            raise TemplateError(f"{path}: bad header line {line!r}")
        if key in header:
            raise TemplateError(f"{path}: repeated header key {key}")
        header[key] = value.strip()
    if body_start is None:
        raise TemplateError(f"{path}: missing '---' separator")
    for required in ("prompt_id", "stage"):
        if not header.get(required):
            raise TemplateError(f"{path}: missing header field {required}")
    body = "\n".join(lines[body_start:]).strip("\n")
    try:
        return PromptTemplate(
            prompt_id=header["prompt_id"],
            stage=header["stage"],
            body=body,
            paraphrase_group=header.get("paraphrase_group") or None,
        )
    except TemplateError as exc:
        raise TemplateError(f"{path}: {exc}") from None


def load_templates(templates_dir: str | Path) -> list[PromptTemplate]:
    templates_dir = Path(templates_dir)
    paths = sorted(templates_dir.glob("*.txt"))
    if not paths:
        raise TemplateError(f"no template files in {templates_dir}")
    return [parse_template_file(p) for p in paths]


def load_registry(assets_dir: str | Path | None = None) -> PromptRegistry:
    assets_dir = Path(assets_dir) if assets_dir is not None else DEFAULT_ASSETS_DIR
    return PromptRegistry(load_templates(assets_dir / "templates"))


@lru_cache(maxsize=1)
def default_registry() -> PromptRegistry:
    return load_registry()


# ---------------------------------------------------------------------------
# few-shot exemplars
# ---------------------------------------------------------------------------

def load_exemplars(path: str | Path | None = None) -> dict[str, tuple[tuple[str, str], ...]]:
    """Load the per-category exemplar bank: exactly 2 (question, answer)
    pairs for every source category."""
    path = Path(path) if path is not None else DEFAULT_ASSETS_DIR / "exemplars.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise TemplateError(f"cannot load exemplars {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise TemplateError(f"{path}: exemplars must be a JSON object")
    known = {c.value for c in SourceCategory}
    out: dict[str, tuple[tuple[str, str], ...]] = {}
    for category, pairs in raw.items():
        if category not in known:
            raise TemplateError(f"{path}: unknown category {category!r}")
        if not isinstance(pairs, list) or len(pairs) != 2:
            raise TemplateError(
                f"{path}: category {category} needs exactly 2 exemplars")
        cooked = []
        for pair in pairs:
            if (not isinstance(pair, dict)
                    or not isinstance(pair.get("question"), str)
                    or not isinstance(pair.get("answer"), str)
                    or not pair["question"] or not pair["answer"]):
                raise TemplateError(
                    f"{path}: category {category} has a malformed exemplar")
            cooked.append((pair["question"], pair["answer"]))
        out[category] = tuple(cooked)
    missing = known - out.keys()
    if missing:
        raise TemplateError(f"{path}: missing categories {sorted(missing)}")
    return out


@lru_cache(maxsize=1)
def default_exemplars() -> dict[str, tuple[tuple[str, str], ...]]:
    return load_exemplars()


def exemplar_block(exemplars: Mapping[str, Sequence[tuple[str, str]]],
                   category: SourceCategory | str) -> str:
    key = category.value if isinstance(category, SourceCategory) else category
    pairs = exemplars[key]
    parts = []
    for i, (question, answer) in enumerate(pairs, start=1):
        parts.append(f"Example {i}:\nQuestion: {question}\nAnswer: {answer}")
    return "\n\n".join(parts)


def compose_few_shot(block: str, rendered: str) -> str:
    """Prepend the exemplar block to a rendered few-shot prompt."""
    return f"{block}\n\n{rendered}"


def compose_with_reasoning(reasoning: str, rendered_naive: str) -> str:
    """Prepend previously produced reasoning as context to a rendered plain
    answering prompt."""
    return f"Context: {reasoning}\n\n{rendered_naive}"
