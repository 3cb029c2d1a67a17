"""Template registry, rendering, paraphrase groups, and exemplar bank tests."""
from __future__ import annotations

import json
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from vqaforge.data_model import SourceCategory
from vqaforge.prompts import (
    DEFAULT_ASSETS_DIR,
    NAIVE_GROUP,
    PromptRegistry,
    PromptTemplate,
    RenderError,
    TemplateError,
    compose_few_shot,
    compose_with_reasoning,
    default_exemplars,
    default_registry,
    exemplar_block,
    load_exemplars,
    load_registry,
    load_templates,
    parse_template_file,
    render,
)

# frozen after a one-time manual render+review of the shipped template
GOLDEN_SELF_QUESTION = (
    "You are shown an image that contains text. The text reads:\n"
    "\n"
    "TOTAL: $23.80\n"
    "Thank you for shopping\n"
    "\n"
    "Write 5 substantive questions about this image that require reading and\n"
    "understanding its text. Avoid yes/no questions and questions answerable\n"
    "without the image. Reply with a numbered list, one question per line."
)


def make_template(
    prompt_id: str = "t-1",
    stage: str = "answer_naive",
    body: str = "OCR: {ocr_text}\nQ: {question}",
    group: str | None = None,
) -> PromptTemplate:
    return PromptTemplate(prompt_id=prompt_id, stage=stage, body=body,
                          paraphrase_group=group)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def test_render_substitutes_question() -> None:
    t = make_template(body="Q: {question}")
    assert render(t, {"question": "Why?"}) == "Q: Why?"


def test_render_joins_ocr_lines_with_newline() -> None:
    t = make_template(body="{ocr_text}", stage="answer_naive")
    assert render(t, {"ocr_text": ["line one", "line two"]}) == "line one\nline two"
    assert render(t, {"ocr_text": "pre-joined"}) == "pre-joined"


def test_render_golden_self_question() -> None:
    t = default_registry().first_for_stage("self_question")
    out = render(t, {"ocr_text": ["TOTAL: $23.80", "Thank you for shopping"], "k": 5})
    assert out == GOLDEN_SELF_QUESTION


def test_render_missing_placeholder_names_it() -> None:
    t = make_template(body="OCR: {ocr_text}\nQ: {question}")
    with pytest.raises(RenderError, match=r"\{question\}"):
        render(t, {"ocr_text": "x"})


def test_render_accepts_int_k_rejects_bool() -> None:
    t = make_template(stage="self_question", body="ask {k} about {ocr_text}")
    assert render(t, {"k": 5, "ocr_text": "x"}) == "ask 5 about x"
    with pytest.raises(RenderError):
        render(t, {"k": True, "ocr_text": "x"})


def test_render_rejects_non_string_values() -> None:
    t = make_template(body="Q: {question}")
    with pytest.raises(RenderError):
        render(t, {"question": 42})
    t2 = make_template(body="{ocr_text}")
    with pytest.raises(RenderError):
        render(t2, {"ocr_text": [1, 2]})


def test_render_does_not_rescan_substituted_values() -> None:
    t = make_template(body="Q: {question} OCR: {ocr_text}")
    out = render(t, {"question": "{ocr_text}", "ocr_text": "real"})
    assert out == "Q: {ocr_text} OCR: real"


def test_render_extra_ctx_keys_ignored() -> None:
    t = make_template(body="Q: {question}")
    assert render(t, {"question": "a", "answer": "b"}) == "Q: a"


@settings(max_examples=50, deadline=None)
@given(q1=st.text(min_size=1, max_size=60), q2=st.text(min_size=1, max_size=60))
def test_render_injective_on_question_for_shipped_templates(q1: str, q2: str) -> None:
    if q1 == q2:
        return
    registry = default_registry()
    ocr = ["alpha", "beta"]
    for stage in ("answer_naive", "answer_cot", "answer_few_shot"):
        for t in registry.for_stage(stage):
            a = render(t, {"ocr_text": ocr, "question": q1})
            b = render(t, {"ocr_text": ocr, "question": q2})
            assert a != b


def test_render_deterministic() -> None:
    t = default_registry().first_for_stage("reasoning")
    ctx = {"ocr_text": ["x"], "question": "q?", "answer": "a"}
    assert render(t, ctx) == render(t, ctx)


# ---------------------------------------------------------------------------
# template validation
# ---------------------------------------------------------------------------

def test_placeholder_legality_per_stage() -> None:
    with pytest.raises(TemplateError, match="illegal"):
        make_template(stage="self_question", body="Q: {question}")
    with pytest.raises(TemplateError, match="illegal"):
        make_template(stage="answer_naive", body="{answer}")
    # legal combinations construct fine
    make_template(stage="evaluation", body="{question} {answer} {reasoning}")
    make_template(stage="self_question", body="{ocr_text} {k}")


def test_unknown_placeholder_rejected() -> None:
    with pytest.raises(TemplateError, match="unknown placeholder"):
        make_template(body="hello {world}")


def test_unknown_stage_rejected() -> None:
    with pytest.raises(TemplateError, match="unknown stage"):
        make_template(stage="riddle", body="x")


def test_empty_body_rejected() -> None:
    with pytest.raises(TemplateError, match="empty body"):
        make_template(body="   \n ")


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

def test_default_registry_shape() -> None:
    registry = default_registry()
    naive = registry.paraphrases(NAIVE_GROUP)
    assert len(naive) == 3
    assert [t.prompt_id for t in naive] == sorted(t.prompt_id for t in naive)
    assert all(t.stage == "answer_naive" for t in naive)
    # the answering group sorts first-paraphrase-first
    assert registry.first_for_stage("answer_naive").prompt_id == naive[0].prompt_id
    for stage in ("self_question", "answer_cot", "answer_few_shot",
                  "reasoning", "evaluation"):
        assert len(registry.for_stage(stage)) >= 1


def test_registry_rejects_duplicate_prompt_ids() -> None:
    t = make_template(prompt_id="dup")
    with pytest.raises(TemplateError, match="duplicate prompt_id"):
        PromptRegistry([t, make_template(prompt_id="dup", body="Q: {question}")])


def test_registry_rejects_singleton_group() -> None:
    with pytest.raises(TemplateError, match="at least 2"):
        PromptRegistry([make_template(group="lonely")])


def test_registry_rejects_mixed_stage_group() -> None:
    a = make_template(prompt_id="a", stage="answer_naive", body="{question}",
                      group="g")
    b = make_template(prompt_id="b", stage="answer_cot", body="{question}",
                      group="g")
    with pytest.raises(TemplateError, match="mixes stages"):
        PromptRegistry([a, b])


def test_registry_rejects_mismatched_placeholders_in_group() -> None:
    a = make_template(prompt_id="a", body="{question}", group="g")
    b = make_template(prompt_id="b", body="{question} {ocr_text}", group="g")
    with pytest.raises(TemplateError, match="placeholder sets"):
        PromptRegistry([a, b])


def test_paraphrases_sorted_and_isolated() -> None:
    g1 = [make_template(prompt_id="p-b", body="B {question}", group="g1"),
          make_template(prompt_id="p-a", body="A {question}", group="g1")]
    g2 = [make_template(prompt_id="q-a", body="C {question}", group="g2"),
          make_template(prompt_id="q-b", body="D {question}", group="g2")]
    registry = PromptRegistry(g1 + g2)
    assert [t.prompt_id for t in registry.paraphrases("g1")] == ["p-a", "p-b"]
    assert [t.prompt_id for t in registry.paraphrases("g2")] == ["q-a", "q-b"]


def test_unknown_group_and_prompt_id_error() -> None:
    registry = default_registry()
    with pytest.raises(TemplateError, match="unknown paraphrase group"):
        registry.paraphrases("nope")
    with pytest.raises(TemplateError, match="unknown prompt_id"):
        registry.template("nope")
    with pytest.raises(TemplateError, match="unknown stage"):
        registry.for_stage("nope")


# ---------------------------------------------------------------------------
# asset parsing
# ---------------------------------------------------------------------------

def test_parse_template_file_round_trip(tmp_path: Path) -> None:
    path = tmp_path / "t.txt"
    path.write_text(
        "prompt_id: my-id\n"
        "stage: answer_naive\n"
        "paraphrase_group: g\n"
        "---\n"
        "line one {question}\n"
        "\n"
        "line three {ocr_text}\n",
        encoding="utf-8",
    )
    t = parse_template_file(path)
    assert t.prompt_id == "my-id"
    assert t.stage == "answer_naive"
    assert t.paraphrase_group == "g"
    assert t.body == "line one {question}\n\nline three {ocr_text}"


def test_parse_template_file_errors(tmp_path: Path) -> None:
    no_sep = tmp_path / "a.txt"
    no_sep.write_text("prompt_id: x\nstage: answer_naive\nbody text\n",
                      encoding="utf-8")
    with pytest.raises(TemplateError, match="bad header line"):
        parse_template_file(no_sep)

    missing_sep = tmp_path / "b.txt"
    missing_sep.write_text("prompt_id: x\nstage: answer_naive\n", encoding="utf-8")
    with pytest.raises(TemplateError, match="missing '---'"):
        parse_template_file(missing_sep)

    missing_id = tmp_path / "c.txt"
    missing_id.write_text("stage: answer_naive\n---\nbody\n", encoding="utf-8")
    with pytest.raises(TemplateError, match="missing header field prompt_id"):
        parse_template_file(missing_id)

    repeated = tmp_path / "d.txt"
    repeated.write_text("prompt_id: x\nprompt_id: y\nstage: answer_naive\n---\nb\n",
                        encoding="utf-8")
    with pytest.raises(TemplateError, match="repeated header key"):
        parse_template_file(repeated)


def test_load_templates_empty_dir_error(tmp_path: Path) -> None:
    with pytest.raises(TemplateError, match="no template files"):
        load_templates(tmp_path)


def test_load_registry_from_custom_dir(tmp_path: Path) -> None:
    templates = tmp_path / "templates"
    templates.mkdir()
    (templates / "one.txt").write_text(
        "prompt_id: only\nstage: self_question\n---\nask {k}: {ocr_text}\n",
        encoding="utf-8")
    registry = load_registry(tmp_path)
    assert len(registry) == 1
    assert registry.template("only").stage == "self_question"


# ---------------------------------------------------------------------------
# exemplars
# ---------------------------------------------------------------------------

def test_default_exemplars_cover_all_categories() -> None:
    exemplars = default_exemplars()
    assert set(exemplars) == {c.value for c in SourceCategory}
    for pairs in exemplars.values():
        assert len(pairs) == 2
        for question, answer in pairs:
            assert question and answer


def test_exemplar_block_format() -> None:
    exemplars = {"receipt": (("What is the total?", "$5.00"),
                             ("Which store?", "Corner Grocery"))}
    block = exemplar_block(exemplars, SourceCategory.RECEIPT)
    assert block == (
        "Example 1:\nQuestion: What is the total?\nAnswer: $5.00\n\n"
        "Example 2:\nQuestion: Which store?\nAnswer: Corner Grocery"
    )


def test_load_exemplars_validation(tmp_path: Path) -> None:
    good = json.loads((DEFAULT_ASSETS_DIR / "exemplars.json").read_text())

    missing = dict(good)
    del missing["book"]
    p1 = tmp_path / "missing.json"
    p1.write_text(json.dumps(missing), encoding="utf-8")
    with pytest.raises(TemplateError, match="missing categories"):
        load_exemplars(p1)

    wrong_count = dict(good)
    wrong_count["book"] = good["book"][:1]
    p2 = tmp_path / "count.json"
    p2.write_text(json.dumps(wrong_count), encoding="utf-8")
    with pytest.raises(TemplateError, match="exactly 2"):
        load_exemplars(p2)

    malformed = dict(good)
    malformed["book"] = [{"question": "q"}, {"question": "q", "answer": "a"}]
    p3 = tmp_path / "malformed.json"
    p3.write_text(json.dumps(malformed), encoding="utf-8")
    with pytest.raises(TemplateError, match="malformed exemplar"):
        load_exemplars(p3)

    unknown = dict(good)
    unknown["selfie"] = good["book"]
    p4 = tmp_path / "unknown.json"
    p4.write_text(json.dumps(unknown), encoding="utf-8")
    with pytest.raises(TemplateError, match="unknown category"):
        load_exemplars(p4)

    p5 = tmp_path / "bad.json"
    p5.write_text("{broken", encoding="utf-8")
    with pytest.raises(TemplateError, match="cannot load"):
        load_exemplars(p5)


# ---------------------------------------------------------------------------
# composition helpers
# ---------------------------------------------------------------------------

def test_compose_few_shot_prepends_block() -> None:
    assert compose_few_shot("EXAMPLES", "PROMPT") == "EXAMPLES\n\nPROMPT"


def test_compose_with_reasoning_prepends_context() -> None:
    out = compose_with_reasoning("because line 3 says so", "PROMPT")
    assert out == "Context: because line 3 says so\n\nPROMPT"
