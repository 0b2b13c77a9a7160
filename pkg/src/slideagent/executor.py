"""Multi-step reasoning over the accumulated evidence: answer prediction,
sufficiency reflection, missing-information exploration, and final synthesis.

Every call expects the model to emit a single JSON object. Parsing strips
code fences, extracts the first balanced object, and permits one repair
retry with a format reminder before failing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .backends import DecodingParams, GREEDY, TextChatBackend

PREDICT_ANSWER_SYSTEM_PROMPT = (
    "You are an expert AI pathology assistant. Your task is trying to answer the question "
    "step-by-step based on the patch descriptions. Output ONLY a JSON object: "
    '{"answer": "the final predicted answer (string)", '
    '"thinking_steps": "your detailed reasoning, step-by-step (string)"}.'
)

SELF_REFLECT_SYSTEM_PROMPT = (
    "You are an expert AI pathology assistant. Your task is to judge whether the current "
    "patch descriptions are sufficient to confidently support the answer. Output ONLY a "
    'JSON object: {"sufficient": "Yes" or "No"}.'
)

EXPLORE_MISSING_INFO_SYSTEM_PROMPT = (
    "You are an expert AI pathology assistant. Your task is to specify what visual "
    "evidence is missing and whether zooming in could help obtain that evidence. Output "
    'ONLY a JSON object: {"missing_info": "noun phrase", "zoom_recommendation": "Yes" or '
    '"No", "recommended_zoom_level": "None" or an integer like 10 or 20 or 40, '
    '"zoom_reason": "brief reason why zooming helps"}.'
)

FINAL_ANSWER_SYSTEM_PROMPT = (
    "You are an expert slide-level pathology assistant. You will be given a question and "
    "detailed patch-level descriptions of a pathology slide. Your task is to infer the "
    "specific slide-level diagnostic result based on the provided evidence — not to "
    "define or explain the medical term itself. The answer should directly reflect the "
    "information observable in the slide, such as biomarker expression level, presence "
    "or absence of features, or a numeric measurement."
)

FORMAT_REMINDER = (
    "\n\nReminder: output ONLY a single JSON object with exactly the required keys."
)

FINAL_FORMAT_INSTRUCTION = (
    'Output ONLY a JSON object: {"answer": "the final answer (string)", '
    '"thinking_steps": "your reasoning (string)"}.'
)

ZOOM_LEVELS = (10, 20, 40)

ENTRY_TEMPLATE = "mag={mag}x loc=({col},{row}): {text}"
NOTE_PREFIX = "[expert note]: "


class ExecutorError(Exception):
    pass


class JSONContractError(ExecutorError):
    """Raw text does not contain a parseable JSON object."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(message)
        self.offset = offset


class ResponseFormatError(ExecutorError):
    """Response stayed malformed (or violated the key contract) after the repair retry."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class DirectiveContractError(ExecutorError):
    """Zoom requested without a usable level; callers degrade to exploration."""

    def __init__(self, message: str, missing_info: str = ""):
        super().__init__(message)
        self.missing_info = missing_info


@dataclass(frozen=True)
class PredictedAnswer:
    answer: str
    thinking_steps: str


@dataclass(frozen=True)
class SufficiencyVerdict:
    sufficient: bool


@dataclass(frozen=True)
class MissingInfoDirective:
    missing_info: str
    zoom_recommendation: bool
    recommended_zoom_level: int | None = None
    zoom_reason: str = ""
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class FinalAnswer:
    answer: str
    reasoning_chain: str
    iterations_used: int


@dataclass(frozen=True)
class StateRendering:
    """Deterministic textual form of the evidence fed to the reasoning backend.

    ``entries`` are pre-rendered lines, expert notes first, then patch lines in
    descending relevance within each iteration, iterations chronological.
    """

    question: str
    entries: tuple[str, ...]
    iteration: int
    prior_rationales: tuple[str, ...] = ()
    options: tuple[str, ...] = ()

    def question_block(self) -> str:
        block = f"Question: {self.question}"
        if self.options:
            letters = (chr(ord("A") + i) for i in range(len(self.options)))
            rendered = " ".join(f"{letter}) {opt}" for letter, opt in zip(letters, self.options))
            block += f"\nOptions: {rendered}"
        return block

    def evidence_block(self) -> str:
        lines = "\n".join(self.entries) if self.entries else "(no evidence collected)"
        return f"Evidence:\n{lines}"

    def rationale_block(self) -> str:
        if not self.prior_rationales:
            return ""
        return "Prior reasoning:\n" + "\n".join(self.prior_rationales)


def render_entry(magnification: int, col: int, row: int, text: str) -> str:
    return ENTRY_TEMPLATE.format(mag=magnification, col=col, row=row, text=text)


def render_note(text: str) -> str:
    return NOTE_PREFIX + text


def format_rationale(iteration: int, answer: str, thinking_steps: str) -> str:
    return f"[iteration {iteration}] answer: {answer}\nreasoning: {thinking_steps}"


# ---------------------------------------------------------------------------
# JSON contract parsing
# ---------------------------------------------------------------------------

def _strip_code_fences(raw: str) -> str:
    text = raw.strip()
    if "```" not in text:
        return text
    start = text.find("```")
    newline = text.find("\n", start)
    if newline == -1:
        return text
    end = text.find("```", newline)
    if end == -1:
        return text
    return text[newline + 1:end].strip()


def _first_balanced_object(text: str) -> tuple[str, int]:
    start = text.find("{")
    if start == -1:
        raise JSONContractError("no JSON object found", 0)
    depth = 0
    in_string = False
    escaped = False
    for pos in range(start, len(text)):
        ch = text[pos]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start:pos + 1], start
    raise JSONContractError("unterminated JSON object", start)


def parse_json_object(raw: str) -> dict:
    """Extract and strictly parse the first JSON object in a model response."""
    text = _strip_code_fences(raw)
    block, offset = _first_balanced_object(text)
    try:
        value = json.loads(block)
    except json.JSONDecodeError as exc:
        raise JSONContractError(f"invalid JSON: {exc.msg}", offset + exc.pos) from exc
    if not isinstance(value, dict):
        raise JSONContractError("top-level JSON value is not an object", offset)
    return value


def _call_json(backend: TextChatBackend, system_prompt: str, user_prompt: str,
               decoding: DecodingParams, required_keys: tuple[str, ...]) -> dict:
    """One backend call with one bounded repair retry on contract failure."""
    raw = backend.complete(system_prompt, user_prompt, decoding)
    for attempt in (0, 1):
        try:
            obj = parse_json_object(raw)
            missing = [k for k in required_keys if k not in obj]
            if missing:
                raise JSONContractError(f"missing keys: {missing}")
            return obj
        except JSONContractError as exc:
            if attempt == 1:
                raise ResponseFormatError(f"unusable response: {exc}", raw) from exc
            raw = backend.complete(system_prompt, user_prompt + FORMAT_REMINDER, decoding)
    raise AssertionError("unreachable")


def _require_string(obj: dict, key: str, raw: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or not value.strip():
        raise ResponseFormatError(f"key {key!r} must be a non-empty string", raw)
    return value


# ---------------------------------------------------------------------------
# Prompt builders (pure functions of the rendering, reused for previews)
# ---------------------------------------------------------------------------

def predict_user_prompt(state: StateRendering) -> str:
    return f"{state.question_block()}\n\n{state.evidence_block()}"


def reflect_user_prompt(state: StateRendering, predicted: PredictedAnswer) -> str:
    return (
        f"{state.evidence_block()}\n\n{state.question_block()}\n\n"
        f"Proposed answer: {predicted.answer}\nReasoning: {predicted.thinking_steps}"
    )


def explore_user_prompt(state: StateRendering, predicted: PredictedAnswer) -> str:
    sections = [state.evidence_block(), state.question_block()]
    rationales = state.rationale_block()
    if rationales:
        sections.append(rationales)
    sections.append(
        f"Current answer: {predicted.answer}\nCurrent reasoning: {predicted.thinking_steps}")
    return "\n\n".join(sections)


def final_user_prompt(state: StateRendering, rationales: list[str]) -> str:
    sections = [state.question_block(), state.evidence_block()]
    if rationales:
        sections.append("Prior reasoning:\n" + "\n".join(rationales))
    sections.append(FINAL_FORMAT_INSTRUCTION)
    return "\n\n".join(sections)


# ---------------------------------------------------------------------------
# Reasoning steps
# ---------------------------------------------------------------------------

def predict_answer(state: StateRendering, backend: TextChatBackend,
                   decoding: DecodingParams = GREEDY) -> PredictedAnswer:
    user = predict_user_prompt(state)
    obj = _call_json(backend, PREDICT_ANSWER_SYSTEM_PROMPT, user, decoding,
                     ("answer", "thinking_steps"))
    raw = json.dumps(obj)
    return PredictedAnswer(_require_string(obj, "answer", raw),
                           _require_string(obj, "thinking_steps", raw))


def self_reflect(state: StateRendering, predicted: PredictedAnswer,
                 backend: TextChatBackend,
                 decoding: DecodingParams = GREEDY) -> SufficiencyVerdict:
    user = reflect_user_prompt(state, predicted)
    obj = _call_json(backend, SELF_REFLECT_SYSTEM_PROMPT, user, decoding, ("sufficient",))
    value = obj["sufficient"]
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered == "yes":
            return SufficiencyVerdict(True)
        if lowered == "no":
            return SufficiencyVerdict(False)
    raise ResponseFormatError(f"sufficient must be Yes or No, got {value!r}", json.dumps(obj))


def _parse_yes_no(value, key: str, raw: str) -> bool:
    if isinstance(value, str) and value.strip().lower() in ("yes", "no"):
        return value.strip().lower() == "yes"
    raise ResponseFormatError(f"key {key!r} must be Yes or No, got {value!r}", raw)


def _parse_zoom_level(value) -> int | None:
    """Accept an integer, an integer-as-string, or the string "None"."""
    if value is None:
        return None
    if isinstance(value, bool):
        raise ValueError("boolean is not a zoom level")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        stripped = value.strip()
        if stripped.lower() == "none" or stripped == "":
            return None
        if stripped.lstrip("+-").isdigit():
            return int(stripped)
    raise ValueError(f"unparseable zoom level {value!r}")


def clamp_zoom_level(requested: int, current_magnification: int) -> tuple[int, bool]:
    """Snap a requested level onto the valid ladder strictly above the current scale.

    Returns (level, was_clamped). Nearest valid level wins; distance ties go to
    the higher level. Raises ``DirectiveContractError`` when nothing above the
    current magnification exists.
    """
    candidates = [lv for lv in ZOOM_LEVELS if lv > current_magnification]
    if not candidates:
        raise DirectiveContractError(
            f"no zoom level above {current_magnification}x exists")
    if requested in candidates:
        return requested, False
    best = min(candidates, key=lambda lv: (abs(lv - requested), -lv))
    return best, True


def explore_missing_info(state: StateRendering, predicted: PredictedAnswer,
                         backend: TextChatBackend, current_magnification: int,
                         decoding: DecodingParams = GREEDY) -> MissingInfoDirective:
    """Ask what evidence is missing and whether magnification would reveal it.

    Out-of-range zoom levels are clamped onto the valid ladder with a recorded
    warning; a zoom recommendation without any level is a contract violation
    (the caller degrades it to an exploration action).
    """
    user = explore_user_prompt(state, predicted)
    obj = _call_json(backend, EXPLORE_MISSING_INFO_SYSTEM_PROMPT, user, decoding,
                     ("missing_info", "zoom_recommendation"))
    raw = json.dumps(obj)
    missing_info = _require_string(obj, "missing_info", raw)
    zoom = _parse_yes_no(obj["zoom_recommendation"], "zoom_recommendation", raw)
    try:
        level = _parse_zoom_level(obj.get("recommended_zoom_level"))
    except ValueError as exc:
        raise ResponseFormatError(str(exc), raw) from exc
    reason = obj.get("zoom_reason", "")
    if not isinstance(reason, str):
        reason = str(reason)

    warnings: list[str] = []
    if zoom:
        if level is None:
            raise DirectiveContractError(
                "zoom recommended but recommended_zoom_level is None", missing_info)
        clamped, was_clamped = clamp_zoom_level(level, current_magnification)
        if was_clamped:
            warnings.append(
                f"recommended_zoom_level {level} adjusted to {clamped} "
                f"(valid levels above {current_magnification}x)")
            level = clamped
    elif level is not None:
        warnings.append(f"ignoring recommended_zoom_level {level} on a non-zoom directive")
        level = None
    return MissingInfoDirective(missing_info, zoom, level, reason, tuple(warnings))


def final_answer(all_states: StateRendering, rationales: list[str],
                 backend: TextChatBackend,
                 decoding: DecodingParams = GREEDY) -> FinalAnswer:
    """Synthesize the conclusive answer from the merged evidence of all iterations."""
    user = final_user_prompt(all_states, rationales)
    obj = _call_json(backend, FINAL_ANSWER_SYSTEM_PROMPT, user, decoding,
                     ("answer", "thinking_steps"))
    raw = json.dumps(obj)
    return FinalAnswer(_require_string(obj, "answer", raw),
                       _require_string(obj, "thinking_steps", raw),
                       all_states.iteration)
