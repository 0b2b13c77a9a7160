"""Turns patches into textual morphology descriptions through the vision backend.

Two prompt forms exist: a generic description request and a question-guided
one where the question text is substituted verbatim. Batch description gives
the top-scoring patches the guided form and tolerates per-patch failures.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backends import DecodingParams, GREEDY, VisionChatBackend
from .slides import Patch, SlideBundle, tile_bytes

PERCEPTOR_SYSTEM_PROMPT = (
    "A conversation between a curious user and an AI medical assistant specialized in "
    "pathology image analysis. The assistant can interpret pathology images, describe "
    "observed features, and provide possible explanations based on medical knowledge, "
    "but will never give a definitive diagnosis or prescribe treatment. The assistant "
    "must always maintain a polite, clear, and professional tone. All answers should be "
    "supported by established, reliable medical sources. The assistant should carefully "
    "consider visual details in pathology images, such as cell morphology, staining "
    "patterns, and tissue architecture."
)

GENERIC_PROMPT = "Please describe the pathology features in this image."
GUIDED_PROMPT_TEMPLATE = (
    "Please describe the pathology features related to the question: {question} in this image."
)

KIND_GENERIC = "generic"
KIND_GUIDED = "question_guided"

DESCRIPTION_UNAVAILABLE = "[description unavailable]"
DEFAULT_TOP_GUIDED = 5


class PerceptorError(Exception):
    pass


class DescriptionFailedError(PerceptorError):
    """The backend refused or failed for one patch."""

    def __init__(self, message: str, patch: Patch):
        super().__init__(message)
        self.patch = patch


class BatchFailedError(PerceptorError):
    """Every patch in a batch failed."""


@dataclass(frozen=True)
class PatchDescription:
    patch: Patch
    text: str
    prompt_kind: str
    question: str | None = None

    @property
    def available(self) -> bool:
        return self.text != DESCRIPTION_UNAVAILABLE


def guided_prompt(question: str) -> str:
    """Question-guided user prompt with the question substituted literally."""
    return GUIDED_PROMPT_TEMPLATE.replace("{question}", question)


def _describe(patch: Patch, bundle: SlideBundle, backend: VisionChatBackend,
              user_prompt: str, kind: str, question: str | None,
              decoding: DecodingParams) -> PatchDescription:
    data, _ = tile_bytes(bundle, patch)
    try:
        text = backend.describe(data, PERCEPTOR_SYSTEM_PROMPT, user_prompt, decoding)
    except Exception as exc:
        raise DescriptionFailedError(
            f"description failed for mag={patch.magnification} loc={patch.loc}: {exc}",
            patch) from exc
    if not text.strip():
        raise DescriptionFailedError(
            f"empty description for mag={patch.magnification} loc={patch.loc}", patch)
    return PatchDescription(patch, text, kind, question)


def describe(patch: Patch, bundle: SlideBundle, backend: VisionChatBackend,
             decoding: DecodingParams = GREEDY) -> PatchDescription:
    """Generic morphology description of one patch."""
    return _describe(patch, bundle, backend, GENERIC_PROMPT, KIND_GENERIC, None, decoding)


def describe_guided(patch: Patch, bundle: SlideBundle, question: str,
                    backend: VisionChatBackend,
                    decoding: DecodingParams = GREEDY) -> PatchDescription:
    """Question-guided description of one patch."""
    return _describe(patch, bundle, backend, guided_prompt(question), KIND_GUIDED,
                     question, decoding)


def describe_batch(patches: list[Patch], bundle: SlideBundle, question: str,
                   backend: VisionChatBackend, top_m: int = DEFAULT_TOP_GUIDED,
                   decoding: DecodingParams = GREEDY) -> list[PatchDescription]:
    """Describe a relevance-ordered batch: guided prompts for the first top_m, generic after.

    Output order matches input order. A failed patch yields a placeholder
    entry (text ``DESCRIPTION_UNAVAILABLE``) so one flaky call cannot abort
    the batch; if every patch fails the batch itself fails.
    """
    if not patches:
        return []
    results: list[PatchDescription | None] = [None] * len(patches)
    guided_cutoff = min(max(top_m, 0), len(patches))

    def one(i: int) -> None:
        patch = patches[i]
        guided = i < guided_cutoff
        try:
            if guided:
                results[i] = describe_guided(patch, bundle, question, backend, decoding)
            else:
                results[i] = describe(patch, bundle, backend, decoding)
        except DescriptionFailedError:
            results[i] = PatchDescription(
                patch, DESCRIPTION_UNAVAILABLE,
                KIND_GUIDED if guided else KIND_GENERIC,
                question if guided else None)

    workers = max(1, getattr(backend, "concurrency", 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(one, range(len(patches))))
    out = [r for r in results if r is not None]
    if all(not d.available for d in out):
        raise BatchFailedError(f"all {len(patches)} descriptions failed")
    return out
