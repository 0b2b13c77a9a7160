"""Description prompts, guided/generic split, and batch failure tolerance."""

from __future__ import annotations

from pathlib import Path

import pytest

from slideagent.backends import (
    ScriptRule,
    ScriptedVisionChatBackend,
    cached,
    content_hash,
)
from slideagent.perceptor import (
    DESCRIPTION_UNAVAILABLE,
    GENERIC_PROMPT,
    GUIDED_PROMPT_TEMPLATE,
    KIND_GENERIC,
    KIND_GUIDED,
    PERCEPTOR_SYSTEM_PROMPT,
    BatchFailedError,
    DescriptionFailedError,
    describe,
    describe_batch,
    describe_guided,
    guided_prompt,
)
from slideagent.slides import patches_at, tile_bytes

GOLDEN = Path(__file__).parent / "golden"


class TestGoldenPrompts:
    def test_system_prompt_byte_match(self):
        golden = (GOLDEN / "perceptor_system.txt").read_bytes().decode("utf-8")
        assert PERCEPTOR_SYSTEM_PROMPT == golden

    def test_generic_user_prompt_byte_match(self):
        golden = (GOLDEN / "perceptor_generic_user.txt").read_bytes().decode("utf-8")
        assert GENERIC_PROMPT == golden

    def test_guided_template_byte_match(self):
        golden = (GOLDEN / "perceptor_guided_user_template.txt").read_bytes().decode("utf-8")
        assert GUIDED_PROMPT_TEMPLATE == golden


class TestDescribe:
    def test_passthrough_text(self, small_bundle):
        patch = small_bundle.patch(5, 0, 0)
        tile, _ = tile_bytes(small_bundle, patch)
        backend = ScriptedVisionChatBackend(
            by_image={content_hash(tile): "ductal structures with atypia"})
        result = describe(patch, small_bundle, backend)
        assert result.text == "ductal structures with atypia"
        assert result.prompt_kind == KIND_GENERIC
        assert result.question is None

    def test_empty_response_fails(self, small_bundle):
        patch = small_bundle.patch(5, 0, 0)
        tile, _ = tile_bytes(small_bundle, patch)
        backend = ScriptedVisionChatBackend(by_image={content_hash(tile): ""})
        with pytest.raises(DescriptionFailedError) as err:
            describe(patch, small_bundle, backend)
        assert err.value.patch == patch

    def test_uses_exact_prompts(self, small_bundle):
        seen = {}

        class Spy(ScriptedVisionChatBackend):
            def describe(self, image, system_prompt, user_prompt, decoding=None):
                seen["system"], seen["user"] = system_prompt, user_prompt
                return "text"

        describe(small_bundle.patch(5, 0, 0), small_bundle, Spy())
        assert seen["system"] == PERCEPTOR_SYSTEM_PROMPT
        assert seen["user"] == GENERIC_PROMPT

    def test_cached_backend_one_upstream_call(self, small_bundle, tmp_path):
        patch = small_bundle.patch(5, 1, 1)
        inner = ScriptedVisionChatBackend()
        backend = cached(inner, tmp_path / "cache")
        first = describe(patch, small_bundle, backend)
        second = describe(patch, small_bundle, backend)
        assert first.text == second.text
        assert inner.calls == 1


class TestDescribeGuided:
    def test_question_substituted_verbatim(self, small_bundle):
        seen = {}

        class Spy(ScriptedVisionChatBackend):
            def describe(self, image, system_prompt, user_prompt, decoding=None):
                seen["user"] = user_prompt
                return "text"

        question = 'What grade? ("tricky" line\nbreak included)'
        result = describe_guided(small_bundle.patch(5, 0, 0), small_bundle, question, Spy())
        assert seen["user"] == (
            "Please describe the pathology features related to the question: "
            + question + " in this image.")
        assert result.prompt_kind == KIND_GUIDED
        assert result.question == question

    def test_guided_differs_from_generic(self, small_bundle):
        backend = ScriptedVisionChatBackend(
            rules=[ScriptRule("related to the question", "guided text")],
            default_template="generic text")
        patch = small_bundle.patch(5, 0, 0)
        assert describe_guided(patch, small_bundle, "q?", backend).text == "guided text"
        assert describe(patch, small_bundle, backend).text == "generic text"

    def test_braces_in_question_kept(self):
        assert guided_prompt("what about {format}?") == (
            "Please describe the pathology features related to the question: "
            "what about {format}? in this image.")


class TestDescribeBatch:
    def test_guided_generic_split(self, small_bundle):
        patches = patches_at(small_bundle, 5)[:10]
        backend = ScriptedVisionChatBackend()
        results = describe_batch(patches, small_bundle, "q?", backend, top_m=5)
        kinds = [r.prompt_kind for r in results]
        assert kinds == [KIND_GUIDED] * 5 + [KIND_GENERIC] * 5
        assert [r.patch for r in results] == patches

    def test_short_batch_all_guided(self, small_bundle):
        patches = patches_at(small_bundle, 5)[:3]
        results = describe_batch(patches, small_bundle, "q?", ScriptedVisionChatBackend(),
                                 top_m=5)
        assert [r.prompt_kind for r in results] == [KIND_GUIDED] * 3

    def test_mid_batch_failure_recorded(self, small_bundle):
        patches = patches_at(small_bundle, 5)[:10]
        bad_tile, _ = tile_bytes(small_bundle, patches[4])
        backend = ScriptedVisionChatBackend(by_image={content_hash(bad_tile): ""})
        results = describe_batch(patches, small_bundle, "q?", backend, top_m=5)
        assert len(results) == 10
        assert results[4].text == DESCRIPTION_UNAVAILABLE
        assert not results[4].available
        assert sum(1 for r in results if r.available) == 9

    def test_all_failed_raises(self, small_bundle):
        patches = patches_at(small_bundle, 5)[:4]
        backend = ScriptedVisionChatBackend(default_template=None)  # nothing matches
        with pytest.raises(BatchFailedError):
            describe_batch(patches, small_bundle, "q?", backend)

    def test_order_and_identity_preserved(self, small_bundle):
        # distinct scripted responses per tile hash must land on their own patch
        patches = patches_at(small_bundle, 5)
        by_image = {}
        for patch in patches:
            tile, _ = tile_bytes(small_bundle, patch)
            by_image[content_hash(tile)] = f"desc-{patch.patch_index}"
        backend = ScriptedVisionChatBackend(by_image=by_image)
        backend.concurrency = 4
        results = describe_batch(patches, small_bundle, "q?", backend, top_m=5)
        assert [r.text for r in results] == [f"desc-{p.patch_index}" for p in patches]
