"""Shared fixtures: synthetic bundles and scripted backend suites."""

from __future__ import annotations

import pytest

from slideagent.backends import (
    Backends,
    ScriptedEmbeddingBackend,
    ScriptedTextChatBackend,
    ScriptedVisionChatBackend,
    ScriptRule,
)
from slideagent.slides import write_bundle

# Substrings that uniquely identify each reasoning step's system prompt.
PREDICT_MARK = "trying to answer the question step-by-step"
REFLECT_MARK = "judge whether the current patch descriptions are sufficient"
EXPLORE_MARK = "specify what visual evidence is missing"
FINAL_MARK = "slide-level diagnostic result"

PREDICT_JSON = '{"answer": "Grade II/III", "thinking_steps": "dense nuclei suggest a mid grade"}'
FINAL_JSON = '{"answer": "Grade III/III", "thinking_steps": "mitoses and pleomorphism support the top grade"}'


def reflect_json(sufficient: str) -> str:
    return '{"sufficient": "%s"}' % sufficient


def explore_json(missing_info: str = "mitotic figures", zoom: str = "No",
                 level="None", reason: str = "") -> str:
    import json
    return json.dumps({
        "missing_info": missing_info,
        "zoom_recommendation": zoom,
        "recommended_zoom_level": level,
        "zoom_reason": reason,
    })


def executor_script(reflect_sequence: list[str], explore_responses: list[str] | None = None,
                    predict_json: str = PREDICT_JSON,
                    final_json: str = FINAL_JSON) -> ScriptedTextChatBackend:
    """Scripted reasoning backend: one reflect verdict per entry, in order."""
    rules = [ScriptRule(REFLECT_MARK, reflect_json(v), times=1) for v in reflect_sequence]
    for response in explore_responses or []:
        rules.append(ScriptRule(EXPLORE_MARK, response, times=1))
    rules.append(ScriptRule(EXPLORE_MARK, explore_json()))
    rules.append(ScriptRule(FINAL_MARK, final_json))
    rules.append(ScriptRule(PREDICT_MARK, predict_json))
    return ScriptedTextChatBackend(rules)


def scripted_backends(reflect_sequence: list[str],
                      explore_responses: list[str] | None = None,
                      dim: int = 32) -> Backends:
    return Backends(
        embedder=ScriptedEmbeddingBackend(dim=dim),
        perceptor=ScriptedVisionChatBackend(),
        executor=executor_script(reflect_sequence, explore_responses),
    )


@pytest.fixture
def small_bundle(tmp_path):
    """4x3 grid at 5x with a 16x12 grid at 20x (ratio 4)."""
    return write_bundle(tmp_path / "slide-small", "slide-small",
                        [(5, 4, 3), (20, 16, 12)], tile_size_px=16)


@pytest.fixture
def grid10_bundle(tmp_path):
    """10x10 grid at 5x only (100 patches)."""
    return write_bundle(tmp_path / "slide-grid10", "slide-grid10",
                        [(5, 10, 10)], tile_size_px=16)


@pytest.fixture
def pyramid_bundle(tmp_path):
    """Three levels: 2x2@5x, 8x8@20x, 16x16@40x."""
    return write_bundle(tmp_path / "slide-pyr", "slide-pyr",
                        [(5, 2, 2), (20, 8, 8), (40, 16, 16)], tile_size_px=16)


@pytest.fixture
def vision_backend():
    return ScriptedVisionChatBackend()


@pytest.fixture
def embed_backend():
    return ScriptedEmbeddingBackend(dim=32)


# Collect acceptance-criterion outcomes and print one pass/fail line each at
# the end of the run.
def pytest_configure(config):
    config._acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    setattr(item, f"rep_{report.when}", report)
    if report.when == "call" and item.module.__name__ == "test_acceptance":
        item.config._acceptance_results.append((item.name, report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance_results", [])
    if results:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, passed in results:
            terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}")
