#!/usr/bin/env python3
"""End-to-end demo with scripted backends: builds a synthetic slide, runs one
explore-then-zoom-then-conclude session, and prints the trajectory.

No model endpoints are needed; everything is deterministic. Pass --serve to
leave an HTTP service running on the demo data instead (for the steering
console), with a scripted-backend config written next to the slides.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from slideagent.backends import (
    Backends,
    ScriptRule,
    ScriptedEmbeddingBackend,
    ScriptedTextChatBackend,
    ScriptedVisionChatBackend,
)
from slideagent.session import SessionConfig, run_session
from slideagent.slides import write_bundle

PREDICT = '{"answer": "Grade II/III", "thinking_steps": "dense nuclei and duct distortion point to an intermediate grade"}'
FINAL = '{"answer": "Grade III/III", "thinking_steps": "magnified field shows frequent mitoses and marked pleomorphism on top of the dense low-power pattern"}'
EXPLORE_ZOOM = json.dumps({
    "missing_info": "mitotic figures and nuclear pleomorphism",
    "zoom_recommendation": "Yes",
    "recommended_zoom_level": 20,
    "zoom_reason": "mitotic counting needs cellular detail",
})

EXECUTOR_SCRIPT = [
    {"contains": "judge whether the current patch descriptions", "response": '{"sufficient": "No"}', "times": 1},
    {"contains": "judge whether the current patch descriptions", "response": '{"sufficient": "Yes"}'},
    {"contains": "specify what visual evidence is missing", "response": EXPLORE_ZOOM},
    {"contains": "slide-level diagnostic result", "response": FINAL},
    {"contains": "trying to answer the question step-by-step", "response": PREDICT},
]


def demo_backends() -> Backends:
    rules = [ScriptRule(r["contains"], r["response"], r.get("times"))
             for r in EXECUTOR_SCRIPT]
    return Backends(
        embedder=ScriptedEmbeddingBackend(dim=64),
        perceptor=ScriptedVisionChatBackend(
            default_template="H&E field {image_hash}: cohesive epithelial nests, {prompt_kind} view"),
        executor=ScriptedTextChatBackend(rules),
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", help="where to put the demo slide (default: temp dir)")
    parser.add_argument("--serve", action="store_true",
                        help="start the HTTP service on the demo data instead")
    parser.add_argument("--port", type=int, default=8008)
    args = parser.parse_args(argv)

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="slideagent-demo-"))
    slides_dir = workdir / "slides"
    bundle = write_bundle(slides_dir / "demo-breast", "demo-breast",
                          [(5, 6, 5), (20, 24, 20)], tile_size_px=64)

    if args.serve:
        config = {
            "navigator": {"type": "scripted", "dim": 64},
            "perceptor": {"type": "scripted",
                          "default_template": "H&E field {image_hash}: cohesive epithelial nests"},
            "executor": {"type": "scripted", "script": EXECUTOR_SCRIPT},
        }
        config_path = workdir / "scripted-config.json"
        config_path.write_text(json.dumps(config, indent=2))
        print(f"slides: {slides_dir}\nconfig: {config_path}")
        from slideagent.cli import main as cli_main
        return cli_main(["serve", "--slides", str(slides_dir),
                         "--sessions", str(workdir / "sessions"),
                         "--config", str(config_path), "--port", str(args.port)])

    trajectory_path = workdir / "demo-trajectory.jsonl"
    trajectory = run_session(
        bundle, "What nuclear grade is present in the invasive component?",
        demo_backends(), SessionConfig(), trajectory_path=trajectory_path)

    for step in trajectory.steps:
        print(f"--- iteration {step.state.iteration} "
              f"({len(step.state.entries)} evidence entries)")
        for entry in step.state.entries[:3]:
            print(f"    mag={entry.magnification}x loc=({entry.col},{entry.row}): "
                  f"{entry.text[:70]}")
        if step.action:
            print(f"    action: {step.action.action}")
    print(f"final answer: {trajectory.final.answer}")
    print(f"reasoning:    {trajectory.final.reasoning_chain}")
    print(f"trajectory:   {trajectory_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
