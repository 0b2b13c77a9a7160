"""Command-line entry points: embed, ask, eval, serve.

Exit codes: 0 success, 1 usage error, 2 runtime failure. A JSON config file
(``--config``) provides per-role backend settings and session defaults;
SLIDE_AGENT_{NAVIGATOR|PERCEPTOR|EXECUTOR}_{URL|MODEL|KEY} env vars override
the file.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path

from .backends import BackendError, Backends, build_backends
from .metrics import DatasetError, EvalOutcome, MetricsError, QARecord, run_eval
from .navigator import NavigatorError, ensure_index
from .session import Session, SessionConfig, SessionError, run_session
from .slides import BundleError, load_bundle

USAGE_EXIT = 1
RUNTIME_EXIT = 2

_RUNTIME_ERRORS = (BundleError, BackendError, NavigatorError, SessionError,
                   MetricsError, DatasetError, OSError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    config = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(config, dict):
        raise ValueError("config file must contain a JSON object")
    return config


def make_backends(config: dict) -> Backends:
    return build_backends(config, cache_dir=config.get("cache_dir"))


def make_session_config(config: dict, interactive: bool | None = None) -> SessionConfig:
    session_config = SessionConfig.from_dict(config.get("session", {}))
    if interactive is not None:
        session_config.interactive = interactive
    return session_config


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slideagent",
                     description="Iterative whole-slide-image question answering")
    sub = parser.add_subparsers(dest="command", required=True)

    embed = sub.add_parser("embed", help="build the patch embedding index for one level")
    embed.add_argument("--slide", required=True, help="slide bundle directory")
    embed.add_argument("--mag", required=True, type=int, help="magnification level")
    embed.add_argument("--config", help="JSON config file")

    ask = sub.add_parser("ask", help="answer one question about a slide")
    ask.add_argument("--slide", required=True, help="slide bundle directory")
    ask.add_argument("--question", required=True)
    ask.add_argument("--options", help="comma-separated answer options")
    ask.add_argument("--interactive", action="store_true",
                     help="pause at checkpoints for steering commands")
    ask.add_argument("--out", help="trajectory output path (JSONL)")
    ask.add_argument("--config", help="JSON config file")

    evaluate = sub.add_parser("eval", help="run a VQA dataset")
    evaluate.add_argument("--dataset", required=True, help="JSONL dataset file")
    evaluate.add_argument("--slides", required=True, help="directory of slide bundles")
    evaluate.add_argument("--out", required=True, help="results JSONL path")
    evaluate.add_argument("--config", help="JSON config file")

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--port", type=int, default=8008)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--slides", required=True, help="directory of slide bundles")
    serve.add_argument("--sessions", help="directory for session trajectories")
    serve.add_argument("--config", help="JSON config file")

    return parser


def cmd_embed(args) -> int:
    config = load_config(args.config)
    backends = make_backends(config)
    bundle = load_bundle(args.slide)
    index = ensure_index(bundle, args.mag, backends.embedder, persist=True)
    level = index.level(args.mag)
    print(f"indexed {level.vectors.shape[0]} patches at {args.mag}x "
          f"(d={level.vectors.shape[1]}) -> {bundle.root / 'embeddings'}")
    return 0


def _steer(session: Session) -> None:
    """Minimal checkpoint REPL for interactive ask."""
    commands = ("commands: resume | rois c,r c,r ... | "
                "edit <iter> <mag> <col> <row> <text> | note <text> | "
                "mag <level> | finalize")
    while True:
        checkpoint = session.advance()
        if checkpoint is None:
            return
        print(f"[paused] {checkpoint.kind} at iteration {checkpoint.iteration}"
              + (f", pending action {checkpoint.action}" if checkpoint.action else ""))
        if checkpoint.pending:
            locs = " ".join(f"({p.col},{p.row})" for p in checkpoint.pending)
            print(f"  pending patches: {locs}")
        print("  " + commands)
        while True:
            try:
                line = input("steer> ").strip()
            except EOFError:
                line = "resume"
            if not line or line == "resume":
                break
            try:
                parts = shlex.split(line)
                kind, rest = parts[0], parts[1:]
                if kind == "rois":
                    mag = session.config.initial_magnification
                    patches = [{"magnification": mag,
                                "col": int(c.split(",")[0]), "row": int(c.split(",")[1])}
                               for c in rest]
                    session.apply_intervention("select_rois", {"patches": patches})
                elif kind == "edit":
                    session.apply_intervention("edit_description", {
                        "iteration": int(rest[0]), "magnification": int(rest[1]),
                        "col": int(rest[2]), "row": int(rest[3]),
                        "text": " ".join(rest[4:])})
                elif kind == "note":
                    session.apply_intervention("inject_note", {"text": " ".join(rest)})
                elif kind == "mag":
                    session.apply_intervention("set_magnification",
                                               {"magnification": int(rest[0])})
                elif kind == "finalize":
                    session.apply_intervention("finalize", {})
                else:
                    print(f"unknown command {kind!r}; {commands}")
                    continue
                print("applied")
            except (SessionError, ValueError, IndexError) as exc:
                print(f"rejected: {exc}")


def cmd_ask(args) -> int:
    config = load_config(args.config)
    backends = make_backends(config)
    session_config = make_session_config(config, interactive=args.interactive)
    bundle = load_bundle(args.slide)
    options = [o.strip() for o in args.options.split(",")] if args.options else None
    trajectory_path = args.out or f"{bundle.slide_id}-trajectory.jsonl"

    session = Session(bundle, args.question, backends, session_config,
                      options=options, trajectory_path=trajectory_path)
    if args.interactive:
        _steer(session)
    else:
        session.run()
    trajectory = session.trajectory()
    if trajectory.final is None:
        sys.stderr.write(f"session ended without an answer: {session.error}\n")
        return RUNTIME_EXIT
    print(f"answer: {trajectory.final.answer}")
    print(f"iterations: {trajectory.final.iterations_used}")
    print(f"reasoning: {trajectory.final.reasoning_chain}")
    print(f"trajectory: {trajectory_path}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    backends = make_backends(config)
    session_config = make_session_config(config, interactive=False)
    slides_dir = Path(args.slides)
    out_path = Path(args.out)
    trajectories_dir = out_path.parent / (out_path.stem + "-trajectories")
    bundles = {}

    def runner(record: QARecord) -> EvalOutcome:
        if record.slide_id not in bundles:
            bundles[record.slide_id] = load_bundle(slides_dir / record.slide_id)
        trajectory_path = trajectories_dir / f"{record.record_id}.jsonl"
        trajectory = run_session(
            bundles[record.slide_id], record.question, backends, session_config,
            options=list(record.options) or None, trajectory_path=trajectory_path)
        return EvalOutcome(trajectory.final.answer, str(trajectory_path))

    report = run_eval(args.dataset, runner, out_path)
    print(report.table())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = load_config(args.config)
    backends = make_backends(config)
    sessions_dir = args.sessions or config.get("sessions_dir", "sessions")
    app = create_app(args.slides, backends, sessions_dir,
                     make_session_config(config))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"embed": cmd_embed, "ask": cmd_ask, "eval": cmd_eval,
               "serve": cmd_serve}[args.command]
    try:
        return handler(args)
    except _RUNTIME_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return RUNTIME_EXIT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
