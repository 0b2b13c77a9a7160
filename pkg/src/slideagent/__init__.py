"""Iterative whole-slide-image question answering agent with human steering."""

from .backends import (
    Backends,
    DecodingParams,
    EmbeddingBackend,
    ScriptRule,
    ScriptedEmbeddingBackend,
    ScriptedTextChatBackend,
    ScriptedVisionChatBackend,
    TextChatBackend,
    VisionChatBackend,
    build_backends,
    cached,
)
from .records import Trajectory, load_trajectory, persist_trajectory
from .session import Session, SessionConfig, merge_states, run_session
from .slides import Patch, SlideBundle, load_bundle, magnify_patch, patches_at, tile_bytes, write_bundle

__version__ = "0.1.0"

__all__ = [
    "Backends",
    "DecodingParams",
    "EmbeddingBackend",
    "Patch",
    "ScriptRule",
    "ScriptedEmbeddingBackend",
    "ScriptedTextChatBackend",
    "ScriptedVisionChatBackend",
    "Session",
    "SessionConfig",
    "SlideBundle",
    "TextChatBackend",
    "Trajectory",
    "VisionChatBackend",
    "build_backends",
    "cached",
    "load_bundle",
    "load_trajectory",
    "magnify_patch",
    "merge_states",
    "patches_at",
    "persist_trajectory",
    "run_session",
    "tile_bytes",
    "write_bundle",
]
