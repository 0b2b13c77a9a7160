"""Model backends for the three roles: embedder (retrieval), vision chat (description), text chat (reasoning).

One wire protocol serves all roles: an OpenAI-compatible gateway exposing
``/chat/completions`` and ``/embeddings``. A deterministic scripted backend
stands in for live models in tests, and a disk cache can wrap any backend.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0
DEFAULT_RETRIES = 3
DEFAULT_CONCURRENCY = 4
ENV_PREFIX = "SLIDE_AGENT"
ROLES = ("navigator", "perceptor", "executor")


class BackendError(Exception):
    """Base class for model backend failures."""


class BackendHTTPError(BackendError):
    """Non-retryable HTTP failure (4xx) or retry budget exhausted."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class BackendTimeoutError(BackendError):
    """Request exceeded the configured timeout."""


class MalformedResponseError(BackendError):
    """Server replied 200 with a body that does not match the wire protocol."""


class BackendRefusalError(BackendError):
    """Model returned an empty completion."""


class ScriptExhaustedError(BackendError):
    """No scripted rule matches the request."""


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None


GREEDY = DecodingParams()


class EmbeddingBackend(ABC):
    """Maps images and text into one joint embedding space of fixed dimension."""

    model_id: str = "embedder"
    concurrency: int = DEFAULT_CONCURRENCY

    @abstractmethod
    def embed_image(self, image: bytes) -> list[float]: ...

    @abstractmethod
    def embed_text(self, text: str) -> list[float]: ...


class VisionChatBackend(ABC):
    """Produces a textual description of one image under a prompt pair."""

    model_id: str = "vision"
    concurrency: int = DEFAULT_CONCURRENCY

    @abstractmethod
    def describe(self, image: bytes, system_prompt: str, user_prompt: str,
                 decoding: DecodingParams = GREEDY) -> str: ...


class TextChatBackend(ABC):
    """Text-only chat completion."""

    model_id: str = "text"
    concurrency: int = DEFAULT_CONCURRENCY

    @abstractmethod
    def complete(self, system_prompt: str, user_prompt: str,
                 decoding: DecodingParams = GREEDY) -> str: ...


@dataclass
class Backends:
    """The three-role suite a session runs against."""

    embedder: EmbeddingBackend
    perceptor: VisionChatBackend
    executor: TextChatBackend


# ---------------------------------------------------------------------------
# HTTP backends (OpenAI-compatible chat + embeddings)
# ---------------------------------------------------------------------------

@dataclass
class EndpointConfig:
    url: str
    model: str
    api_key: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES
    concurrency: int = DEFAULT_CONCURRENCY
    backoff_base: float = 0.5


def sniff_media_type(image: bytes) -> str:
    if image[:3] == b"\xff\xd8\xff":
        return "image/jpeg"
    return "image/png"


def _image_data_url(image: bytes) -> str:
    b64 = base64.b64encode(image).decode("ascii")
    return f"data:{sniff_media_type(image)};base64,{b64}"


def _post_json(config: EndpointConfig, path: str, payload: dict) -> dict:
    """POST with retry on transient failures: connection errors and 5xx.

    Backoff doubles from ``backoff_base`` (0.5s, 1s, 2s by default). 4xx is
    non-retryable; a timeout raises immediately since the budget is already
    spent waiting.
    """
    url = config.url.rstrip("/") + "/" + path.lstrip("/")
    headers = {"Content-Type": "application/json"}
    if config.api_key:
        headers["Authorization"] = f"Bearer {config.api_key}"
    last_error: Exception | None = None
    for attempt in range(config.retries + 1):
        if attempt > 0:
            time.sleep(config.backoff_base * (2 ** (attempt - 1)))
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=config.timeout)
        except requests.Timeout as exc:
            raise BackendTimeoutError(f"{url} timed out after {config.timeout}s") from exc
        except requests.RequestException as exc:
            last_error = exc
            continue
        if resp.status_code >= 500:
            last_error = BackendHTTPError(f"{url} returned {resp.status_code}", resp.status_code)
            continue
        if resp.status_code >= 400:
            raise BackendHTTPError(
                f"{url} returned {resp.status_code}: {resp.text[:200]}", resp.status_code
            )
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponseError(f"{url} returned non-JSON body") from exc
    raise BackendHTTPError(
        f"{url} failed after {config.retries + 1} attempts: {last_error}",
        getattr(last_error, "status", None),
    )


def _chat_content(body: dict, url: str) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(f"{url}: missing choices[0].message.content") from exc
    if not isinstance(content, str) or content.strip() == "":
        raise BackendRefusalError(f"{url}: model returned an empty completion")
    return content


def _chat_payload(config: EndpointConfig, messages: list[dict], decoding: DecodingParams) -> dict:
    payload = {
        "model": config.model,
        "messages": messages,
        "temperature": decoding.temperature,
        "max_tokens": decoding.max_tokens,
    }
    if decoding.seed is not None:
        payload["seed"] = decoding.seed
    return payload


class HttpEmbeddingBackend(EmbeddingBackend):
    def __init__(self, config: EndpointConfig):
        self.config = config
        self.model_id = config.model
        self.concurrency = config.concurrency

    def _embed(self, item: str) -> list[float]:
        body = _post_json(self.config, "embeddings", {"model": self.config.model, "input": [item]})
        try:
            vector = body["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("embeddings response missing data[0].embedding") from exc
        if not isinstance(vector, list) or not vector:
            raise MalformedResponseError("embedding is not a non-empty list")
        return [float(v) for v in vector]

    def embed_image(self, image: bytes) -> list[float]:
        return self._embed(_image_data_url(image))

    def embed_text(self, text: str) -> list[float]:
        return self._embed(text)


class HttpVisionChatBackend(VisionChatBackend):
    def __init__(self, config: EndpointConfig):
        self.config = config
        self.model_id = config.model
        self.concurrency = config.concurrency

    def describe(self, image: bytes, system_prompt: str, user_prompt: str,
                 decoding: DecodingParams = GREEDY) -> str:
        messages = [
            {"role": "system", "content": system_prompt},
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": user_prompt},
                    {"type": "image_url", "image_url": {"url": _image_data_url(image)}},
                ],
            },
        ]
        body = _post_json(self.config, "chat/completions", _chat_payload(self.config, messages, decoding))
        return _chat_content(body, self.config.url)


class HttpTextChatBackend(TextChatBackend):
    def __init__(self, config: EndpointConfig):
        self.config = config
        self.model_id = config.model
        self.concurrency = config.concurrency

    def complete(self, system_prompt: str, user_prompt: str,
                 decoding: DecodingParams = GREEDY) -> str:
        messages = [
            {"role": "system", "content": system_prompt},
            {"role": "user", "content": user_prompt},
        ]
        body = _post_json(self.config, "chat/completions", _chat_payload(self.config, messages, decoding))
        return _chat_content(body, self.config.url)


# ---------------------------------------------------------------------------
# Scripted backends (deterministic test doubles)
# ---------------------------------------------------------------------------

def content_hash(content: bytes | str) -> str:
    if isinstance(content, str):
        content = content.encode("utf-8")
    return hashlib.sha256(content).hexdigest()


@dataclass
class ScriptRule:
    """Canned response served when ``contains`` is a substring of the prompt.

    ``times=None`` means unlimited; an empty response simulates a refusal.
    """

    contains: str
    response: str
    times: int | None = None


class _RuleMatcher:
    def __init__(self, rules: list[ScriptRule]):
        self._rules = [ScriptRule(r.contains, r.response, r.times) for r in rules]
        self._lock = threading.Lock()

    def match(self, prompt: str) -> str | None:
        with self._lock:
            for rule in self._rules:
                if rule.contains in prompt and (rule.times is None or rule.times > 0):
                    if rule.times is not None:
                        rule.times -= 1
                    return rule.response
        return None


class ScriptedEmbeddingBackend(EmbeddingBackend):
    """Deterministic embeddings: fixed vectors by content hash, else hash-seeded noise."""

    def __init__(self, dim: int = 64, by_hash: dict[str, list[float]] | None = None,
                 model_id: str = "scripted-embedder"):
        self.dim = dim
        self.by_hash = dict(by_hash or {})
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()

    def _vector(self, content: bytes | str) -> list[float]:
        with self._lock:
            self.calls += 1
        digest = content_hash(content)
        if digest in self.by_hash:
            return list(self.by_hash[digest])
        rng = np.random.default_rng(int(digest[:12], 16))
        return rng.standard_normal(self.dim).tolist()

    def embed_image(self, image: bytes) -> list[float]:
        return self._vector(image)

    def embed_text(self, text: str) -> list[float]:
        return self._vector(text)


class ScriptedVisionChatBackend(VisionChatBackend):
    """Deterministic descriptions keyed by tile content hash, then prompt rules.

    Without a match, ``default_template`` is formatted with ``{image_hash}``
    (first 12 hex chars) and ``{prompt_kind}`` so distinct tiles always get
    distinct, reproducible text.
    """

    def __init__(self, rules: list[ScriptRule] | None = None,
                 by_image: dict[str, str] | None = None,
                 default_template: str | None = "tissue region {image_hash}",
                 model_id: str = "scripted-vision"):
        self._matcher = _RuleMatcher(rules or [])
        self.by_image = dict(by_image or {})
        self.default_template = default_template
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()

    def describe(self, image: bytes, system_prompt: str, user_prompt: str,
                 decoding: DecodingParams = GREEDY) -> str:
        with self._lock:
            self.calls += 1
        digest = content_hash(image)
        response: str | None
        if digest in self.by_image:
            response = self.by_image[digest]
        else:
            response = self._matcher.match(system_prompt + "\n" + user_prompt)
            if response is None and self.default_template is not None:
                kind = "question_guided" if "related to the question" in user_prompt else "generic"
                response = self.default_template.format(image_hash=digest[:12], prompt_kind=kind)
        if response is None:
            raise ScriptExhaustedError(f"no scripted description for prompt: {user_prompt[:80]!r}")
        if response == "":
            raise BackendRefusalError("scripted refusal (empty description)")
        return response


class ScriptedTextChatBackend(TextChatBackend):
    """Deterministic completions served from ordered substring rules."""

    def __init__(self, rules: list[ScriptRule], model_id: str = "scripted-text"):
        self._matcher = _RuleMatcher(rules)
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, system_prompt: str, user_prompt: str,
                 decoding: DecodingParams = GREEDY) -> str:
        with self._lock:
            self.calls += 1
        response = self._matcher.match(system_prompt + "\n" + user_prompt)
        if response is None:
            raise ScriptExhaustedError(f"script exhausted for prompt: {user_prompt[:80]!r}")
        if response == "":
            raise BackendRefusalError("scripted refusal (empty completion)")
        return response


# ---------------------------------------------------------------------------
# Disk cache
# ---------------------------------------------------------------------------

class _DiskCache:
    """One JSON file per key; atomic writes; corrupt entries are recomputed."""

    def __init__(self, cache_dir: str | Path):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def key(role: str, model_id: str, parts: dict) -> str:
        blob = json.dumps({"role": role, "model": model_id, **parts}, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str) -> dict | None:
        path = self.dir / f"{key}.json"
        if not path.is_file():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError, OSError):
            logger.warning("ignoring corrupt cache entry %s", path.name)
            return None

    def put(self, key: str, value: dict) -> None:
        path = self.dir / f"{key}.json"
        with self._lock:
            fd, tmp = tempfile.mkstemp(dir=self.dir, suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(value, fh)
                os.replace(tmp, path)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)


def _decoding_parts(decoding: DecodingParams) -> dict:
    return {"temperature": decoding.temperature, "max_tokens": decoding.max_tokens,
            "seed": decoding.seed}


class CachedEmbeddingBackend(EmbeddingBackend):
    def __init__(self, inner: EmbeddingBackend, cache: _DiskCache):
        self.inner = inner
        self.cache = cache
        self.model_id = inner.model_id
        self.concurrency = inner.concurrency

    def _cached(self, kind: str, content: bytes | str, compute) -> list[float]:
        key = self.cache.key("embed", self.model_id, {"kind": kind, "content": content_hash(content)})
        hit = self.cache.get(key)
        if hit is not None and isinstance(hit.get("vector"), list):
            return [float(v) for v in hit["vector"]]
        vector = compute()
        self.cache.put(key, {"vector": vector})
        return vector

    def embed_image(self, image: bytes) -> list[float]:
        return self._cached("image", image, lambda: self.inner.embed_image(image))

    def embed_text(self, text: str) -> list[float]:
        return self._cached("text", text, lambda: self.inner.embed_text(text))


class CachedVisionChatBackend(VisionChatBackend):
    def __init__(self, inner: VisionChatBackend, cache: _DiskCache):
        self.inner = inner
        self.cache = cache
        self.model_id = inner.model_id
        self.concurrency = inner.concurrency

    def describe(self, image: bytes, system_prompt: str, user_prompt: str,
                 decoding: DecodingParams = GREEDY) -> str:
        key = self.cache.key("describe", self.model_id, {
            "system": system_prompt, "user": user_prompt,
            "image": content_hash(image), **_decoding_parts(decoding),
        })
        hit = self.cache.get(key)
        if hit is not None and isinstance(hit.get("response"), str):
            return hit["response"]
        response = self.inner.describe(image, system_prompt, user_prompt, decoding)
        self.cache.put(key, {"response": response})
        return response


class CachedTextChatBackend(TextChatBackend):
    def __init__(self, inner: TextChatBackend, cache: _DiskCache):
        self.inner = inner
        self.cache = cache
        self.model_id = inner.model_id
        self.concurrency = inner.concurrency

    def complete(self, system_prompt: str, user_prompt: str,
                 decoding: DecodingParams = GREEDY) -> str:
        key = self.cache.key("complete", self.model_id, {
            "system": system_prompt, "user": user_prompt, **_decoding_parts(decoding),
        })
        hit = self.cache.get(key)
        if hit is not None and isinstance(hit.get("response"), str):
            return hit["response"]
        response = self.inner.complete(system_prompt, user_prompt, decoding)
        self.cache.put(key, {"response": response})
        return response


def cached(backend, cache_dir: str | Path):
    """Wrap any backend with a content-addressed disk cache."""
    cache = _DiskCache(cache_dir)
    if isinstance(backend, EmbeddingBackend):
        return CachedEmbeddingBackend(backend, cache)
    if isinstance(backend, VisionChatBackend):
        return CachedVisionChatBackend(backend, cache)
    if isinstance(backend, TextChatBackend):
        return CachedTextChatBackend(backend, cache)
    raise TypeError(f"cannot cache backend of type {type(backend).__name__}")


# ---------------------------------------------------------------------------
# Role configuration (file + environment overrides)
# ---------------------------------------------------------------------------

def _env_override(role: str, key: str) -> str | None:
    return os.environ.get(f"{ENV_PREFIX}_{role.upper()}_{key.upper()}")


def build_role_backend(role: str, spec: dict, cache_dir: str | Path | None = None):
    """Construct one role's backend from its config dict, honoring env overrides.

    Env vars SLIDE_AGENT_{ROLE}_{URL|MODEL|KEY} take precedence over the file.
    ``type`` is "http" (default) or "scripted" for canned demo/test backends.
    """
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    spec = dict(spec)
    for file_key, env_key in (("url", "URL"), ("model", "MODEL"), ("api_key", "KEY")):
        override = _env_override(role, env_key)
        if override:
            spec[file_key] = override

    kind = spec.get("type", "http")
    if kind == "scripted":
        if role == "navigator":
            backend = ScriptedEmbeddingBackend(dim=int(spec.get("dim", 64)))
        else:
            rules = [ScriptRule(r["contains"], r["response"], r.get("times"))
                     for r in spec.get("script", [])]
            if role == "perceptor":
                backend = ScriptedVisionChatBackend(
                    rules, default_template=spec.get("default_template", "tissue region {image_hash}"))
            else:
                backend = ScriptedTextChatBackend(rules)
    elif kind == "http":
        url = spec.get("url")
        if not url:
            raise BackendError(
                f"{role} backend has no URL (set it in the config file or "
                f"{ENV_PREFIX}_{role.upper()}_URL)")
        config = EndpointConfig(
            url=url,
            model=spec.get("model", ""),
            api_key=spec.get("api_key"),
            timeout=float(spec.get("timeout", DEFAULT_TIMEOUT)),
            retries=int(spec.get("retries", DEFAULT_RETRIES)),
            concurrency=int(spec.get("concurrency", DEFAULT_CONCURRENCY)),
        )
        if role == "navigator":
            backend = HttpEmbeddingBackend(config)
        elif role == "perceptor":
            backend = HttpVisionChatBackend(config)
        else:
            backend = HttpTextChatBackend(config)
    else:
        raise BackendError(f"unknown backend type {kind!r} for role {role}")

    if cache_dir is not None:
        backend = cached(backend, Path(cache_dir) / role)
    return backend


def build_backends(config: dict, cache_dir: str | Path | None = None) -> Backends:
    """Build the full three-role suite from a config mapping."""
    return Backends(
        embedder=build_role_backend("navigator", config.get("navigator", {}), cache_dir),
        perceptor=build_role_backend("perceptor", config.get("perceptor", {}), cache_dir),
        executor=build_role_backend("executor", config.get("executor", {}), cache_dir),
    )
