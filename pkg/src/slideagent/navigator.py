"""Query-guided patch retrieval: embedding index, relevance scoring, and top-k sampling.

Relevance is cosine similarity between unit-normalized patch and query
embeddings. Sampling excludes already-examined patches and breaks score ties
by ascending patch index so replays are deterministic.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .backends import EmbeddingBackend
from .slides import Patch, SlideBundle, patches_at, tile_bytes

EMBED_DIR = "embeddings"
UNIT_NORM_TOL = 1e-6


class NavigatorError(Exception):
    """Base class for retrieval failures."""


class MissingEmbeddingError(NavigatorError):
    """A candidate patch has no vector in the index."""


class StaleIndexError(NavigatorError):
    """Persisted index was built with a different embedding model."""


class PartialIndexError(NavigatorError):
    """Embedding failed for some patches during index construction."""

    def __init__(self, message: str, failed_indices: list[int]):
        super().__init__(message)
        self.failed_indices = failed_indices


def normalize_vector(vector: list[float] | np.ndarray) -> np.ndarray:
    """Unit-normalize, rejecting NaN/Inf and zero vectors."""
    arr = np.asarray(vector, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise NavigatorError("embedding must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise NavigatorError("embedding contains NaN or Inf")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise NavigatorError("embedding has zero norm")
    return (arr / norm).astype(np.float32)


@dataclass
class IndexLevel:
    magnification: int
    grid_w: int
    grid_h: int
    vectors: np.ndarray  # (patch_count, dim) float32, unit rows, patch_index order


@dataclass
class PatchEmbeddingIndex:
    slide_id: str
    model_id: str
    levels: dict[int, IndexLevel] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        for lv in self.levels.values():
            return int(lv.vectors.shape[1])
        raise NavigatorError("index has no levels")

    def has_level(self, magnification: int) -> bool:
        return magnification in self.levels

    def level(self, magnification: int) -> IndexLevel:
        if magnification not in self.levels:
            raise MissingEmbeddingError(f"no index for {magnification}x")
        return self.levels[magnification]

    def vector(self, patch: Patch) -> np.ndarray:
        lv = self.level(patch.magnification)
        if not (0 <= patch.patch_index < lv.vectors.shape[0]):
            raise MissingEmbeddingError(
                f"patch_index {patch.patch_index} outside {patch.magnification}x index")
        return lv.vectors[patch.patch_index]

    def patches(self, magnification: int) -> list[Patch]:
        lv = self.level(magnification)
        return [
            Patch(self.slide_id, magnification, col, row, row * lv.grid_w + col)
            for row in range(lv.grid_h)
            for col in range(lv.grid_w)
        ]


@dataclass(frozen=True)
class RelevanceScore:
    patch: Patch
    score: float
    iteration: int = 1


class ExclusionSet:
    """Per-level set of patch indices already examined; grows monotonically."""

    def __init__(self):
        self._by_level: dict[int, set[int]] = {}

    def add(self, patches: list[Patch]) -> None:
        for p in patches:
            self._by_level.setdefault(p.magnification, set()).add(p.patch_index)

    def indices(self, magnification: int) -> frozenset[int]:
        return frozenset(self._by_level.get(magnification, set()))

    def contains(self, patch: Patch) -> bool:
        return patch.patch_index in self._by_level.get(patch.magnification, set())

    def count(self, magnification: int) -> int:
        return len(self._by_level.get(magnification, set()))


def _embed_patches(bundle: SlideBundle, patches: list[Patch],
                   embedder: EmbeddingBackend) -> np.ndarray:
    """Embed tiles in parallel (bounded by the backend's concurrency), in patch order."""
    failures: list[int] = []
    rows: list[np.ndarray | None] = [None] * len(patches)

    def embed_one(i: int) -> None:
        try:
            data, _ = tile_bytes(bundle, patches[i])
            rows[i] = normalize_vector(embedder.embed_image(data))
        except Exception:
            failures.append(i)

    workers = max(1, getattr(embedder, "concurrency", 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(embed_one, range(len(patches))))
    if failures:
        failed = sorted(patches[i].patch_index for i in failures)
        raise PartialIndexError(
            f"embedding failed for {len(failed)} patches (indices {failed[:10]})", failed)
    dims = {r.shape[0] for r in rows}  # type: ignore[union-attr]
    if len(dims) != 1:
        raise NavigatorError(f"backend returned mixed embedding dimensions: {sorted(dims)}")
    return np.stack(rows)  # type: ignore[arg-type]


def build_index(bundle: SlideBundle, magnification: int,
                embedder: EmbeddingBackend) -> PatchEmbeddingIndex:
    """Embed every patch of one level into a fresh index."""
    lv = bundle.level(magnification)
    patches = patches_at(bundle, magnification)
    vectors = _embed_patches(bundle, patches, embedder)
    return PatchEmbeddingIndex(
        slide_id=bundle.slide_id,
        model_id=embedder.model_id,
        levels={magnification: IndexLevel(magnification, lv.grid_w, lv.grid_h, vectors)},
    )


def _sidecar_paths(bundle_root: Path, magnification: int) -> tuple[Path, Path]:
    base = bundle_root / EMBED_DIR
    return base / f"{magnification}.bin", base / f"{magnification}.json"


def save_index(index: PatchEmbeddingIndex, bundle_root: str | Path,
               magnification: int) -> Path:
    """Persist one level beside the bundle: little-endian f32 rows in patch_index order."""
    lv = index.level(magnification)
    bin_path, header_path = _sidecar_paths(Path(bundle_root), magnification)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    lv.vectors.astype("<f4").tofile(bin_path)
    header = {
        "model_id": index.model_id,
        "dim": int(lv.vectors.shape[1]),
        "count": int(lv.vectors.shape[0]),
        "magnification": magnification,
        "grid_w": lv.grid_w,
        "grid_h": lv.grid_h,
        "slide_id": index.slide_id,
    }
    header_path.write_text(json.dumps(header, indent=2), encoding="utf-8")
    return bin_path


def load_index(bundle_root: str | Path, magnification: int,
               expected_model_id: str | None = None) -> PatchEmbeddingIndex:
    bin_path, header_path = _sidecar_paths(Path(bundle_root), magnification)
    if not bin_path.is_file() or not header_path.is_file():
        raise MissingEmbeddingError(f"no persisted index for {magnification}x under {bundle_root}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    if expected_model_id is not None and header.get("model_id") != expected_model_id:
        raise StaleIndexError(
            f"index at {magnification}x was built with {header.get('model_id')!r}, "
            f"expected {expected_model_id!r}")
    count, dim = int(header["count"]), int(header["dim"])
    vectors = np.fromfile(bin_path, dtype="<f4")
    if vectors.size != count * dim:
        raise NavigatorError(
            f"index file {bin_path.name} has {vectors.size} floats, expected {count * dim}")
    return PatchEmbeddingIndex(
        slide_id=header.get("slide_id", ""),
        model_id=header["model_id"],
        levels={magnification: IndexLevel(
            magnification, int(header["grid_w"]), int(header["grid_h"]),
            vectors.reshape(count, dim))},
    )


def ensure_index(bundle: SlideBundle, magnification: int,
                 embedder: EmbeddingBackend, persist: bool = True) -> PatchEmbeddingIndex:
    """Load a fresh persisted index if present, else build (and optionally save) one."""
    if bundle.root is not None:
        try:
            index = load_index(bundle.root, magnification, expected_model_id=embedder.model_id)
            index.slide_id = bundle.slide_id
            return index
        except (MissingEmbeddingError, StaleIndexError):
            pass
    index = build_index(bundle, magnification, embedder)
    if persist and bundle.root is not None:
        save_index(index, bundle.root, magnification)
    return index


def embed_query(query: str, embedder: EmbeddingBackend) -> np.ndarray:
    return normalize_vector(embedder.embed_text(query))


def score(index: PatchEmbeddingIndex, query: str, embedder: EmbeddingBackend,
          candidates: list[Patch], iteration: int = 1) -> list[RelevanceScore]:
    """Cosine relevance of each candidate patch to the query text."""
    q = embed_query(query, embedder)
    scores = []
    for patch in candidates:
        v = index.vector(patch)
        scores.append(RelevanceScore(patch, float(np.dot(q, v)), iteration))
    return scores


def k_schedule(total: int, iteration: int,
               k1_fraction: float = 0.10, kt_fraction: float = 0.05) -> int:
    """Patches to draw: ceil(k1_fraction*N) on the first pass, ceil(kt_fraction*N) after.

    Fractions are interpreted as decimals (Fraction-of-string) so that e.g.
    0.1 * 100 yields exactly 10 rather than ceil(10.000000000000002) = 11.
    """
    if total < 1:
        raise ValueError("total patch count must be >= 1")
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    fraction = k1_fraction if iteration == 1 else kt_fraction
    return math.ceil(Fraction(str(fraction)) * total)


def rank_excluding(scores: list[RelevanceScore], exclusion: ExclusionSet,
                   k: int) -> list[Patch]:
    """Top-k patches by descending score over the non-excluded pool.

    Ties break by ascending patch_index. Returns fewer than k when the pool
    is smaller; an empty list signals pool exhaustion.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    remaining = [s for s in scores if not exclusion.contains(s.patch)]
    remaining.sort(key=lambda s: (-s.score, s.patch.patch_index))
    return [s.patch for s in remaining[:k]]


def guided_sample(index: PatchEmbeddingIndex, query: str, exclusion: ExclusionSet,
                  k: int, embedder: EmbeddingBackend, magnification: int,
                  iteration: int = 1) -> list[Patch]:
    """Select the k most query-relevant unexamined patches at one level."""
    candidates = index.patches(magnification)
    scored = score(index, query, embedder, candidates, iteration)
    return rank_excluding(scored, exclusion, k)


def rank_magnified(bundle: SlideBundle, children: list[Patch], query: str,
                   embedder: EmbeddingBackend,
                   index: PatchEmbeddingIndex | None = None) -> list[Patch]:
    """Order zoomed-in child patches by relevance to the query.

    Child embeddings come from the index when present, otherwise they are
    computed on the fly for just these children.
    """
    if not children:
        raise NavigatorError("no magnified candidates to rank")
    q = embed_query(query, embedder)
    vectors: list[np.ndarray] = []
    pending: list[int] = []
    for i, child in enumerate(children):
        if index is not None and index.has_level(child.magnification):
            vectors.append(index.vector(child))
        else:
            vectors.append(None)  # type: ignore[arg-type]
            pending.append(i)
    if pending:
        fresh = _embed_patches(bundle, [children[i] for i in pending], embedder)
        for slot, row in zip(pending, fresh):
            vectors[slot] = row
    ranked = sorted(
        range(len(children)),
        key=lambda i: (-float(np.dot(q, vectors[i])), children[i].patch_index),
    )
    return [children[i] for i in ranked]


def select_magnified(bundle: SlideBundle, children: list[Patch], query: str,
                     embedder: EmbeddingBackend,
                     index: PatchEmbeddingIndex | None = None) -> Patch:
    """The single most query-relevant child patch (ties to lowest patch_index)."""
    return rank_magnified(bundle, children, query, embedder, index)[0]
