"""On-disk slide bundles: magnification pyramids of square tiles addressed by grid coordinates.

A bundle is a directory with a ``manifest.json`` and one tile file per grid
cell per magnification level. Bundles are immutable after load and safe to
share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

VALID_MAGNIFICATIONS = (5, 10, 20, 40)
DEFAULT_TILE_SIZE = 256
MANIFEST_NAME = "manifest.json"
DEFAULT_TILE_PATTERN = "tiles/{mag}/{col}_{row}.png"

_MEDIA_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
}


class BundleError(Exception):
    """Base class for slide bundle failures."""


class BundleFormatError(BundleError):
    """Manifest missing, unparseable, or structurally invalid."""


class BundleIntegrityError(BundleError):
    """Manifest references tiles that do not exist on disk."""

    def __init__(self, message: str, missing: list[str]):
        super().__init__(message)
        self.missing = missing


class LevelNotFoundError(BundleError):
    """Requested magnification is not present in the bundle."""


class InvalidZoomError(BundleError):
    """Zoom target magnification is not strictly higher than the source."""


class UnsupportedRatioError(BundleError):
    """Zoom magnification ratio is not an integer."""


class TileReadError(BundleError):
    """Tile file exists in the manifest but could not be read."""


class PatchMismatchError(BundleError):
    """Patch does not belong to the bundle (wrong slide or off-grid)."""


@dataclass(frozen=True)
class MagLevel:
    magnification: int
    grid_w: int
    grid_h: int
    tile_path_pattern: str = DEFAULT_TILE_PATTERN

    @property
    def patch_count(self) -> int:
        return self.grid_w * self.grid_h


@dataclass(frozen=True)
class Patch:
    """One tile: the unit of retrieval, description, and zoom."""

    slide_id: str
    magnification: int
    col: int
    row: int
    patch_index: int

    @property
    def loc(self) -> tuple[int, int]:
        return (self.col, self.row)


@dataclass(frozen=True)
class SlideBundle:
    slide_id: str
    levels: tuple[MagLevel, ...]
    tile_size_px: int
    root: Path | None = None
    created_at: str = ""
    source_note: str = ""
    _by_mag: dict[int, MagLevel] = field(init=False, repr=False, compare=False, hash=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "_by_mag", {lv.magnification: lv for lv in self.levels})

    @property
    def magnifications(self) -> tuple[int, ...]:
        return tuple(lv.magnification for lv in self.levels)

    def level(self, magnification: int) -> MagLevel:
        try:
            return self._by_mag[magnification]
        except KeyError:
            raise LevelNotFoundError(
                f"slide {self.slide_id!r} has no {magnification}x level "
                f"(available: {list(self.magnifications)})"
            ) from None

    def has_level(self, magnification: int) -> bool:
        return magnification in self._by_mag

    def patch(self, magnification: int, col: int, row: int) -> Patch:
        """Construct a validated patch at a grid position of this bundle."""
        lv = self.level(magnification)
        if not (0 <= col < lv.grid_w and 0 <= row < lv.grid_h):
            raise PatchMismatchError(
                f"({col}, {row}) outside {lv.grid_w}x{lv.grid_h} grid at {magnification}x"
            )
        return Patch(self.slide_id, magnification, col, row, row * lv.grid_w + col)

    def tile_path(self, patch: Patch) -> Path:
        if self.root is None:
            raise BundleError(f"bundle {self.slide_id!r} has no backing directory")
        lv = self.level(patch.magnification)
        rel = lv.tile_path_pattern.format(mag=patch.magnification, col=patch.col, row=patch.row)
        return self.root / rel


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise BundleFormatError(message)


def _parse_manifest(raw: dict, root: Path | None) -> SlideBundle:
    _require(isinstance(raw, dict), "manifest must be a JSON object")
    slide_id = raw.get("slide_id")
    _require(isinstance(slide_id, str) and slide_id != "", "manifest missing slide_id")
    tile_size = raw.get("tile_size_px")
    _require(isinstance(tile_size, int) and tile_size > 0, "tile_size_px must be a positive integer")
    levels_raw = raw.get("levels")
    _require(isinstance(levels_raw, list) and len(levels_raw) > 0, "manifest has no levels")

    levels: list[MagLevel] = []
    for entry in levels_raw:
        _require(isinstance(entry, dict), "level entries must be objects")
        mag = entry.get("magnification")
        _require(mag in VALID_MAGNIFICATIONS, f"magnification must be one of {VALID_MAGNIFICATIONS}, got {mag!r}")
        grid_w, grid_h = entry.get("grid_w"), entry.get("grid_h")
        _require(
            isinstance(grid_w, int) and isinstance(grid_h, int) and grid_w >= 1 and grid_h >= 1,
            f"grid dimensions at {mag}x must be positive integers",
        )
        pattern = entry.get("tile_path_pattern", DEFAULT_TILE_PATTERN)
        _require(isinstance(pattern, str) and "{col}" in pattern and "{row}" in pattern,
                 f"tile_path_pattern at {mag}x must contain {{col}} and {{row}} placeholders")
        levels.append(MagLevel(mag, grid_w, grid_h, pattern))

    mags = [lv.magnification for lv in levels]
    _require(len(set(mags)) == len(mags), "magnification appears more than once")
    _require(mags == sorted(mags), "levels must be listed in strictly increasing magnification order")
    for low, high in zip(levels, levels[1:]):
        ratio = high.magnification / low.magnification
        _require(
            high.grid_w == math.ceil(low.grid_w * ratio) and high.grid_h == math.ceil(low.grid_h * ratio),
            f"grid at {high.magnification}x must be ceil({low.magnification}x dims x {ratio:g})",
        )

    return SlideBundle(
        slide_id=slide_id,
        levels=tuple(levels),
        tile_size_px=tile_size,
        root=root,
        created_at=str(raw.get("created_at", "")),
        source_note=str(raw.get("source_note", "")),
    )


def load_bundle(path: str | Path) -> SlideBundle:
    """Load and validate a slide bundle directory.

    Raises ``BundleFormatError`` for a bad manifest and ``BundleIntegrityError``
    when grid cells do not resolve to tile files (first 10 missing are listed).
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleFormatError(f"no {MANIFEST_NAME} in {root}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise BundleFormatError(f"unreadable manifest in {root}: {exc}") from exc

    bundle = _parse_manifest(raw, root)

    missing: list[str] = []
    for lv in bundle.levels:
        for row in range(lv.grid_h):
            for col in range(lv.grid_w):
                rel = lv.tile_path_pattern.format(mag=lv.magnification, col=col, row=row)
                if not (root / rel).is_file():
                    missing.append(rel)
                    if len(missing) >= 10:
                        break
            if len(missing) >= 10:
                break
        if len(missing) >= 10:
            break
    if missing:
        raise BundleIntegrityError(
            f"bundle {bundle.slide_id!r} is missing tiles: {', '.join(missing)}", missing
        )
    return bundle


def patches_at(bundle: SlideBundle, magnification: int) -> list[Patch]:
    """All patches of one level in row-major order (patch_index order)."""
    lv = bundle.level(magnification)
    return [
        Patch(bundle.slide_id, magnification, col, row, row * lv.grid_w + col)
        for row in range(lv.grid_h)
        for col in range(lv.grid_w)
    ]


def magnify_patch(bundle: SlideBundle, patch: Patch, target_mag: int) -> list[Patch]:
    """Non-overlapping child patches covering the same physical region at a higher level.

    The ratio r = target_mag / patch.magnification must be an integer; exactly
    r*r children are returned, row-major within the covered block.
    """
    if patch.slide_id != bundle.slide_id:
        raise PatchMismatchError(f"patch belongs to {patch.slide_id!r}, not {bundle.slide_id!r}")
    if target_mag <= patch.magnification:
        raise InvalidZoomError(f"target {target_mag}x is not above {patch.magnification}x")
    target = bundle.level(target_mag)  # raises LevelNotFoundError
    bundle.level(patch.magnification)
    ratio = target_mag / patch.magnification
    if ratio != int(ratio):
        raise UnsupportedRatioError(
            f"{patch.magnification}x -> {target_mag}x is not an integer ratio"
        )
    r = int(ratio)
    children = []
    for row in range(patch.row * r, (patch.row + 1) * r):
        for col in range(patch.col * r, (patch.col + 1) * r):
            children.append(
                Patch(bundle.slide_id, target_mag, col, row, row * target.grid_w + col)
            )
    return children


def tile_bytes(bundle: SlideBundle, patch: Patch) -> tuple[bytes, str]:
    """Stored tile image verbatim, with its media type from the file extension."""
    if patch.slide_id != bundle.slide_id:
        raise PatchMismatchError(f"patch belongs to {patch.slide_id!r}, not {bundle.slide_id!r}")
    lv = bundle.level(patch.magnification)
    if not (0 <= patch.col < lv.grid_w and 0 <= patch.row < lv.grid_h):
        raise PatchMismatchError(
            f"({patch.col}, {patch.row}) outside {lv.grid_w}x{lv.grid_h} grid at {patch.magnification}x"
        )
    path = bundle.tile_path(patch)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise TileReadError(
            f"cannot read tile mag={patch.magnification} col={patch.col} row={patch.row}: {exc}"
        ) from exc
    media = _MEDIA_TYPES.get(path.suffix.lower(), "application/octet-stream")
    return data, media


def write_bundle(
    root: str | Path,
    slide_id: str,
    levels: list[tuple[int, int, int]],
    tile_size_px: int = 64,
    source_note: str = "synthetic",
) -> SlideBundle:
    """Write a synthetic bundle: manifest plus one solid-color PNG per grid cell.

    ``levels`` is a list of (magnification, grid_w, grid_h), ascending. Grid
    dimensions must respect the pyramid ratio rule; tile colors encode
    (mag, col, row) so every tile has distinct bytes.
    """
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "slide_id": slide_id,
        "tile_size_px": tile_size_px,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "source_note": source_note,
        "levels": [
            {
                "magnification": mag,
                "grid_w": w,
                "grid_h": h,
                "tile_path_pattern": DEFAULT_TILE_PATTERN,
            }
            for mag, w, h in levels
        ],
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    for mag, w, h in levels:
        tile_dir = root / "tiles" / str(mag)
        tile_dir.mkdir(parents=True, exist_ok=True)
        for row in range(h):
            for col in range(w):
                color = ((mag * 37) % 256, (col * 11) % 256, (row * 17) % 256)
                img = Image.new("RGB", (tile_size_px, tile_size_px), color)
                img.save(tile_dir / f"{col}_{row}.png")
    return load_bundle(root)
