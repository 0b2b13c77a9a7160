#!/usr/bin/env python3
"""Generate a synthetic slide bundle for development and demos.

Example:
    python3 scripts/make_bundle.py --out slides/demo --slide-id demo \
        --levels 5:10x10,20:40x40 --tile-size 64
"""

from __future__ import annotations

import argparse
import sys

from slideagent.slides import write_bundle


def parse_levels(spec: str) -> list[tuple[int, int, int]]:
    levels = []
    for part in spec.split(","):
        mag, dims = part.split(":")
        w, h = dims.lower().split("x")
        levels.append((int(mag), int(w), int(h)))
    return levels


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="bundle directory to create")
    parser.add_argument("--slide-id", required=True)
    parser.add_argument("--levels", default="5:10x10,20:40x40",
                        help="mag:WxH list, ascending (default 5:10x10,20:40x40)")
    parser.add_argument("--tile-size", type=int, default=64)
    args = parser.parse_args(argv)

    bundle = write_bundle(args.out, args.slide_id, parse_levels(args.levels),
                          tile_size_px=args.tile_size)
    total = sum(lv.patch_count for lv in bundle.levels)
    print(f"wrote {bundle.slide_id!r} with levels "
          f"{[f'{lv.magnification}x {lv.grid_w}x{lv.grid_h}' for lv in bundle.levels]} "
          f"({total} tiles) -> {bundle.root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
