// Grid overlay geometry and RoI click-selection for the slide overview,
// which is rendered from the lowest-magnification tile grid.

import type { PatchRef, SlideInfo, SlideLevel } from './types.js';

export const ITERATION_COLORS = [
  '#38bdf8', // iteration 1
  '#a78bfa',
  '#fb923c',
  '#34d399',
  '#f472b6',
  '#facc15',
] as const;

export function colorForIteration(iteration: number): string {
  return ITERATION_COLORS[(iteration - 1) % ITERATION_COLORS.length]!;
}

export function baseLevel(slide: SlideInfo): SlideLevel {
  return slide.levels.reduce((low, lv) => (lv.magnification < low.magnification ? lv : low));
}

export type CellRect = { left: number; top: number; width: number; height: number };

/**
 * Rectangle of a patch in overview coordinates (cell units of the base grid).
 * Patches at higher magnifications map to fractional sub-cells of their
 * ancestor, so zoomed findings draw inside the region they refine.
 */
export function patchRect(patch: PatchRef, baseMagnification: number): CellRect {
  const scale = patch.magnification / baseMagnification;
  return {
    left: patch.col / scale,
    top: patch.row / scale,
    width: 1 / scale,
    height: 1 / scale,
  };
}

export function toPixels(rect: CellRect, cellPx: number): CellRect {
  return {
    left: rect.left * cellPx,
    top: rect.top * cellPx,
    width: rect.width * cellPx,
    height: rect.height * cellPx,
  };
}

/** Grid cell under a pointer position, or null outside the grid. */
export function cellAt(level: SlideLevel, cellPx: number, x: number, y: number):
    { col: number; row: number } | null {
  const col = Math.floor(x / cellPx);
  const row = Math.floor(y / cellPx);
  if (col < 0 || row < 0 || col >= level.grid_w || row >= level.grid_h) return null;
  return { col, row };
}

/** Click-to-select set of base-grid cells, used to draft select_rois payloads. */
export class RoiSelection {
  private cells = new Map<string, { col: number; row: number }>();

  toggle(col: number, row: number): boolean {
    const key = `${col},${row}`;
    if (this.cells.has(key)) {
      this.cells.delete(key);
      return false;
    }
    this.cells.set(key, { col, row });
    return true;
  }

  has(col: number, row: number): boolean {
    return this.cells.has(`${col},${row}`);
  }

  get size(): number {
    return this.cells.size;
  }

  clear(): void {
    this.cells.clear();
  }

  list(): { col: number; row: number }[] {
    return [...this.cells.values()];
  }

  toPayload(magnification: number): { patches: { magnification: number; col: number; row: number }[] } {
    return {
      patches: this.list().map(({ col, row }) => ({ magnification, col, row })),
    };
  }
}
