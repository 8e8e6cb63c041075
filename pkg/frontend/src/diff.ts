/**
 * Pixel-difference overlays for the history compare view.
 *
 * Operates on decoded grayscale byte images (one byte per pixel). The energy
 * split quantifies how much of the change falls inside a region of interest
 * (typically old-box union new-box), which is how a user verifies that moving
 * the pathology box only changed what it should.
 */

import { PathologyBox } from "./state.js";

export interface DiffStats {
  maxAbs: number;
  meanAbs: number;
  insideEnergy: number;
  outsideEnergy: number;
  insideFraction: number; // inside / (inside + outside); 1.0 when there is no change at all
}

export function absDiff(a: Uint8Array, b: Uint8Array): Uint8Array {
  if (a.length !== b.length) throw new Error(`image size mismatch: ${a.length} vs ${b.length}`);
  const out = new Uint8Array(a.length);
  for (let i = 0; i < a.length; i++) out[i] = Math.abs(a[i] - b[i]);
  return out;
}

export function boxUnionMask(size: number, boxes: Array<PathologyBox | null>): Uint8Array {
  const mask = new Uint8Array(size * size);
  for (const box of boxes) {
    if (!box) continue;
    const x1 = Math.min(size, box.x + box.w);
    const y1 = Math.min(size, box.y + box.h);
    for (let y = Math.max(0, box.y); y < y1; y++) {
      for (let x = Math.max(0, box.x); x < x1; x++) mask[y * size + x] = 1;
    }
  }
  return mask;
}

export function diffStats(diff: Uint8Array, roi: Uint8Array | null): DiffStats {
  let maxAbs = 0;
  let sum = 0;
  let inside = 0;
  let outside = 0;
  for (let i = 0; i < diff.length; i++) {
    const v = diff[i];
    sum += v;
    if (v > maxAbs) maxAbs = v;
    if (roi && roi[i]) inside += v;
    else outside += v;
  }
  const total = inside + outside;
  return {
    maxAbs,
    meanAbs: sum / diff.length,
    insideEnergy: inside,
    outsideEnergy: outside,
    insideFraction: total === 0 ? 1.0 : inside / total,
  };
}

/** Heat overlay: change rendered red with alpha proportional to magnitude. */
export function diffToRgba(diff: Uint8Array, gain = 4): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(diff.length * 4));
  for (let i = 0; i < diff.length; i++) {
    const a = Math.min(255, diff[i] * gain);
    out[i * 4 + 0] = 255;
    out[i * 4 + 1] = 32;
    out[i * 4 + 2] = 32;
    out[i * 4 + 3] = a;
  }
  return out;
}
