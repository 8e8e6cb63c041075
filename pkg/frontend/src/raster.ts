/**
 * Binary mask rasterization on Uint8Array buffers (1 byte per pixel, 0 or 1).
 *
 * All tools write at the model's native resolution, so what the client
 * previews is byte-for-byte what the server decodes — no resampling anywhere.
 */

import { ORGAN_ORDER, OrganName } from "./types.js";

export interface MaskLayers {
  size: number;
  layers: Record<OrganName, Uint8Array>;
}

export function emptyLayers(size: number): MaskLayers {
  const layers = {} as Record<OrganName, Uint8Array>;
  for (const organ of ORGAN_ORDER) layers[organ] = new Uint8Array(size * size);
  return { size, layers };
}

export function cloneLayers(mask: MaskLayers): MaskLayers {
  const layers = {} as Record<OrganName, Uint8Array>;
  for (const organ of ORGAN_ORDER) layers[organ] = mask.layers[organ].slice();
  return { size: mask.size, layers };
}

export function isBinary(buf: Uint8Array): boolean {
  for (let i = 0; i < buf.length; i++) if (buf[i] > 1) return false;
  return true;
}

function stampDisc(buf: Uint8Array, size: number, cx: number, cy: number, radius: number, value: 0 | 1): void {
  const r2 = radius * radius;
  const x0 = Math.max(0, Math.floor(cx - radius));
  const x1 = Math.min(size - 1, Math.ceil(cx + radius));
  const y0 = Math.max(0, Math.floor(cy - radius));
  const y1 = Math.min(size - 1, Math.ceil(cy + radius));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dx = x - cx;
      const dy = y - cy;
      if (dx * dx + dy * dy <= r2) buf[y * size + x] = value;
    }
  }
}

/** Paint (or erase) a polyline stroke with a round brush; mutates the buffer. */
export function applyStroke(
  buf: Uint8Array,
  size: number,
  points: Array<{ x: number; y: number }>,
  radius: number,
  erase: boolean,
): void {
  if (points.length === 0) return;
  const value: 0 | 1 = erase ? 0 : 1;
  let prev = points[0];
  stampDisc(buf, size, prev.x, prev.y, radius, value);
  for (let i = 1; i < points.length; i++) {
    const next = points[i];
    const dist = Math.hypot(next.x - prev.x, next.y - prev.y);
    const steps = Math.max(1, Math.ceil(dist));
    for (let k = 1; k <= steps; k++) {
      const t = k / steps;
      stampDisc(buf, size, prev.x + (next.x - prev.x) * t, prev.y + (next.y - prev.y) * t, radius, value);
    }
    prev = next;
  }
}

/** Fill an axis-aligned ellipse given its bounding box corners; mutates the buffer. */
export function applyEllipse(
  buf: Uint8Array,
  size: number,
  x0: number,
  y0: number,
  x1: number,
  y1: number,
  erase: boolean,
): void {
  const cx = (x0 + x1) / 2;
  const cy = (y0 + y1) / 2;
  const rx = Math.max(Math.abs(x1 - x0) / 2, 0.5);
  const ry = Math.max(Math.abs(y1 - y0) / 2, 0.5);
  const value: 0 | 1 = erase ? 0 : 1;
  const ix0 = Math.max(0, Math.floor(cx - rx));
  const ix1 = Math.min(size - 1, Math.ceil(cx + rx));
  const iy0 = Math.max(0, Math.floor(cy - ry));
  const iy1 = Math.min(size - 1, Math.ceil(cy + ry));
  for (let y = iy0; y <= iy1; y++) {
    for (let x = ix0; x <= ix1; x++) {
      const nx = (x - cx) / rx;
      const ny = (y - cy) / ry;
      if (nx * nx + ny * ny <= 1) buf[y * size + x] = value;
    }
  }
}

/** Pack organ layers into RGBA pixels (R=lungs, G=heart, B=aorta, A=255). */
export function layersToRgba(mask: MaskLayers): Uint8ClampedArray<ArrayBuffer> {
  const { size, layers } = mask;
  const out = new Uint8ClampedArray(new ArrayBuffer(size * size * 4));
  for (let i = 0; i < size * size; i++) {
    out[i * 4 + 0] = layers.lungs[i] ? 255 : 0;
    out[i * 4 + 1] = layers.heart[i] ? 255 : 0;
    out[i * 4 + 2] = layers.aorta[i] ? 255 : 0;
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Decode RGBA pixels (e.g. a preset PNG drawn to a canvas) back into layers. */
export function layersFromRgba(pixels: Uint8ClampedArray, size: number): MaskLayers {
  const mask = emptyLayers(size);
  for (let i = 0; i < size * size; i++) {
    mask.layers.lungs[i] = pixels[i * 4 + 0] >= 128 ? 1 : 0;
    mask.layers.heart[i] = pixels[i * 4 + 1] >= 128 ? 1 : 0;
    mask.layers.aorta[i] = pixels[i * 4 + 2] >= 128 ? 1 : 0;
  }
  return mask;
}

export function layersEqual(a: MaskLayers, b: MaskLayers): boolean {
  if (a.size !== b.size) return false;
  for (const organ of ORGAN_ORDER) {
    const la = a.layers[organ];
    const lb = b.layers[organ];
    for (let i = 0; i < la.length; i++) if (la[i] !== lb[i]) return false;
  }
  return true;
}
