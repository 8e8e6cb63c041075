/**
 * Studio state and its pure transitions.
 *
 * CanvasState is treated as immutable: every operation returns a new state
 * (mask buffers are copied on write). History entries are frozen
 * request/response pairs so any of them can be re-submitted verbatim.
 */

import { MaskLayers, applyEllipse, applyStroke, cloneLayers, emptyLayers } from "./raster.js";
import { GenerateRequest, GenerateResponse, OrganName, PathologySpec } from "./types.js";

export type Tool = "brush" | "erase" | "ellipse" | "box";

export interface PathologyBox {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface HistoryEntry {
  request: GenerateRequest;
  response: GenerateResponse;
  requestedAt: number;
}

export interface CanvasState {
  size: number;
  mask: MaskLayers;
  activeOrgan: OrganName;
  tool: Tool;
  brushRadius: number;
  box: PathologyBox | null;
  label: string;
  seed: number;
  s: number;
  history: HistoryEntry[];
  undoStack: MaskLayers[];
  redoStack: MaskLayers[];
}

export const UNDO_LIMIT = 32;

export function initialState(size: number): CanvasState {
  return {
    size,
    mask: emptyLayers(size),
    activeOrgan: "lungs",
    tool: "brush",
    brushRadius: 2,
    box: null,
    label: "NO_FINDING",
    seed: 0,
    s: 50,
    history: [],
    undoStack: [],
    redoStack: [],
  };
}

function pushUndo(state: CanvasState): CanvasState {
  const undoStack = [...state.undoStack, cloneLayers(state.mask)].slice(-UNDO_LIMIT);
  return { ...state, undoStack, redoStack: [] };
}

export function setMask(state: CanvasState, mask: MaskLayers): CanvasState {
  const next = pushUndo(state);
  return { ...next, mask };
}

export function strokeMask(state: CanvasState, points: Array<{ x: number; y: number }>): CanvasState {
  const next = pushUndo(state);
  const mask = cloneLayers(state.mask);
  applyStroke(mask.layers[state.activeOrgan], state.size, points, state.brushRadius, state.tool === "erase");
  return { ...next, mask };
}

export function ellipseMask(state: CanvasState, x0: number, y0: number, x1: number, y1: number): CanvasState {
  const next = pushUndo(state);
  const mask = cloneLayers(state.mask);
  applyEllipse(mask.layers[state.activeOrgan], state.size, x0, y0, x1, y1, false);
  return { ...next, mask };
}

export function undo(state: CanvasState): CanvasState {
  if (state.undoStack.length === 0) return state;
  const undoStack = state.undoStack.slice(0, -1);
  const restored = state.undoStack[state.undoStack.length - 1];
  return {
    ...state,
    mask: restored,
    undoStack,
    redoStack: [...state.redoStack, cloneLayers(state.mask)],
  };
}

export function redo(state: CanvasState): CanvasState {
  if (state.redoStack.length === 0) return state;
  const redoStack = state.redoStack.slice(0, -1);
  const restored = state.redoStack[state.redoStack.length - 1];
  return {
    ...state,
    mask: restored,
    redoStack,
    undoStack: [...state.undoStack, cloneLayers(state.mask)],
  };
}

/** Clamp a box fully inside the canvas, preserving size where possible. */
export function clampBox(box: PathologyBox, size: number): PathologyBox {
  const w = Math.max(1, Math.min(Math.round(box.w), size));
  const h = Math.max(1, Math.min(Math.round(box.h), size));
  const x = Math.max(0, Math.min(Math.round(box.x), size - w));
  const y = Math.max(0, Math.min(Math.round(box.y), size - h));
  return { x, y, w, h };
}

export function placeBox(state: CanvasState, box: PathologyBox | null): CanvasState {
  return { ...state, box: box ? clampBox(box, state.size) : null };
}

export function moveBox(state: CanvasState, dx: number, dy: number): CanvasState {
  if (!state.box) return state;
  return placeBox(state, { ...state.box, x: state.box.x + dx, y: state.box.y + dy });
}

export function resizeBox(state: CanvasState, dw: number, dh: number): CanvasState {
  if (!state.box) return state;
  return placeBox(state, { ...state.box, w: state.box.w + dw, h: state.box.h + dh });
}

export function selectLabel(state: CanvasState, label: string): CanvasState {
  return { ...state, label };
}

export function selectTool(state: CanvasState, tool: Tool): CanvasState {
  return { ...state, tool };
}

export function selectOrgan(state: CanvasState, organ: OrganName): CanvasState {
  return { ...state, activeOrgan: organ };
}

export function setSeed(state: CanvasState, seed: number): CanvasState {
  return { ...state, seed: Math.trunc(seed) };
}

export function pathologyOf(state: CanvasState): PathologySpec | null {
  if (state.label === "NO_FINDING" && !state.box) return null;
  return {
    label: state.label,
    box: state.box ? [state.box.x, state.box.y, state.box.w, state.box.h] : null,
  };
}

/** Serialize the editable state into the wire request (mask supplied by caller). */
export function buildRequest(state: CanvasState, maskBase64: string): GenerateRequest {
  return {
    anatomy_mask: maskBase64,
    pathology: pathologyOf(state),
    seed: state.seed,
    s: state.s,
    include_intermediate: true,
  };
}

export function appendHistory(state: CanvasState, entry: HistoryEntry): CanvasState {
  return { ...state, history: [...state.history, Object.freeze(entry)] };
}

/**
 * Single in-flight request policy: a click while busy replaces the pending
 * intent instead of queueing a backlog.
 */
export class RequestGate<T> {
  private busy = false;
  private pending: (() => Promise<T>) | null = null;

  async submit(work: () => Promise<T>, onDone: (result: T) => void, onError: (err: unknown) => void): Promise<void> {
    if (this.busy) {
      this.pending = work;
      return;
    }
    this.busy = true;
    try {
      let current: (() => Promise<T>) | null = work;
      while (current) {
        const job = current;
        this.pending = null;
        try {
          onDone(await job());
        } catch (err) {
          onError(err);
        }
        current = this.pending;
      }
    } finally {
      this.busy = false;
    }
  }

  get isBusy(): boolean {
    return this.busy;
  }

  get hasPending(): boolean {
    return this.pending !== null;
  }
}
