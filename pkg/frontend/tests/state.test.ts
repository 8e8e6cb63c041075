import { describe, expect, it } from "vitest";

import {
  RequestGate,
  appendHistory,
  buildRequest,
  clampBox,
  ellipseMask,
  initialState,
  moveBox,
  pathologyOf,
  placeBox,
  redo,
  resizeBox,
  selectLabel,
  selectOrgan,
  strokeMask,
  undo,
} from "../src/state.js";
import { GenerateResponse } from "../src/types.js";

const fakeResponse: GenerateResponse = { image: "aGk=", intermediate: null, manifest: {}, timing_ms: 1 };

describe("canvas state", () => {
  it("stroke edits are undoable and redoable", () => {
    let s = initialState(32);
    s = strokeMask(s, [{ x: 10, y: 10 }]);
    expect(s.mask.layers.lungs.some((v) => v === 1)).toBe(true);
    s = undo(s);
    expect(s.mask.layers.lungs.every((v) => v === 0)).toBe(true);
    s = redo(s);
    expect(s.mask.layers.lungs.some((v) => v === 1)).toBe(true);
  });

  it("a new edit clears the redo stack", () => {
    let s = initialState(32);
    s = strokeMask(s, [{ x: 10, y: 10 }]);
    s = undo(s);
    s = ellipseMask(s, 2, 2, 8, 8);
    expect(s.redoStack.length).toBe(0);
  });

  it("edits respect the active organ layer", () => {
    let s = selectOrgan(initialState(32), "heart");
    s = strokeMask(s, [{ x: 5, y: 5 }]);
    expect(s.mask.layers.heart.some((v) => v === 1)).toBe(true);
    expect(s.mask.layers.lungs.every((v) => v === 0)).toBe(true);
  });

  it("boxes are clamped inside the canvas", () => {
    expect(clampBox({ x: -4, y: 60, w: 10, h: 10 }, 64)).toEqual({ x: 0, y: 54, w: 10, h: 10 });
    expect(clampBox({ x: 10, y: 10, w: 500, h: 2 }, 64)).toEqual({ x: 0, y: 10, w: 64, h: 2 });
    let s = placeBox(initialState(64), { x: 60, y: 60, w: 20, h: 20 });
    expect(s.box).toEqual({ x: 44, y: 44, w: 20, h: 20 });
    s = moveBox(s, 100, 0);
    expect(s.box).toEqual({ x: 44, y: 44, w: 20, h: 20 });
    s = resizeBox(s, -10, -10);
    expect(s.box).toEqual({ x: 44, y: 44, w: 10, h: 10 });
  });

  it("serializes pathology only when present", () => {
    let s = initialState(64);
    expect(pathologyOf(s)).toBeNull();
    s = selectLabel(s, "OPACITY_LEFT_LUNG");
    s = placeBox(s, { x: 8, y: 8, w: 12, h: 10 });
    expect(pathologyOf(s)).toEqual({ label: "OPACITY_LEFT_LUNG", box: [8, 8, 12, 10] });
    const req = buildRequest(s, "bWFzaw==");
    expect(req.anatomy_mask).toBe("bWFzaw==");
    expect(req.seed).toBe(0);
    expect(req.s).toBe(50);
  });

  it("history entries are immutable and resubmittable verbatim", () => {
    let s = initialState(64);
    const request = buildRequest(s, "bWFzaw==");
    s = appendHistory(s, { request, response: fakeResponse, requestedAt: 1 });
    expect(s.history.length).toBe(1);
    expect(Object.isFrozen(s.history[0])).toBe(true);
    expect(s.history[0].request).toEqual(request);
  });
});

describe("request gate", () => {
  it("queue-replaces pending intents instead of stacking them", async () => {
    const gate = new RequestGate<number>();
    const done: number[] = [];
    let release: (() => void) | null = null;
    const first = gate.submit(
      () => new Promise<number>((resolve) => { release = () => resolve(1); }),
      (v) => done.push(v),
      () => done.push(-1),
    );
    await Promise.resolve();
    void gate.submit(async () => 2, (v) => done.push(v), () => done.push(-1));
    void gate.submit(async () => 3, (v) => done.push(v), () => done.push(-1));
    expect(gate.hasPending).toBe(true);
    release!();
    await first;
    expect(done).toEqual([1, 3]); // 2 was replaced by 3
    expect(gate.isBusy).toBe(false);
  });

  it("reports errors through the error callback", async () => {
    const gate = new RequestGate<number>();
    const errors: unknown[] = [];
    await gate.submit(
      async () => {
        throw new Error("nope");
      },
      () => undefined,
      (e) => errors.push(e),
    );
    expect(errors.length).toBe(1);
  });
});
