/**
 * DOM shell: wires the pure state/raster/diff modules to canvases, pointer
 * events and the service client. Everything testable lives in those modules;
 * this file only translates events and paints pixels.
 */

import { ApiError, StudioClient } from "./api.js";
import { absDiff, boxUnionMask, diffStats, diffToRgba } from "./diff.js";
import { layersFromRgba, layersToRgba } from "./raster.js";
import {
  CanvasState,
  HistoryEntry,
  RequestGate,
  appendHistory,
  buildRequest,
  clampBox,
  ellipseMask,
  initialState,
  placeBox,
  redo,
  selectLabel,
  selectOrgan,
  selectTool,
  setMask,
  setSeed,
  strokeMask,
  undo,
} from "./state.js";
import { GenerateResponse, OrganName, ORGAN_ORDER, PresetInfo } from "./types.js";

const SCALE = 8; // display zoom; all mask math stays at native resolution

const ORGAN_COLORS: Record<OrganName, string> = {
  lungs: "rgba(90,160,255,0.55)",
  heart: "rgba(255,110,110,0.55)",
  aorta: "rgba(255,220,90,0.6)",
};

interface Elements {
  maskCanvas: HTMLCanvasElement;
  resultCanvas: HTMLCanvasElement;
  compareCanvas: HTMLCanvasElement;
  banner: HTMLElement;
  status: HTMLElement;
  historyList: HTMLElement;
  compareInfo: HTMLElement;
  labelSelect: HTMLSelectElement;
  presetSelect: HTMLSelectElement;
  organSelect: HTMLSelectElement;
  toolSelect: HTMLSelectElement;
  seedInput: HTMLInputElement;
  sInput: HTMLInputElement;
  generateBtn: HTMLButtonElement;
  undoBtn: HTMLButtonElement;
  redoBtn: HTMLButtonElement;
  clearBoxBtn: HTMLButtonElement;
}

function grab(): Elements {
  const byId = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;
  return {
    maskCanvas: byId<HTMLCanvasElement>("mask-canvas"),
    resultCanvas: byId<HTMLCanvasElement>("result-canvas"),
    compareCanvas: byId<HTMLCanvasElement>("compare-canvas"),
    banner: byId("banner"),
    status: byId("status"),
    historyList: byId("history"),
    compareInfo: byId("compare-info"),
    labelSelect: byId<HTMLSelectElement>("label-select"),
    presetSelect: byId<HTMLSelectElement>("preset-select"),
    organSelect: byId<HTMLSelectElement>("organ-select"),
    toolSelect: byId<HTMLSelectElement>("tool-select"),
    seedInput: byId<HTMLInputElement>("seed-input"),
    sInput: byId<HTMLInputElement>("s-input"),
    generateBtn: byId<HTMLButtonElement>("generate-btn"),
    undoBtn: byId<HTMLButtonElement>("undo-btn"),
    redoBtn: byId<HTMLButtonElement>("redo-btn"),
    clearBoxBtn: byId<HTMLButtonElement>("clear-box-btn"),
  };
}

async function decodeBase64Png(b64: string, size: number): Promise<Uint8ClampedArray<ArrayBuffer>> {
  const img = new Image();
  img.src = `data:image/png;base64,${b64}`;
  await img.decode();
  const canvas = document.createElement("canvas");
  canvas.width = size;
  canvas.height = size;
  const ctx = canvas.getContext("2d")!;
  ctx.drawImage(img, 0, 0);
  return ctx.getImageData(0, 0, size, size).data as Uint8ClampedArray<ArrayBuffer>;
}

function grayFromRgba(pixels: Uint8ClampedArray): Uint8Array {
  const out = new Uint8Array(pixels.length / 4);
  for (let i = 0; i < out.length; i++) out[i] = pixels[i * 4];
  return out;
}

function maskToBase64Png(state: CanvasState): string {
  const canvas = document.createElement("canvas");
  canvas.width = state.size;
  canvas.height = state.size;
  const ctx = canvas.getContext("2d")!;
  ctx.putImageData(new ImageData(layersToRgba(state.mask), state.size, state.size), 0, 0);
  return canvas.toDataURL("image/png").split(",", 2)[1];
}

export class StudioApp {
  private state: CanvasState;
  private gate = new RequestGate<{ entry: HistoryEntry }>();
  private selectedHistory: number[] = [];
  private dragStart: { x: number; y: number } | null = null;

  constructor(
    private el: Elements,
    private client: StudioClient,
    size: number,
  ) {
    this.state = initialState(size);
  }

  static async boot(baseUrl: string): Promise<StudioApp> {
    const el = grab();
    const client = new StudioClient(baseUrl);
    let size = 64;
    try {
      const health = await client.health();
      if (health.ready && health.image_size) size = health.image_size;
      el.banner.hidden = health.ready;
      el.banner.textContent = health.ready ? "" : "service is loading checkpoints…";
    } catch {
      el.banner.hidden = false;
      el.banner.textContent = "service unreachable — studio is in offline mode";
    }
    const app = new StudioApp(el, client, size);
    await app.populateCatalogs();
    app.bind();
    app.paintMask();
    return app;
  }

  private async populateCatalogs(): Promise<void> {
    try {
      for (const label of await this.client.labels()) {
        const opt = document.createElement("option");
        opt.value = label.name;
        opt.textContent = label.name;
        this.el.labelSelect.append(opt);
      }
      for (const preset of await this.client.presets()) {
        const opt = document.createElement("option");
        opt.value = preset.id;
        opt.textContent = preset.name;
        (opt as unknown as { preset: PresetInfo }).preset = preset;
        this.el.presetSelect.append(opt);
      }
    } catch {
      // offline: selects stay empty, banner already shown
    }
  }

  private canvasPoint(ev: PointerEvent): { x: number; y: number } {
    const rect = this.el.maskCanvas.getBoundingClientRect();
    return {
      x: ((ev.clientX - rect.left) / rect.width) * this.state.size,
      y: ((ev.clientY - rect.top) / rect.height) * this.state.size,
    };
  }

  private bind(): void {
    const canvas = this.el.maskCanvas;
    canvas.width = this.state.size * SCALE;
    canvas.height = this.state.size * SCALE;
    let strokePoints: Array<{ x: number; y: number }> = [];

    canvas.addEventListener("pointerdown", (ev) => {
      canvas.setPointerCapture(ev.pointerId);
      const p = this.canvasPoint(ev);
      this.dragStart = p;
      if (this.state.tool === "brush" || this.state.tool === "erase") strokePoints = [p];
    });
    canvas.addEventListener("pointermove", (ev) => {
      if (!this.dragStart) return;
      const p = this.canvasPoint(ev);
      if (this.state.tool === "brush" || this.state.tool === "erase") {
        strokePoints.push(p);
        this.paintMask(strokePoints);
      } else {
        this.paintMask(undefined, { from: this.dragStart, to: p });
      }
    });
    canvas.addEventListener("pointerup", (ev) => {
      if (!this.dragStart) return;
      const p = this.canvasPoint(ev);
      if (this.state.tool === "brush" || this.state.tool === "erase") {
        this.state = strokeMask(this.state, [...strokePoints, p]);
      } else if (this.state.tool === "ellipse") {
        this.state = ellipseMask(this.state, this.dragStart.x, this.dragStart.y, p.x, p.y);
      } else {
        const box = clampBox(
          {
            x: Math.min(this.dragStart.x, p.x),
            y: Math.min(this.dragStart.y, p.y),
            w: Math.abs(p.x - this.dragStart.x),
            h: Math.abs(p.y - this.dragStart.y),
          },
          this.state.size,
        );
        this.state = placeBox(this.state, box);
      }
      this.dragStart = null;
      strokePoints = [];
      this.paintMask();
    });

    this.el.toolSelect.addEventListener("change", () => {
      this.state = selectTool(this.state, this.el.toolSelect.value as CanvasState["tool"]);
    });
    this.el.organSelect.addEventListener("change", () => {
      this.state = selectOrgan(this.state, this.el.organSelect.value as OrganName);
    });
    this.el.labelSelect.addEventListener("change", () => {
      this.state = selectLabel(this.state, this.el.labelSelect.value);
    });
    this.el.seedInput.addEventListener("change", () => {
      this.state = setSeed(this.state, Number(this.el.seedInput.value));
    });
    this.el.sInput.addEventListener("change", () => {
      this.state = { ...this.state, s: Number(this.el.sInput.value) };
    });
    this.el.presetSelect.addEventListener("change", () => void this.loadPreset());
    this.el.undoBtn.addEventListener("click", () => {
      this.state = undo(this.state);
      this.paintMask();
    });
    this.el.redoBtn.addEventListener("click", () => {
      this.state = redo(this.state);
      this.paintMask();
    });
    this.el.clearBoxBtn.addEventListener("click", () => {
      this.state = placeBox(this.state, null);
      this.paintMask();
    });
    this.el.generateBtn.addEventListener("click", () => void this.generate());
  }

  private async loadPreset(): Promise<void> {
    const option = this.el.presetSelect.selectedOptions[0] as unknown as { preset?: PresetInfo };
    if (!option?.preset) return;
    const pixels = await decodeBase64Png(option.preset.mask, option.preset.size);
    this.state = setMask(this.state, layersFromRgba(pixels, option.preset.size));
    this.paintMask();
  }

  paintMask(livePoints?: Array<{ x: number; y: number }>, liveRect?: { from: { x: number; y: number }; to: { x: number; y: number } }): void {
    const ctx = this.el.maskCanvas.getContext("2d")!;
    const size = this.state.size;
    ctx.imageSmoothingEnabled = false;
    ctx.fillStyle = "#10141c";
    ctx.fillRect(0, 0, size * SCALE, size * SCALE);
    for (const organ of ORGAN_ORDER) {
      ctx.fillStyle = ORGAN_COLORS[organ];
      const layer = this.state.mask.layers[organ];
      for (let i = 0; i < layer.length; i++) {
        if (layer[i]) ctx.fillRect((i % size) * SCALE, Math.floor(i / size) * SCALE, SCALE, SCALE);
      }
    }
    if (this.state.box) {
      ctx.strokeStyle = "#7CFC9A";
      ctx.lineWidth = 2;
      const b = this.state.box;
      ctx.strokeRect(b.x * SCALE, b.y * SCALE, b.w * SCALE, b.h * SCALE);
    }
    if (liveRect) {
      ctx.strokeStyle = "rgba(255,255,255,0.6)";
      ctx.strokeRect(
        Math.min(liveRect.from.x, liveRect.to.x) * SCALE,
        Math.min(liveRect.from.y, liveRect.to.y) * SCALE,
        Math.abs(liveRect.to.x - liveRect.from.x) * SCALE,
        Math.abs(liveRect.to.y - liveRect.from.y) * SCALE,
      );
    }
    if (livePoints && livePoints.length) {
      ctx.fillStyle = "rgba(255,255,255,0.4)";
      for (const p of livePoints) {
        ctx.beginPath();
        ctx.arc(p.x * SCALE, p.y * SCALE, this.state.brushRadius * SCALE, 0, Math.PI * 2);
        ctx.fill();
      }
    }
  }

  private async paintResult(response: GenerateResponse): Promise<void> {
    const pixels = await decodeBase64Png(response.image, this.state.size);
    const ctx = this.el.resultCanvas.getContext("2d")!;
    this.el.resultCanvas.width = this.state.size * SCALE;
    this.el.resultCanvas.height = this.state.size * SCALE;
    ctx.imageSmoothingEnabled = false;
    const off = document.createElement("canvas");
    off.width = this.state.size;
    off.height = this.state.size;
    off.getContext("2d")!.putImageData(new ImageData(pixels, this.state.size, this.state.size), 0, 0);
    ctx.drawImage(off, 0, 0, this.state.size * SCALE, this.state.size * SCALE);
  }

  private async generate(): Promise<void> {
    const request = buildRequest(this.state, maskToBase64Png(this.state));
    this.el.status.textContent = "generating…";
    await this.gate.submit(
      async () => {
        const response = await this.client.generate(request);
        return { entry: { request, response, requestedAt: Date.now() } };
      },
      ({ entry }) => {
        this.state = appendHistory(this.state, entry);
        void this.paintResult(entry.response);
        this.renderHistory();
        this.el.status.textContent = `done in ${entry.response.timing_ms.toFixed(0)} ms`;
      },
      (err) => {
        this.el.status.textContent =
          err instanceof ApiError ? `rejected — ${err.message}` : `request failed — ${String(err)}`;
      },
    );
  }

  private renderHistory(): void {
    this.el.historyList.replaceChildren();
    this.state.history.forEach((entry, index) => {
      const item = document.createElement("li");
      const pat = entry.request.pathology;
      item.textContent = `#${index} seed=${entry.request.seed} ${pat ? pat.label : "NO_FINDING"}${
        pat?.box ? ` @[${pat.box.join(",")}]` : ""
      }`;
      item.addEventListener("click", () => void this.toggleCompare(index));
      item.className = this.selectedHistory.includes(index) ? "selected" : "";
      this.el.historyList.append(item);
    });
  }

  /** Select up to two history entries; with two, show the difference overlay. */
  private async toggleCompare(index: number): Promise<void> {
    this.selectedHistory = this.selectedHistory.includes(index)
      ? this.selectedHistory.filter((i) => i !== index)
      : [...this.selectedHistory, index].slice(-2);
    this.renderHistory();
    if (this.selectedHistory.length !== 2) return;
    const [ia, ib] = this.selectedHistory;
    const size = this.state.size;
    const a = grayFromRgba(await decodeBase64Png(this.state.history[ia].response.image, size));
    const b = grayFromRgba(await decodeBase64Png(this.state.history[ib].response.image, size));
    const diff = absDiff(a, b);
    const boxes = [this.state.history[ia], this.state.history[ib]].map((e) => {
      const box = e.request.pathology?.box;
      return box ? { x: box[0], y: box[1], w: box[2], h: box[3] } : null;
    });
    const stats = diffStats(diff, boxUnionMask(size, boxes));
    this.el.compareInfo.textContent =
      `max |Δ|=${stats.maxAbs}  mean |Δ|=${stats.meanAbs.toFixed(2)}  ` +
      `inside-box share=${(stats.insideFraction * 100).toFixed(1)}%`;
    const ctx = this.el.compareCanvas.getContext("2d")!;
    this.el.compareCanvas.width = size * SCALE;
    this.el.compareCanvas.height = size * SCALE;
    ctx.imageSmoothingEnabled = false;
    const off = document.createElement("canvas");
    off.width = size;
    off.height = size;
    const offCtx = off.getContext("2d")!;
    const gray = new Uint8ClampedArray(new ArrayBuffer(size * size * 4));
    for (let i = 0; i < size * size; i++) {
      gray[i * 4] = gray[i * 4 + 1] = gray[i * 4 + 2] = a[i];
      gray[i * 4 + 3] = 255;
    }
    offCtx.putImageData(new ImageData(gray, size, size), 0, 0);
    offCtx.putImageData(new ImageData(diffToRgba(diff), size, size), 0, 0);
    ctx.drawImage(off, 0, 0, size * SCALE, size * SCALE);
  }
}

declare global {
  interface Window {
    studioApp?: StudioApp;
  }
}

if (typeof document !== "undefined" && document.getElementById("mask-canvas")) {
  void StudioApp.boot(localStorage.getItem("maskdiff.baseUrl") ?? "http://127.0.0.1:8765").then((app) => {
    window.studioApp = app;
  });
}
