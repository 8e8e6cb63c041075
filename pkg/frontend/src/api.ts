/** Thin typed client for the generation service (fetch injectable for tests). */

import {
  EditRequest,
  FieldErrorBody,
  GenerateRequest,
  GenerateResponse,
  HealthInfo,
  LabelInfo,
  PresetInfo,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public fieldErrors: Array<{ field: string; message: string }>,
  ) {
    super(fieldErrors.map((e) => `${e.field}: ${e.message}`).join("; ") || `HTTP ${status}`);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class StudioClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let body: FieldErrorBody | null = null;
      try {
        body = (await response.json()) as FieldErrorBody;
      } catch {
        body = null;
      }
      throw new ApiError(response.status, body?.errors ?? []);
    }
    return (await response.json()) as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  health(): Promise<HealthInfo> {
    return this.request<HealthInfo>("/api/health");
  }

  async labels(): Promise<LabelInfo[]> {
    return (await this.request<{ labels: LabelInfo[] }>("/api/labels")).labels;
  }

  async presets(): Promise<PresetInfo[]> {
    return (await this.request<{ presets: PresetInfo[] }>("/api/presets")).presets;
  }

  generate(req: GenerateRequest): Promise<GenerateResponse> {
    return this.post<GenerateResponse>("/api/generate", req);
  }

  edit(req: EditRequest): Promise<GenerateResponse> {
    return this.post<GenerateResponse>("/api/edit", req);
  }
}
