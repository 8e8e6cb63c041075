/** Wire types mirroring the generation service's JSON API. */

export interface PathologySpec {
  label: string;
  box: [number, number, number, number] | null;
}

export interface GenerateRequest {
  anatomy_mask?: string; // base64 RGB PNG (R=lungs, G=heart, B=aorta)
  preset?: string;
  pathology?: PathologySpec | null;
  seed?: number | null;
  s?: number | null;
  include_intermediate?: boolean;
}

export interface EditRequest {
  image: string; // base64 grayscale PNG
  pathology: PathologySpec;
  seed?: number | null;
}

export interface GenerateResponse {
  image: string;
  intermediate: string | null;
  manifest: Record<string, unknown>;
  timing_ms: number;
}

export interface LabelInfo {
  id: number;
  name: string;
}

export interface PresetInfo {
  id: string;
  name: string;
  size: number;
  mask: string; // base64 RGB PNG
}

export interface HealthInfo {
  ready: boolean;
  image_size?: number;
  T?: number;
  checkpoints?: Record<string, string | null>;
}

export interface FieldErrorBody {
  errors: Array<{ field: string; message: string }>;
}

export const ORGAN_ORDER = ["lungs", "heart", "aorta"] as const;
export type OrganName = (typeof ORGAN_ORDER)[number];
