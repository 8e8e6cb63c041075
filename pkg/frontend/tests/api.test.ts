import { describe, expect, it } from "vitest";

import { ApiError, StudioClient } from "../src/api.js";
import { GenerateRequest } from "../src/types.js";

function fakeFetch(status: number, body: unknown) {
  const calls: Array<{ url: string; init?: RequestInit }> = [];
  const fn = async (url: string, init?: RequestInit) => {
    calls.push({ url, init });
    return new Response(JSON.stringify(body), {
      status,
      headers: { "content-type": "application/json" },
    });
  };
  return { fn, calls };
}

describe("studio client", () => {
  it("posts generate requests as JSON to the right endpoint", async () => {
    const { fn, calls } = fakeFetch(200, { image: "aW1n", intermediate: null, manifest: {}, timing_ms: 12 });
    const client = new StudioClient("http://svc", fn);
    const req: GenerateRequest = {
      anatomy_mask: "bWFzaw==",
      pathology: { label: "OPACITY_LEFT_LUNG", box: [1, 2, 3, 4] },
      seed: 7,
      s: 50,
    };
    const res = await client.generate(req);
    expect(res.image).toBe("aW1n");
    expect(calls[0].url).toBe("http://svc/api/generate");
    expect(calls[0].init?.method).toBe("POST");
    expect(JSON.parse(String(calls[0].init?.body))).toEqual(req);
  });

  it("unwraps catalog envelopes", async () => {
    const { fn } = fakeFetch(200, { labels: [{ id: 0, name: "NO_FINDING" }] });
    const labels = await new StudioClient("http://svc", fn).labels();
    expect(labels[0].name).toBe("NO_FINDING");
  });

  it("surfaces field errors with their paths", async () => {
    const { fn } = fakeFetch(400, { errors: [{ field: "pathology.box", message: "outside bounds" }] });
    const client = new StudioClient("http://svc", fn);
    const err = await client.generate({ preset: "phantom-3" }).catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(400);
    expect(err.fieldErrors[0].field).toBe("pathology.box");
    expect(String(err.message)).toContain("pathology.box");
  });

  it("handles non-JSON error bodies", async () => {
    const fn = async () => new Response("boom", { status: 503 });
    const err = await new StudioClient("http://svc", fn).health().catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(503);
  });
});
