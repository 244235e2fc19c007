import { execFile } from "node:child_process";
import { Server } from "node:http";
import { promisify } from "node:util";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { serve } from "../src/server.js";

let server: Server;
let url: string;

beforeAll(async () => {
  server = await serve(0);
  const address = server.address();
  const port = typeof address === "object" && address ? address.port : 0;
  url = `http://127.0.0.1:${port}/v1/similarity`;
});

afterAll(() => {
  server.close();
});

async function post(body: unknown, raw = false): Promise<Response> {
  return fetch(url, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: raw ? (body as string) : JSON.stringify(body),
  });
}

describe("similarity wire protocol", () => {
  it("scores an identical pair at least 0.99", async () => {
    const resp = await post({ pairs: [["the same text", "the same text"]] });
    expect(resp.status).toBe(200);
    const { scores } = (await resp.json()) as { scores: number[] };
    expect(scores[0]).toBeGreaterThanOrEqual(0.99);
  });

  it("returns one ordered score per pair for a batch of 64", async () => {
    const pairs = Array.from({ length: 64 }, (_, i) => [
      `left text ${i}`,
      i % 2 ? `left text ${i}` : `completely different ${i}`,
    ]);
    const resp = await post({ pairs });
    expect(resp.status).toBe(200);
    const { scores } = (await resp.json()) as { scores: number[] };
    expect(scores).toHaveLength(64);
    scores.forEach((s, i) => {
      expect(s).toBeGreaterThanOrEqual(0);
      expect(s).toBeLessThanOrEqual(1);
      if (i % 2) expect(s).toBe(1);
      else expect(s).toBeLessThan(1);
    });
  });

  it("rejects malformed bodies with HTTP 400", async () => {
    expect((await post({})).status).toBe(400);
    expect((await post({ pairs: "nope" })).status).toBe(400);
    expect((await post({ pairs: [["only one"]] })).status).toBe(400);
    expect((await post({ pairs: [[1, 2]] })).status).toBe(400);
    expect((await post("{not json", true)).status).toBe(400);
  });

  it("is accepted by the engine's remote similarity client", async () => {
    const snippet = `
import json
from dlmuq.dissimilarity import SimilarityProvider, similarity_batch
provider = SimilarityProvider("remote", endpoint=${JSON.stringify(url)}, batch_size=4)
scores = similarity_batch(provider, [("a b c", "a b c"), ("a b c", "x y z"), ("one two", "one two three")])
print(json.dumps(scores))
`;
    // Async spawn: the service runs in this process, so the event loop must
    // stay free to answer while the engine client talks to it.
    const { stdout } = await promisify(execFile)("python3", ["-c", snippet]);
    const scores = JSON.parse(stdout.trim()) as number[];
    expect(scores).toHaveLength(3);
    expect(scores[0]).toBe(1);
    expect(scores[1]).toBe(0);
    expect(scores[2]).toBeGreaterThan(0.5);
  });
});
