import express, { Express } from "express";
import { Server } from "node:http";

import { scorePair } from "./similarity.js";

export type PairScorer = (a: string, b: string) => number;

export function buildApp(scorer: PairScorer = scorePair): Express {
  const app = express();
  app.use(express.json({ limit: "16mb" }));

  app.post("/v1/similarity", (req, res) => {
    const pairs = req.body?.pairs;
    if (
      !Array.isArray(pairs) ||
      !pairs.every(
        (p: unknown) =>
          Array.isArray(p) && p.length === 2 && typeof p[0] === "string" && typeof p[1] === "string"
      )
    ) {
      res.status(400).json({ error: "body must be {\"pairs\": [[textA, textB], ...]}" });
      return;
    }
    const scores = pairs.map(([a, b]: [string, string]) =>
      Math.min(1, Math.max(0, scorer(a, b)))
    );
    res.json({ scores });
  });

  // Malformed JSON from express.json surfaces as a 400, not a crash.
  app.use((err: Error & { status?: number }, _req: express.Request, res: express.Response, _next: express.NextFunction) => {
    res.status(err.status ?? 400).json({ error: err.message });
  });

  return app;
}

export function serve(port: number, scorer?: PairScorer): Promise<Server> {
  const app = buildApp(scorer);
  return new Promise((resolve) => {
    const server = app.listen(port, () => resolve(server));
  });
}
