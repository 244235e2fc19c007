#!/usr/bin/env node
import { readFileSync } from "node:fs";

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { ToyDenoiser } from "./denoiser.js";
import { emitTrace, headerFor } from "./hook.js";
import { PRESETS } from "./presets.js";
import { postJson } from "./retry.js";
import { serve } from "./server.js";
import { TraceWriter } from "./tracefile.js";

interface DatasetLine {
  instance_id: string;
  prompt: string;
}

function readDataset(path: string): DatasetLine[] {
  return readFileSync(path, "utf-8")
    .split("\n")
    .filter((line) => line.trim())
    .map((line) => {
      const obj = JSON.parse(line);
      if (typeof obj.instance_id !== "string" || typeof obj.prompt !== "string") {
        throw new Error(`dataset line needs instance_id and prompt: ${line.slice(0, 80)}`);
      }
      return obj as DatasetLine;
    });
}

async function cmdEmit(args: {
  model: string;
  dataset: string;
  preset: string;
  out: string;
  seed: number;
  remaskRate: number;
  mc: number;
}): Promise<void> {
  const preset = PRESETS[args.preset];
  if (!preset) {
    throw new Error(`unknown preset ${args.preset}; known: ${Object.keys(PRESETS).join(", ")}`);
  }
  if (args.model !== "toy") {
    throw new Error(
      `model ${args.model} is not bundled; implement the Denoiser interface for it (see README)`
    );
  }
  const denoiser = new ToyDenoiser(args.seed);
  const mcSamples = args.preset === "mmlu" ? 0 : args.mc;
  const writer = new TraceWriter(args.out, headerFor(denoiser, args.preset, preset));
  let emitted = 0;
  let skipped = 0;
  for (const { instance_id, prompt } of readDataset(args.dataset)) {
    try {
      const record = emitTrace(denoiser, instance_id, prompt, preset, {
        seed: args.seed,
        remaskRate: args.remaskRate,
        mcSamples,
      });
      await writer.add(record);
      emitted++;
    } catch (err) {
      skipped++;
      console.error(`skipping ${instance_id}: ${(err as Error).message}`);
    }
  }
  await writer.close();
  console.log(`wrote ${emitted} instance(s) to ${args.out} (${skipped} skipped)`);
  if (skipped > 0) process.exitCode = 1;
}

async function cmdServeSim(args: { port: number }): Promise<void> {
  const server = await serve(args.port);
  const address = server.address();
  const port = typeof address === "object" && address ? address.port : args.port;
  console.log(`similarity service listening on :${port} (POST /v1/similarity)`);
  await new Promise(() => undefined); // runs until killed
}

async function cmdProbe(args: { url: string }): Promise<void> {
  const result = (await postJson(args.url, { pairs: [["probe", "probe"]] })) as {
    scores: number[];
  };
  console.log(`endpoint healthy, identity score ${result.scores[0]}`);
}

void yargs(hideBin(process.argv))
  .scriptName("dlmuq-adapter")
  .command(
    "emit",
    "run the denoising hook over a prompt dataset and emit a trace file",
    (y) =>
      y
        .option("model", { type: "string", default: "toy" })
        .option("dataset", { type: "string", demandOption: true })
        .option("preset", { type: "string", demandOption: true })
        .option("out", { type: "string", demandOption: true })
        .option("seed", { type: "number", default: 0 })
        .option("remask-rate", { type: "number", default: 0.02 })
        .option("mc", { type: "number", default: 16 }),
    (argv) =>
      cmdEmit({
        model: argv.model,
        dataset: argv.dataset,
        preset: argv.preset,
        out: argv.out,
        seed: argv.seed,
        remaskRate: argv["remask-rate"],
        mc: argv.mc,
      })
  )
  .command(
    "serve-sim",
    "serve the /v1/similarity endpoint",
    (y) => y.option("port", { type: "number", default: 8341 }),
    (argv) => cmdServeSim({ port: argv.port })
  )
  .command(
    "probe",
    "POST an identity pair to a similarity endpoint",
    (y) => y.option("url", { type: "string", demandOption: true }),
    (argv) => cmdProbe({ url: argv.url })
  )
  .demandCommand(1)
  .strict()
  .fail((msg, err) => {
    console.error(msg ?? err.message);
    process.exit(2);
  })
  .parse();
