// Block-wise generation hook: runs the denoising loop, keeps per-position
// bookkeeping (previous argmax, tentative placements, re-mask events), and
// emits one engine-conformant instance record per prompt.
//
// A position may be tentatively placed, re-masked by the sampler, and placed
// again; only its final placement is marked `committed_now`, so every
// position carries exactly one commit whose token equals the final token.

import { argmax, Denoiser, entropy } from "./denoiser.js";
import { stepsPerBlock, TaskPreset } from "./presets.js";
import { Rng } from "./rng.js";
import {
  GenerationParams,
  InstanceRecord,
  MCMaskSample,
  PositionObs,
  StepRecord,
  TraceHeader,
} from "./types.js";

export interface EmitOptions {
  seed: number;
  remaskRate?: number;
  mcSamples?: number;
  /** Confidence at which positions commit beyond the even schedule. */
  parallelThreshold?: number;
}

export function paramsFor(preset: TaskPreset, options: EmitOptions): GenerationParams {
  return {
    genLength: preset.genLength,
    blockLength: preset.blockLength,
    steps: preset.steps,
    remaskRate: options.remaskRate ?? 0,
    mcSamples: options.mcSamples ?? 16,
  };
}

export function headerFor(denoiser: Denoiser, task: string, preset: TaskPreset): TraceHeader {
  return {
    format_version: 1,
    model_name: denoiser.name,
    task,
    max_steps_per_block: stepsPerBlock(preset),
    block_length: preset.blockLength,
    num_blocks: Math.ceil(preset.genLength / preset.blockLength),
    vocab: denoiser.vocab,
  };
}

interface WorkingObs extends PositionObs {}

function generateBlock(
  denoiser: Denoiser,
  prompt: string,
  prefix: number[][],
  blockIndex: number,
  length: number,
  budget: number,
  rng: Rng,
  remaskRate: number,
  parallelThreshold: number
): { final: number[]; records: StepRecord[] } {
  const maskId = denoiser.vocab.mask_id;
  const state = new Array<number>(length).fill(maskId);
  const placedLogprob = new Array<number>(length).fill(0);
  const lastPlacement = new Array<{ step: number } | null>(length).fill(null);
  const records: StepRecord[] = [];

  for (let step = 1; step <= budget; step++) {
    if (!state.includes(maskId)) break;
    const wasMasked = state.map((t) => t === maskId);
    const dists = denoiser.predict(prompt, prefix, blockIndex, state);

    // Re-mask phase: previously placed tokens may be sent back to the mask
    // state, but never so late that the schedule cannot finish in budget.
    const remaskedNow = new Array<boolean>(length).fill(false);
    const maskedCount = wasMasked.filter(Boolean).length;
    if (remaskRate > 0 && step > 1 && budget - step > maskedCount + 1) {
      for (let k = 0; k < length; k++) {
        if (!wasMasked[k] && rng.next() < remaskRate) {
          remaskedNow[k] = true;
        }
      }
    }

    // Placement phase: even schedule over the remaining budget, plus any
    // masked position already above the parallel-decoding confidence bar.
    const remainingSteps = budget - step + 1;
    const maskedIdx = state
      .map((t, k) => (t === maskId ? k : -1))
      .filter((k) => k >= 0);
    const scheduled = Math.ceil(maskedIdx.length / remainingSteps);
    const byConfidence = [...maskedIdx].sort(
      (a, b) => Math.max(...dists[b]) - Math.max(...dists[a]) || a - b
    );
    const toPlace = new Set<number>();
    for (const k of byConfidence) {
      if (toPlace.size < scheduled || Math.max(...dists[k]) >= parallelThreshold) {
        toPlace.add(k);
      }
    }

    const positions: WorkingObs[] = [];
    for (let k = 0; k < length; k++) {
      if (wasMasked[k]) {
        const dist = dists[k];
        const top = argmax(dist);
        positions.push({
          position: k,
          argmax_token: top,
          argmax_logprob: Math.min(Math.log(dist[top]), 0),
          entropy: entropy(dist),
          was_masked: true,
          committed_now: false, // the final placement is marked after the loop
          remasked_now: false,
        });
      } else {
        positions.push({
          position: k,
          argmax_token: state[k],
          argmax_logprob: placedLogprob[k],
          entropy: 0,
          was_masked: false,
          committed_now: false,
          remasked_now: remaskedNow[k],
        });
      }
    }
    records.push({ block: blockIndex, step, positions });

    for (let k = 0; k < length; k++) {
      if (remaskedNow[k]) {
        state[k] = maskId;
        lastPlacement[k] = null;
      } else if (wasMasked[k] && toPlace.has(k)) {
        state[k] = positions[k].argmax_token;
        placedLogprob[k] = positions[k].argmax_logprob;
        lastPlacement[k] = { step };
      }
    }
  }

  for (let k = 0; k < length; k++) {
    const placement = lastPlacement[k];
    if (placement === null) throw new Error(`position ${k} never committed`);
    records[placement.step - 1].positions[k].committed_now = true;
  }
  return { final: state, records };
}

export function emitTrace(
  denoiser: Denoiser,
  instanceId: string,
  prompt: string,
  preset: TaskPreset,
  options: EmitOptions
): InstanceRecord {
  const params = paramsFor(preset, options);
  const rng = new Rng(options.seed ^ hashString(instanceId));
  const budget = stepsPerBlock(preset);
  const numBlocks = Math.ceil(params.genLength / params.blockLength);
  const finalBlocks: number[][] = [];
  const steps: StepRecord[] = [];
  const perBlockSteps: number[] = [];

  for (let b = 0; b < numBlocks; b++) {
    const length = Math.min(params.blockLength, params.genLength - b * params.blockLength);
    const { final, records } = generateBlock(
      denoiser,
      prompt,
      finalBlocks,
      b,
      length,
      budget,
      rng,
      params.remaskRate,
      options.parallelThreshold ?? 0.9
    );
    finalBlocks.push(final);
    steps.push(...records);
    perBlockSteps.push(records.length);
  }

  const mc = emitMcSamples(denoiser, prompt, finalBlocks, params.mcSamples, rng);
  return {
    instance_id: instanceId,
    final_tokens: finalBlocks,
    steps,
    steps_per_block: perBlockSteps,
    nfe: perBlockSteps.reduce((a, b) => a + b, 0),
    mc_samples: mc.samples,
  };
}

export interface McResult {
  samples: MCMaskSample[];
  reason?: string;
}

export function emitMcSamples(
  denoiser: Denoiser,
  prompt: string,
  finalBlocks: number[][],
  n: number,
  rng: Rng
): McResult {
  const special = new Set(denoiser.vocab.special_ids);
  const flat = finalBlocks.flat();
  const contentPositions = flat
    .map((t, i) => (special.has(t) ? -1 : i))
    .filter((i) => i >= 0);
  if (n <= 0) return { samples: [] };
  if (contentPositions.length < 2) {
    return { samples: [], reason: "single_token_output" };
  }

  const lengths = finalBlocks.map((b) => b.length);
  const offsets = lengths.map((_, i) => lengths.slice(0, i).reduce((a, b) => a + b, 0));
  const maskId = denoiser.vocab.mask_id;
  const samples: MCMaskSample[] = [];
  for (let m = 0; m < n; m++) {
    const l = rng.int(1, contentPositions.length);
    const chosen = rng
      .sampleWithoutReplacement(contentPositions.length, l)
      .map((i) => contentPositions[i]);
    let sum = 0;
    finalBlocks.forEach((block, b) => {
      const local = chosen
        .filter((g) => g >= offsets[b] && g < offsets[b] + block.length)
        .map((g) => g - offsets[b]);
      if (local.length === 0) return;
      const state = [...block];
      for (const k of local) state[k] = maskId;
      const dists = denoiser.predict(prompt, finalBlocks.slice(0, b), b, state);
      for (const k of local) {
        sum += Math.log(Math.max(dists[k][block[k]], Number.MIN_VALUE));
      }
    });
    samples.push({
      sample_index: m,
      l,
      masked_positions: [...chosen].sort((a, b) => a - b),
      sum_logprob: Math.min(sum, 0),
    });
  }
  return { samples };
}

function hashString(s: string): number {
  let h = 2166136261;
  for (let i = 0; i < s.length; i++) {
    h ^= s.charCodeAt(i);
    h = Math.imul(h, 16777619);
  }
  return h >>> 0;
}
