// Model-handle abstraction for the block-wise denoising loop.
//
// A real masked-diffusion checkpoint plugs in by implementing `Denoiser`:
// one call per step returns, for every position of the current block, the
// full-vocabulary distribution conditioned on the prompt, the frozen
// earlier blocks, and the current partially masked block state.  The
// bundled toy denoiser is a deterministic stand-in with the same contract
// so the loop, bookkeeping, and emitted files can be exercised end to end
// without model weights.

import { fnv1a } from "./rng.js";
import { Vocab } from "./types.js";

export interface Denoiser {
  vocab: Vocab;
  name: string;
  /**
   * Distributions over the vocabulary for each position of `state`
   * (mask_id marks masked positions).  Probabilities for the mask token
   * itself must be zero.
   */
  predict(prompt: string, prefix: number[][], blockIndex: number, state: number[]): number[][];
}

const WORDS = [
  "the", "a", "model", "answer", "is", "we", "see", "that", "value", "of",
  "state", "step", "token", "block", "mask", "final", "result", "yes", "no", "sum",
];

export function toyVocab(): Vocab {
  const entries = [...WORDS.map((w) => ` ${w}`), "[MASK]", "<eos>"];
  return {
    entries,
    mask_id: WORDS.length,
    special_ids: [WORDS.length, WORDS.length + 1],
  };
}

export class ToyDenoiser implements Denoiser {
  vocab = toyVocab();
  name = "toy-denoiser";

  constructor(private seed: number) {}

  predict(prompt: string, prefix: number[][], blockIndex: number, state: number[]): number[][] {
    const nVocab = this.vocab.entries.length;
    const maskId = this.vocab.mask_id;
    const eosId = maskId + 1;
    const stateKey = state.join(",") + "|" + prefix.map((b) => b.join(",")).join(";");
    return state.map((_, position) => {
      const logits = new Array(nVocab).fill(0);
      for (let v = 0; v < nVocab; v++) {
        if (v === maskId) {
          logits[v] = -Infinity;
          continue;
        }
        logits[v] = (fnv1a([this.seed, prompt, blockIndex, position, v, stateKey]) / 0xffffffff) * 4.0;
      }
      // A prompt-anchored preferred token keeps generations mostly stable
      // across steps, so commit confidence is high and flips are rare but
      // present.
      const anchor = fnv1a([this.seed, prompt, blockIndex, position]) % (nVocab - 2);
      logits[anchor] += 3.0;
      if (position === state.length - 1 && blockIndex > 0) {
        logits[eosId] += 2.0; // later blocks tend to close with end-of-text
      }
      const maxLogit = Math.max(...logits.filter((x) => isFinite(x)));
      const exps = logits.map((x) => (isFinite(x) ? Math.exp(x - maxLogit) : 0));
      const total = exps.reduce((a, b) => a + b, 0);
      return exps.map((e) => e / total);
    });
  }
}

export function entropy(dist: number[]): number {
  let h = 0;
  for (const p of dist) {
    if (p > 0) h -= p * Math.log(p);
  }
  return h;
}

export function argmax(dist: number[]): number {
  let best = 0;
  for (let v = 1; v < dist.length; v++) {
    if (dist[v] > dist[best]) best = v;
  }
  return best;
}
