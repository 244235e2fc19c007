import { describe, expect, it } from "vitest";

import { ToyDenoiser } from "../src/denoiser.js";
import { emitMcSamples } from "../src/hook.js";
import { Rng } from "../src/rng.js";

// chi-square critical value at p = 0.01 for 9 degrees of freedom
const CHI2_99_DOF9 = 21.666;

describe("mask-subset sampling", () => {
  it("draws subset sizes uniformly (chi-square at p > 0.01 over 10^4 draws)", () => {
    const denoiser = new ToyDenoiser(0);
    const finalBlocks = [
      [0, 1, 2, 3, 4],
      [5, 6, 7, 8, 9],
    ]; // ten content tokens
    const rng = new Rng(12345);
    const draws = 10_000;
    const { samples } = emitMcSamples(denoiser, "uniformity probe", finalBlocks, draws, rng);
    expect(samples).toHaveLength(draws);

    const counts = new Array<number>(10).fill(0);
    for (const s of samples) {
      expect(s.l).toBeGreaterThanOrEqual(1);
      expect(s.l).toBeLessThanOrEqual(10);
      counts[s.l - 1]++;
    }
    const expected = draws / 10;
    const chi2 = counts.reduce((acc, c) => acc + ((c - expected) ** 2) / expected, 0);
    expect(chi2).toBeLessThan(CHI2_99_DOF9);
  });

  it("produces well-formed samples", () => {
    const denoiser = new ToyDenoiser(3);
    const finalBlocks = [
      [0, 1, 2],
      [3, 4, 21], // trailing end-of-text is not maskable content
    ];
    const rng = new Rng(9);
    const { samples } = emitMcSamples(denoiser, "shape probe", finalBlocks, 200, rng);
    for (const s of samples) {
      expect(new Set(s.masked_positions).size).toBe(s.l);
      expect(s.l).toBeLessThanOrEqual(5);
      expect(Math.max(...s.masked_positions)).toBeLessThan(6);
      expect(s.masked_positions).not.toContain(5); // the end-of-text slot
      expect(s.sum_logprob).toBeLessThanOrEqual(0);
      expect(Number.isFinite(s.sum_logprob)).toBe(true);
    }
  });

  it("skips single-token outputs with a reason flag", () => {
    const denoiser = new ToyDenoiser(3);
    const result = emitMcSamples(denoiser, "one token", [[0, 21]], 16, new Rng(1));
    expect(result.samples).toHaveLength(0);
    expect(result.reason).toBe("single_token_output");
  });

  it("returns an empty list for a zero budget", () => {
    const denoiser = new ToyDenoiser(3);
    const result = emitMcSamples(denoiser, "none", [[0, 1, 2]], 0, new Rng(1));
    expect(result.samples).toHaveLength(0);
    expect(result.reason).toBeUndefined();
  });
});
