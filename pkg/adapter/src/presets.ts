// Per-task generation settings: output length, block length, and the total
// diffusion-step budget (split evenly across blocks).

export interface TaskPreset {
  genLength: number;
  blockLength: number;
  steps: number;
}

export const PRESETS: Record<string, TaskPreset> = {
  mmlu: { genLength: 3, blockLength: 3, steps: 256 },
  triviaqa: { genLength: 20, blockLength: 5, steps: 256 },
  coqa: { genLength: 20, blockLength: 5, steps: 256 },
  gsm8k: { genLength: 256, blockLength: 32, steps: 256 },
  samsum: { genLength: 128, blockLength: 32, steps: 256 },
  xsum: { genLength: 128, blockLength: 32, steps: 256 },
  wmt14: { genLength: 128, blockLength: 32, steps: 256 },
  wmt19: { genLength: 128, blockLength: 32, steps: 256 },
};

export function stepsPerBlock(preset: TaskPreset): number {
  const blocks = Math.ceil(preset.genLength / preset.blockLength);
  return Math.max(1, Math.round(preset.steps / blocks));
}
