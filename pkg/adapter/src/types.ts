// Wire types mirroring the engine's trace file format (format_version 1).

export interface Vocab {
  entries: string[];
  mask_id: number;
  special_ids: number[];
}

export interface TraceHeader {
  format_version: 1;
  model_name: string;
  task: string;
  max_steps_per_block: number;
  block_length: number;
  num_blocks: number;
  vocab: Vocab;
}

export interface PositionObs {
  position: number;
  argmax_token: number;
  argmax_logprob: number;
  entropy: number;
  was_masked: boolean;
  committed_now: boolean;
  remasked_now: boolean;
}

export interface StepRecord {
  block: number;
  step: number;
  positions: PositionObs[];
}

export interface MCMaskSample {
  sample_index: number;
  l: number;
  masked_positions: number[];
  sum_logprob: number;
}

export interface InstanceRecord {
  instance_id: string;
  final_tokens: number[][];
  steps: StepRecord[];
  steps_per_block: number[];
  nfe: number;
  mc_samples: MCMaskSample[];
}

export interface GenerationParams {
  genLength: number;
  blockLength: number;
  steps: number;
  remaskRate: number;
  mcSamples: number;
}
