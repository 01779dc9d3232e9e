import * as crypto from 'node:crypto';
import * as fs from 'node:fs';
import * as path from 'node:path';
import * as tf from '@tensorflow/tfjs';

import { BOS, EOS, TrainingPair, Vocab, tokenize } from './data.js';
import { Seq2Seq, mulberry32 } from './model.js';
import { stableStringify } from './files.js';

export interface TrainConfig {
  learningRate: number;
  maxEpochs: number;
  patience: number; // epochs without improvement before stopping
  warmupRatio: number; // fraction of total steps spent ramping the lr
  maxLength: number; // token truncation on both sides
  embedDim: number;
  hiddenDim: number;
  seed: number;
}

export const DEFAULT_CONFIG: TrainConfig = {
  learningRate: 3e-4,
  maxEpochs: 50,
  patience: 5,
  warmupRatio: 0.06,
  maxLength: 512,
  embedDim: 32,
  hiddenDim: 64,
  seed: 0,
};

export interface EpochLog {
  epoch: number;
  loss: number; // token-mean negative log-likelihood
  lr: number;
}

export interface Artifact {
  model: Seq2Seq;
  vocab: Vocab;
  config: TrainConfig;
  configHash: string;
  log: EpochLog[];
}

/** Hash of the canonical config serialization; stable across runs and loads. */
export function configHash(config: TrainConfig): string {
  return crypto.createHash('sha256').update(stableStringify(config)).digest('hex');
}

interface Encoded {
  src: number[];
  tgtIn: number[];
  tgtOut: number[];
}

function encodePairs(pairs: TrainingPair[], vocab: Vocab, maxLength: number): Encoded[] {
  return pairs.map((pair) => {
    const src = vocab.encode(tokenize(pair.source).slice(0, maxLength));
    if (src.length === 0) throw new Error(`pair ${pair.id} has an empty input`);
    const tgt = vocab.encode(tokenize(pair.target).slice(0, maxLength));
    return { src, tgtIn: [BOS, ...tgt], tgtOut: [...tgt, EOS] };
  });
}

// Adam with per-step lr so warm-up needs no optimizer surgery.
class Adam {
  private readonly m = new Map<string, tf.Tensor>();
  private readonly v = new Map<string, tf.Tensor>();
  private step = 0;

  constructor(
    private readonly beta1 = 0.9,
    private readonly beta2 = 0.999,
    private readonly epsilon = 1e-8,
  ) {}

  apply(variables: tf.Variable[], grads: Record<string, tf.Tensor>, lr: number): void {
    this.step += 1;
    const correction1 = 1 - this.beta1 ** this.step;
    const correction2 = 1 - this.beta2 ** this.step;
    for (const variable of variables) {
      const grad = grads[variable.name];
      if (grad === undefined) continue;
      const m0 = this.m.get(variable.name) ?? tf.zerosLike(variable);
      const v0 = this.v.get(variable.name) ?? tf.zerosLike(variable);
      const [m1, v1] = tf.tidy(() => {
        const m = tf.add(tf.mul(m0, this.beta1), tf.mul(grad, 1 - this.beta1));
        const v = tf.add(tf.mul(v0, this.beta2), tf.mul(tf.square(grad), 1 - this.beta2));
        const update = tf.div(
          tf.mul(tf.div(m, correction1), lr),
          tf.add(tf.sqrt(tf.div(v, correction2)), this.epsilon),
        );
        variable.assign(tf.sub(variable, update));
        return [tf.keep(m), tf.keep(v)];
      });
      m0.dispose();
      v0.dispose();
      this.m.set(variable.name, m1);
      this.v.set(variable.name, v1);
    }
  }

  dispose(): void {
    for (const tensor of this.m.values()) tensor.dispose();
    for (const tensor of this.v.values()) tensor.dispose();
  }
}

function pairLoss(model: Seq2Seq, vocab: Vocab, example: Encoded): tf.Scalar {
  const logits = model.teacherLogits(example.src, example.tgtIn);
  const logProbs = tf.logSoftmax(logits);
  const gold = tf.oneHot(tf.tensor1d(example.tgtOut, 'int32'), vocab.size);
  return tf.neg(tf.mean(tf.sum(tf.mul(logProbs, gold), 1))) as tf.Scalar;
}

/**
 * Train a fresh model on the pairs. Deterministic for a fixed config: weight
 * init, epoch shuffles, and the math all derive from config.seed. When
 * outputDir is given the artifact and training log are written there.
 */
export function fineTune(
  pairs: TrainingPair[],
  config: TrainConfig = DEFAULT_CONFIG,
  outputDir?: string,
): Artifact {
  if (pairs.length === 0) {
    throw new Error('fine-tuning needs at least one training pair');
  }
  const sequences = pairs.flatMap((p) => [
    tokenize(p.source).slice(0, config.maxLength),
    tokenize(p.target).slice(0, config.maxLength),
  ]);
  const vocab = Vocab.build(sequences);
  const model = Seq2Seq.init(
    { vocabSize: vocab.size, embedDim: config.embedDim, hiddenDim: config.hiddenDim },
    config.seed,
  );
  const encoded = encodePairs(pairs, vocab, config.maxLength);

  const optimizer = new Adam();
  const shuffle = mulberry32(config.seed + 17);
  const totalSteps = config.maxEpochs * encoded.length;
  const warmupSteps = Math.max(1, Math.round(config.warmupRatio * totalSteps));

  const log: EpochLog[] = [];
  let step = 0;
  let best = Infinity;
  let sinceBest = 0;
  for (let epoch = 1; epoch <= config.maxEpochs; epoch++) {
    const order = [...encoded.keys()];
    for (let i = order.length - 1; i > 0; i--) {
      const j = Math.floor(shuffle() * (i + 1));
      [order[i], order[j]] = [order[j], order[i]];
    }
    let lossSum = 0;
    let tokenCount = 0;
    let lr = 0;
    for (const index of order) {
      step += 1;
      lr = config.learningRate * Math.min(1, step / warmupSteps);
      const example = encoded[index];
      const { value, grads } = tf.variableGrads(
        () => pairLoss(model, vocab, example),
        model.variables(),
      );
      optimizer.apply(model.variables(), grads, lr);
      lossSum += value.dataSync()[0] * example.tgtOut.length;
      tokenCount += example.tgtOut.length;
      value.dispose();
      for (const grad of Object.values(grads)) grad.dispose();
    }
    const loss = lossSum / tokenCount;
    log.push({ epoch, loss, lr });
    if (loss < best) {
      best = loss;
      sinceBest = 0;
    } else {
      sinceBest += 1;
      if (sinceBest >= config.patience) break;
    }
  }
  optimizer.dispose();

  const artifact: Artifact = { model, vocab, config, configHash: configHash(config), log };
  if (outputDir !== undefined) saveArtifact(artifact, outputDir);
  return artifact;
}

export function saveArtifact(artifact: Artifact, dir: string): void {
  fs.mkdirSync(dir, { recursive: true });
  const header = {
    config: artifact.config,
    configHash: artifact.configHash,
    vocabSize: artifact.vocab.size,
  };
  fs.writeFileSync(path.join(dir, 'config.json'), stableStringify(header) + '\n');
  fs.writeFileSync(path.join(dir, 'vocab.json'), JSON.stringify(artifact.vocab.itos) + '\n');
  fs.writeFileSync(path.join(dir, 'weights.json'), stableStringify(artifact.model.toArrays()) + '\n');
  const lines = artifact.log.map((entry) => stableStringify(entry)).join('\n');
  fs.writeFileSync(path.join(dir, 'training_log.jsonl'), lines + (lines ? '\n' : ''));
}

/** Load a saved artifact; the stored config hash must match the stored config. */
export function loadArtifact(dir: string): Artifact {
  const header = JSON.parse(fs.readFileSync(path.join(dir, 'config.json'), 'utf-8'));
  const config = header.config as TrainConfig;
  const recomputed = configHash(config);
  if (recomputed !== header.configHash) {
    throw new Error(`config hash mismatch in ${dir}: ${recomputed} != ${header.configHash}`);
  }
  const vocab = new Vocab(JSON.parse(fs.readFileSync(path.join(dir, 'vocab.json'), 'utf-8')));
  if (vocab.size !== header.vocabSize) {
    throw new Error(`vocab size mismatch in ${dir}`);
  }
  const saved = JSON.parse(fs.readFileSync(path.join(dir, 'weights.json'), 'utf-8'));
  const model = Seq2Seq.fromArrays(
    { vocabSize: vocab.size, embedDim: config.embedDim, hiddenDim: config.hiddenDim },
    saved,
  );
  const log: EpochLog[] = [];
  const logPath = path.join(dir, 'training_log.jsonl');
  if (fs.existsSync(logPath)) {
    for (const line of fs.readFileSync(logPath, 'utf-8').split('\n')) {
      if (line.trim()) log.push(JSON.parse(line));
    }
  }
  return { model, vocab, config, configHash: header.configHash, log };
}
