import * as tf from '@tensorflow/tfjs';

import { BOS, EOS, TrainingPair, Vocab, detokenize, tokenize } from './data.js';
import { Seq2Seq } from './model.js';
import { Artifact } from './training.js';
import { eventsFromLinear } from './linear.js';
import type { PredictionRow, ScoreRow } from './files.js';

export interface ScoreOptions {
  split: string; // stamped on every score row
  beamSize: number;
  decodeLength: number; // cap on generated tokens
  geometric: boolean; // geometric instead of arithmetic token-probability mean
}

export const DEFAULT_OPTIONS: ScoreOptions = {
  split: 'train',
  beamSize: 3,
  decodeLength: 128,
  geometric: false,
};

/** Mean of per-token probabilities; arithmetic by default. */
export function combineProbs(probs: number[], geometric = false): number {
  if (probs.length === 0) throw new Error('no token probabilities to combine');
  if (geometric) {
    const logSum = probs.reduce((acc, p) => acc + Math.log(Math.max(p, 1e-30)), 0);
    return Math.exp(logSum / probs.length);
  }
  return probs.reduce((acc, p) => acc + p, 0) / probs.length;
}

const clamp01 = (p: number) => Math.min(1, Math.max(0, p));

/**
 * Teacher-forced probability of each target token given the source and the
 * gold prefix, combined with combineProbs. The end token is not part of the
 * mean; an empty target scores the model's probability of stopping at once.
 */
export function sequenceScore(
  model: Seq2Seq,
  vocab: Vocab,
  srcIds: number[],
  tgtIds: number[],
  geometric = false,
): number {
  const probs = tf.tidy(() => {
    const logits = model.teacherLogits(srcIds, [BOS, ...tgtIds]);
    const rows = tf.softmax(logits, -1).dataSync();
    if (tgtIds.length === 0) return [rows[EOS]];
    return tgtIds.map((id, t) => rows[t * vocab.size + id]);
  });
  return clamp01(combineProbs(probs, geometric));
}

interface Beam {
  ids: number[]; // generated ids, no control tokens
  probs: number[]; // probability of each generated token when chosen
  logProb: number;
  row: number; // row into the current hidden-state batch; -1 once finished
}

export interface Decoded {
  ids: number[];
  probs: number[]; // per-token probabilities along the decoded sequence
  finished: boolean;
}

function compareBeams(a: Beam, b: Beam): number {
  if (a.logProb !== b.logProb) return b.logProb - a.logProb;
  // deterministic tie-break on the token sequence
  const n = Math.min(a.ids.length, b.ids.length);
  for (let i = 0; i < n; i++) {
    if (a.ids[i] !== b.ids[i]) return a.ids[i] - b.ids[i];
  }
  return a.ids.length - b.ids.length;
}

/** Beam-search decode; deterministic for fixed weights and inputs. */
export function beamSearch(
  model: Seq2Seq,
  vocab: Vocab,
  srcIds: number[],
  beamSize: number,
  decodeLength: number,
): Decoded {
  if (beamSize < 1) throw new Error('beam size must be at least 1');
  return tf.tidy(() => {
    const { states, last } = model.encode(srcIds);
    let live: Beam[] = [{ ids: [], probs: [], logProb: 0, row: 0 }];
    let hidden = last;
    const done: Beam[] = [];

    for (let step = 0; step < decodeLength && live.length > 0; step++) {
      const lastIds = live.map((beam) => (beam.ids.length ? beam.ids[beam.ids.length - 1] : BOS));
      hidden = model.decodeStep(lastIds, hidden);
      const logits = model.project(hidden, states);
      const logProbs = tf.logSoftmax(logits, -1).dataSync();

      const candidates: Beam[] = [];
      live.forEach((beam, b) => {
        const offset = b * vocab.size;
        // top expansions of this beam by a partial scan over the vocabulary
        const order = [...Array(vocab.size).keys()].sort(
          (x, y) => logProbs[offset + y] - logProbs[offset + x] || x - y,
        );
        for (const id of order.slice(0, beamSize)) {
          const lp = logProbs[offset + id];
          const prob = clamp01(Math.exp(lp));
          if (id === EOS) {
            done.push({
              ids: beam.ids,
              // an immediate stop has no content tokens; score the stop itself
              probs: beam.probs.length ? beam.probs : [prob],
              logProb: beam.logProb + lp,
              row: -1,
            });
          } else {
            candidates.push({
              ids: [...beam.ids, id],
              probs: [...beam.probs, prob],
              logProb: beam.logProb + lp,
              row: b,
            });
          }
        }
      });
      if (done.length >= beamSize) break;
      candidates.sort(compareBeams);
      const survivors = candidates.slice(0, beamSize);
      if (survivors.length === 0) break;
      hidden = tf.gather(hidden, tf.tensor1d(survivors.map((s) => s.row), 'int32')) as tf.Tensor2D;
      live = survivors.map((beam, row) => ({ ...beam, row }));
    }

    if (done.length > 0) {
      done.sort(compareBeams);
      return { ids: done[0].ids, probs: done[0].probs, finished: true };
    }
    live.sort(compareBeams);
    const fallback = live[0] ?? { ids: [], probs: [1], logProb: 0, row: -1 };
    return {
      ids: fallback.ids,
      probs: fallback.probs.length ? fallback.probs : [1],
      finished: false,
    };
  });
}

/**
 * Score every pair and decode a prediction for it. s_gold is the combined
 * token probability of the gold target, s_pred the same measure along the
 * beam result. Rows come back sorted by pair id; out-of-range probabilities
 * fail here rather than reaching a file.
 */
export function scoreAndPredict(
  artifact: Artifact,
  pairs: TrainingPair[],
  options: Partial<ScoreOptions> = {},
): { scores: ScoreRow[]; predictions: PredictionRow[] } {
  const opts = { ...DEFAULT_OPTIONS, ...options };
  const { model, vocab, config } = artifact;
  const scores: ScoreRow[] = [];
  const predictions: PredictionRow[] = [];
  for (const pair of [...pairs].sort((a, b) => (a.id < b.id ? -1 : a.id > b.id ? 1 : 0))) {
    const srcIds = vocab.encode(tokenize(pair.source).slice(0, config.maxLength));
    if (srcIds.length === 0) throw new Error(`pair ${pair.id} has an empty input`);
    const tgtIds = vocab.encode(tokenize(pair.target).slice(0, config.maxLength));

    const sGold = sequenceScore(model, vocab, srcIds, tgtIds, opts.geometric);
    const decoded = beamSearch(model, vocab, srcIds, opts.beamSize, opts.decodeLength);
    const sPred = clamp01(combineProbs(decoded.probs, opts.geometric));
    for (const [name, value] of [['s_gold', sGold], ['s_pred', sPred]] as const) {
      if (!Number.isFinite(value) || value < 0 || value > 1) {
        throw new Error(`${name} out of range for ${pair.id}: ${value}`);
      }
    }

    const rawText = detokenize(vocab.decode(decoded.ids));
    const { events, warnings } = eventsFromLinear(rawText);
    if (!decoded.finished) warnings.push('decode hit the length cap before the end token');
    scores.push({ id: pair.id, sGold, sPred, split: opts.split });
    predictions.push({ id: pair.id, events, rawText, warnings });
  }
  return { scores, predictions };
}
