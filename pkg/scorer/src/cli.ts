#!/usr/bin/env node
import * as fs from 'node:fs';
import * as path from 'node:path';
import { parseArgs } from 'node:util';
import { pathToFileURL } from 'node:url';

import { loadPairs } from './data.js';
import { DEFAULT_CONFIG, TrainConfig, fineTune, loadArtifact } from './training.js';
import { DEFAULT_OPTIONS, scoreAndPredict } from './scoring.js';
import { stableStringify, writePredictionFile, writeScoreFile } from './files.js';

const USAGE = `usage: pvscorer <command> [options]

commands:
  finetune   train a scorer on a pairs.jsonl file
             --pairs FILE --output-dir DIR [--learning-rate F] [--max-epochs N]
             [--patience N] [--warmup-ratio F] [--max-length N]
             [--embed-dim N] [--hidden-dim N] [--seed N]
  score      emit scores.jsonl and predictions.jsonl for a pairs.jsonl file
             --model DIR --pairs FILE --output-dir DIR [--split NAME]
             [--beam-size N] [--decode-length N] [--geometric]
`;

class UsageError extends Error {}

function numeric(values: Record<string, unknown>, key: string, fallback: number): number {
  const raw = values[key];
  if (raw === undefined) return fallback;
  const parsed = Number(raw);
  if (!Number.isFinite(parsed)) throw new UsageError(`--${key} expects a number, got ${raw}`);
  return parsed;
}

function required(values: Record<string, unknown>, key: string): string {
  const raw = values[key];
  if (typeof raw !== 'string' || raw === '') throw new UsageError(`missing required option --${key}`);
  return raw;
}

function runFinetune(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      pairs: { type: 'string' },
      'output-dir': { type: 'string' },
      'learning-rate': { type: 'string' },
      'max-epochs': { type: 'string' },
      patience: { type: 'string' },
      'warmup-ratio': { type: 'string' },
      'max-length': { type: 'string' },
      'embed-dim': { type: 'string' },
      'hidden-dim': { type: 'string' },
      seed: { type: 'string' },
    },
  });
  const pairs = loadPairs(required(values, 'pairs'));
  const outputDir = required(values, 'output-dir');
  const config: TrainConfig = {
    learningRate: numeric(values, 'learning-rate', DEFAULT_CONFIG.learningRate),
    maxEpochs: numeric(values, 'max-epochs', DEFAULT_CONFIG.maxEpochs),
    patience: numeric(values, 'patience', DEFAULT_CONFIG.patience),
    warmupRatio: numeric(values, 'warmup-ratio', DEFAULT_CONFIG.warmupRatio),
    maxLength: numeric(values, 'max-length', DEFAULT_CONFIG.maxLength),
    embedDim: numeric(values, 'embed-dim', DEFAULT_CONFIG.embedDim),
    hiddenDim: numeric(values, 'hidden-dim', DEFAULT_CONFIG.hiddenDim),
    seed: numeric(values, 'seed', DEFAULT_CONFIG.seed),
  };
  const artifact = fineTune(pairs, config, outputDir);
  const final = artifact.log[artifact.log.length - 1];
  console.log(
    `trained on ${pairs.length} pairs for ${artifact.log.length} epochs ` +
      `(final loss ${final.loss.toFixed(4)})`,
  );
  return 0;
}

function runScore(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      model: { type: 'string' },
      pairs: { type: 'string' },
      'output-dir': { type: 'string' },
      split: { type: 'string' },
      'beam-size': { type: 'string' },
      'decode-length': { type: 'string' },
      geometric: { type: 'boolean' },
    },
  });
  const artifact = loadArtifact(required(values, 'model'));
  const pairs = loadPairs(required(values, 'pairs'));
  const outputDir = required(values, 'output-dir');
  const options = {
    split: typeof values.split === 'string' ? values.split : DEFAULT_OPTIONS.split,
    beamSize: numeric(values, 'beam-size', DEFAULT_OPTIONS.beamSize),
    decodeLength: numeric(values, 'decode-length', DEFAULT_OPTIONS.decodeLength),
    geometric: values.geometric === true,
  };
  const { scores, predictions } = scoreAndPredict(artifact, pairs, options);
  fs.mkdirSync(outputDir, { recursive: true });
  writeScoreFile(scores, path.join(outputDir, 'scores.jsonl'));
  writePredictionFile(predictions, path.join(outputDir, 'predictions.jsonl'));
  fs.writeFileSync(
    path.join(outputDir, 'resolved_config.json'),
    stableStringify({ ...options, model: required(values, 'model') }) + '\n',
  );
  const meanGold = scores.reduce((acc, row) => acc + row.sGold, 0) / scores.length;
  const meanPred = scores.reduce((acc, row) => acc + row.sPred, 0) / scores.length;
  console.log(
    `scored ${scores.length} pairs ` +
      `(mean s_gold ${meanGold.toFixed(4)}, mean s_pred ${meanPred.toFixed(4)})`,
  );
  return 0;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  if (command === undefined || command === '--help' || command === '-h') {
    process.stderr.write(USAGE);
    return 2;
  }
  const handlers: Record<string, (args: string[]) => number> = {
    finetune: runFinetune,
    score: runScore,
  };
  const handler = handlers[command];
  if (handler === undefined) {
    process.stderr.write(`pvscorer: unknown command ${command}\n${USAGE}`);
    return 2;
  }
  try {
    return handler(rest);
  } catch (error) {
    const message = error instanceof Error ? error.message : String(error);
    process.stderr.write(`pvscorer ${command}: ${message}\n`);
    const code = (error as { code?: unknown }).code;
    const badFlags = typeof code === 'string' && code.startsWith('ERR_PARSE_ARGS');
    return error instanceof UsageError || badFlags ? 2 : 1;
  }
}

if (import.meta.url === pathToFileURL(process.argv[1] ?? '').href) {
  process.exitCode = main(process.argv.slice(2));
}
