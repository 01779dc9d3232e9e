import * as fs from 'node:fs';

import type { LooseEvent } from './linear.js';

/**
 * JSON with recursively sorted object keys. Used for config hashing and for
 * every file this package writes, so repeated runs emit identical bytes.
 */
export function stableStringify(value: unknown): string {
  if (value === undefined) {
    throw new Error('undefined is not serializable');
  }
  if (Array.isArray(value)) {
    return '[' + value.map((item) => stableStringify(item ?? null)).join(',') + ']';
  }
  if (value !== null && typeof value === 'object') {
    const entries = Object.entries(value as Record<string, unknown>)
      .filter(([, v]) => v !== undefined)
      .sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0));
    return '{' + entries.map(([k, v]) => JSON.stringify(k) + ':' + stableStringify(v)).join(',') + '}';
  }
  return JSON.stringify(value);
}

export interface ScoreRow {
  id: string;
  sGold: number;
  sPred: number;
  split: string;
}

export interface PredictionRow {
  id: string;
  events: LooseEvent[];
  rawText: string;
  warnings: string[];
}

function writeJsonl(objects: unknown[], path: string): void {
  const lines = objects.map((obj) => stableStringify(obj)).join('\n');
  fs.writeFileSync(path, lines + (lines ? '\n' : ''));
}

/** Score file in the pipeline's format: {"id", "s_gold", "s_pred", "split"} per line. */
export function writeScoreFile(rows: ScoreRow[], path: string): void {
  writeJsonl(
    rows.map((row) => ({ id: row.id, s_gold: row.sGold, s_pred: row.sPred, split: row.split })),
    path,
  );
}

/** Prediction file in the pipeline's format: {"id", "events", "raw_text", "warnings"}. */
export function writePredictionFile(rows: PredictionRow[], path: string): void {
  writeJsonl(
    rows.map((row) => ({
      id: row.id,
      events: row.events,
      raw_text: row.rawText,
      warnings: row.warnings,
    })),
    path,
  );
}
