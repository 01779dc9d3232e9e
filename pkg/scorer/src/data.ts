import * as fs from 'node:fs';

// Reserved ids. Pad is kept for index stability even though the trainer
// runs unbatched.
export const PAD = 0;
export const BOS = 1;
export const EOS = 2;
export const UNK = 3;

export const SPECIALS = ['<pad>', '<bos>', '<eos>', '<unk>'] as const;

export interface TrainingPair {
  id: string;
  source: string; // instruction + schema enumeration + sentence
  target: string; // bracketed linearization of the gold events
}

/** Read pairs from a pairs.jsonl file (one {id, input, target} object per line). */
export function loadPairs(path: string): TrainingPair[] {
  const pairs: TrainingPair[] = [];
  const text = fs.readFileSync(path, 'utf-8');
  for (const line of text.split('\n')) {
    if (!line.trim()) continue;
    const obj = JSON.parse(line);
    for (const key of ['id', 'input', 'target']) {
      if (typeof obj[key] !== 'string') {
        throw new Error(`pair record lacks a string ${key} field`);
      }
    }
    pairs.push({ id: obj.id, source: obj.input, target: obj.target });
  }
  return pairs;
}

// Whitespace tokens round-trip the linearization: it is emitted with single
// spaces between bits, so join(' ') restores the exact string.
export function tokenize(text: string): string[] {
  return text.split(/\s+/).filter((t) => t.length > 0);
}

export function detokenize(tokens: string[]): string {
  return tokens.join(' ');
}

/** Token table shared by the source and target sides. */
export class Vocab {
  readonly itos: string[];
  private readonly stoi: Map<string, number>;

  constructor(itos: string[]) {
    for (let i = 0; i < SPECIALS.length; i++) {
      if (itos[i] !== SPECIALS[i]) {
        throw new Error(`vocab slot ${i} must be ${SPECIALS[i]}`);
      }
    }
    this.itos = itos.slice();
    this.stoi = new Map(itos.map((t, i) => [t, i]));
    if (this.stoi.size !== itos.length) {
      throw new Error('vocab contains duplicate tokens');
    }
  }

  static build(sequences: Iterable<string[]>): Vocab {
    const seen = new Set<string>();
    for (const seq of sequences) {
      for (const token of seq) seen.add(token);
    }
    for (const special of SPECIALS) seen.delete(special);
    return new Vocab([...SPECIALS, ...[...seen].sort()]);
  }

  get size(): number {
    return this.itos.length;
  }

  encode(tokens: string[]): number[] {
    return tokens.map((t) => this.stoi.get(t) ?? UNK);
  }

  /** Ids back to tokens; control ids are dropped, unknowns stay visible. */
  decode(ids: number[]): string[] {
    const out: string[] = [];
    for (const id of ids) {
      if (id === PAD || id === BOS || id === EOS) continue;
      out.push(this.itos[id] ?? SPECIALS[UNK]);
    }
    return out;
  }
}
