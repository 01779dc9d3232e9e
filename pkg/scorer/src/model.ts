import * as tf from '@tensorflow/tfjs';

export interface ModelDims {
  vocabSize: number;
  embedDim: number;
  hiddenDim: number;
}

export interface SavedTensor {
  shape: number[];
  values: number[];
}

// Deterministic PRNG so two runs from the same seed build identical weights.
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function glorot(rows: number, cols: number, rand: () => number): tf.Tensor2D {
  const limit = Math.sqrt(6 / (rows + cols));
  const values = new Float32Array(rows * cols);
  for (let i = 0; i < values.length; i++) {
    values[i] = (rand() * 2 - 1) * limit;
  }
  return tf.tensor2d(values, [rows, cols]);
}

/**
 * GRU encoder-decoder over a shared vocabulary, with dot-product attention
 * from each decoder state to the encoder states. Gates are packed in
 * [update, reset, candidate] order. Written against single sequences; the
 * decoder step takes a row per live hypothesis so beams batch naturally.
 */
export class Seq2Seq {
  readonly dims: ModelDims;
  private readonly vars: Record<string, tf.Variable>;

  // tfjs registers variable names engine-wide, so each instance gets a scope
  private static instances = 0;

  private constructor(dims: ModelDims, tensors: Record<string, tf.Tensor>) {
    this.dims = dims;
    this.vars = {};
    const scope = `seq2seq${Seq2Seq.instances++}`;
    for (const [name, tensor] of Object.entries(tensors)) {
      this.vars[name] = tf.variable(tensor, true, `${scope}/${name}`);
    }
  }

  static init(dims: ModelDims, seed = 0): Seq2Seq {
    const { vocabSize: v, embedDim: e, hiddenDim: h } = dims;
    const rand = mulberry32(seed * 2654435761 + 1);
    const tensors: Record<string, tf.Tensor> = {
      embedding: glorot(v, e, rand),
      'encoder/wx': glorot(e, 3 * h, rand),
      'encoder/wh': glorot(h, 3 * h, rand),
      'encoder/b': tf.zeros([3 * h]),
      'decoder/wx': glorot(e, 3 * h, rand),
      'decoder/wh': glorot(h, 3 * h, rand),
      'decoder/b': tf.zeros([3 * h]),
      'project/w': glorot(2 * h, v, rand),
      'project/b': tf.zeros([v]),
    };
    const model = new Seq2Seq(dims, tensors);
    for (const tensor of Object.values(tensors)) tensor.dispose();
    return model;
  }

  static fromArrays(dims: ModelDims, saved: Record<string, SavedTensor>): Seq2Seq {
    const tensors: Record<string, tf.Tensor> = {};
    for (const [name, { shape, values }] of Object.entries(saved)) {
      tensors[name] = tf.tensor(values, shape, 'float32');
    }
    const model = new Seq2Seq(dims, tensors);
    for (const tensor of Object.values(tensors)) tensor.dispose();
    return model;
  }

  variables(): tf.Variable[] {
    return Object.values(this.vars);
  }

  toArrays(): Record<string, SavedTensor> {
    const out: Record<string, SavedTensor> = {};
    for (const [name, variable] of Object.entries(this.vars)) {
      out[name] = {
        shape: variable.shape.slice(),
        values: Array.from(variable.dataSync()),
      };
    }
    return out;
  }

  dispose(): void {
    for (const variable of Object.values(this.vars)) variable.dispose();
  }

  /** Embedding rows for a token id sequence, shape [len, embedDim]. */
  embed(ids: number[]): tf.Tensor2D {
    return tf.gather(this.vars['embedding'] as tf.Tensor2D, tf.tensor1d(ids, 'int32'));
  }

  // One GRU step for a batch of rows: x [b, e], h [b, hidden] -> [b, hidden].
  private gruStep(prefix: 'encoder' | 'decoder', x: tf.Tensor2D, h: tf.Tensor2D): tf.Tensor2D {
    const fromX = tf.add(tf.matMul(x, this.vars[`${prefix}/wx`] as tf.Tensor2D), this.vars[`${prefix}/b`]);
    const fromH = tf.matMul(h, this.vars[`${prefix}/wh`] as tf.Tensor2D);
    const [xz, xr, xn] = tf.split(fromX as tf.Tensor2D, 3, 1);
    const [hz, hr, hn] = tf.split(fromH, 3, 1);
    const update = tf.sigmoid(tf.add(xz, hz));
    const reset = tf.sigmoid(tf.add(xr, hr));
    const candidate = tf.tanh(tf.add(xn, tf.mul(reset, hn)));
    return tf.add(tf.mul(tf.sub(1, update), candidate), tf.mul(update, h)) as tf.Tensor2D;
  }

  /** Run the encoder; returns all states [srcLen, hidden] and the last state [1, hidden]. */
  encode(srcIds: number[]): { states: tf.Tensor2D; last: tf.Tensor2D } {
    const embedded = this.embed(srcIds);
    let h = tf.zeros([1, this.dims.hiddenDim]) as tf.Tensor2D;
    const rows: tf.Tensor2D[] = [];
    for (let t = 0; t < srcIds.length; t++) {
      const x = tf.slice(embedded, [t, 0], [1, this.dims.embedDim]) as tf.Tensor2D;
      h = this.gruStep('encoder', x, h);
      rows.push(h);
    }
    return { states: tf.concat(rows, 0) as tf.Tensor2D, last: h };
  }

  /** Advance decoder hypotheses one token: ids [b], h [b, hidden]. */
  decodeStep(ids: number[], h: tf.Tensor2D): tf.Tensor2D {
    return this.gruStep('decoder', this.embed(ids), h);
  }

  /** Attention over the encoder states, then vocabulary logits: [b, vocab]. */
  project(decStates: tf.Tensor2D, encStates: tf.Tensor2D): tf.Tensor2D {
    const scores = tf.matMul(decStates, encStates, false, true);
    const context = tf.matMul(tf.softmax(scores, -1), encStates);
    const features = tf.concat([decStates, context], 1) as tf.Tensor2D;
    return tf.add(
      tf.matMul(features, this.vars['project/w'] as tf.Tensor2D),
      this.vars['project/b'],
    ) as tf.Tensor2D;
  }

  /** Teacher-forced logits for one pair: [tgtIn.length, vocab]. */
  teacherLogits(srcIds: number[], tgtInIds: number[]): tf.Tensor2D {
    const { states, last } = this.encode(srcIds);
    let h = last;
    const rows: tf.Tensor2D[] = [];
    for (const id of tgtInIds) {
      h = this.decodeStep([id], h);
      rows.push(h);
    }
    return this.project(tf.concat(rows, 0) as tf.Tensor2D, states);
  }
}
