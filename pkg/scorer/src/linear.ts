// Reader for the bracketed event linearization the model is trained to emit:
// [ <label> <text> <child>* ] with [, ], and \ escaped by a backslash.
// Decoding model output calls for tolerance, so structural problems are
// downgraded to warnings and salvageable substructure is kept.

export const EVENT_LABELS = ['adverse event', 'potential therapeutic event'];

export const MAIN_KINDS = ['subject', 'treatment', 'effect'];

export const SUB_PARENT: Record<string, string> = {
  age: 'subject',
  gender: 'subject',
  race: 'subject',
  population: 'subject',
  'subject.disorder': 'subject',
  drug: 'treatment',
  dosage: 'treatment',
  route: 'treatment',
  duration: 'treatment',
  frequency: 'treatment',
  time_elapsed: 'treatment',
  'treatment.disorder': 'treatment',
  'combination.drug': 'treatment',
};

export interface LooseSpan {
  text: string;
}

export interface LooseArgument {
  type: string;
  text: string;
  sub_arguments: Array<{ type: string; text: string }>;
}

export interface LooseEvent {
  event_type: string;
  trigger: LooseSpan | null;
  arguments: LooseArgument[];
}

interface Node {
  head: string[]; // words before the first child; label plus span text
  children: Node[];
}

type Token = { kind: 'open' } | { kind: 'close' } | { kind: 'word'; text: string };

function lex(text: string, warnings: string[]): Token[] {
  const tokens: Token[] = [];
  let word = '';
  const flush = () => {
    if (word) tokens.push({ kind: 'word', text: word });
    word = '';
  };
  for (let i = 0; i < text.length; i++) {
    const c = text[i];
    if (c === '\\') {
      const next = text[i + 1];
      if (next === '[' || next === ']' || next === '\\') {
        word += next;
        i += 1;
      } else {
        warnings.push(`kept bad escape at position ${i}`);
        word += c;
      }
    } else if (c === '[') {
      flush();
      tokens.push({ kind: 'open' });
    } else if (c === ']') {
      flush();
      tokens.push({ kind: 'close' });
    } else if (/\s/.test(c)) {
      flush();
    } else {
      word += c;
    }
  }
  flush();
  return tokens;
}

function parseForest(tokens: Token[], warnings: string[]): Node[] {
  const roots: Node[] = [];
  const stack: Node[] = [];
  for (const token of tokens) {
    const top = stack[stack.length - 1];
    if (token.kind === 'open') {
      const node: Node = { head: [], children: [] };
      if (top !== undefined) top.children.push(node);
      else roots.push(node);
      stack.push(node);
    } else if (token.kind === 'close') {
      if (top === undefined) warnings.push('ignored stray ]');
      else stack.pop();
    } else if (top === undefined) {
      warnings.push(`ignored text outside brackets: ${token.text}`);
    } else if (top.children.length > 0) {
      // canonical form puts all text before the children
      warnings.push(`dropped text after children: ${token.text}`);
    } else {
      top.head.push(token.text);
    }
  }
  if (stack.length > 0) warnings.push(`closed ${stack.length} unbalanced bracket(s) at end`);
  return roots;
}

// The longest label match wins; event type labels span several words.
function splitLabel(node: Node): { label: string; text: string } {
  for (let take = Math.min(3, node.head.length); take >= 1; take--) {
    const candidate = node.head.slice(0, take).join(' ');
    const known =
      EVENT_LABELS.includes(candidate) ||
      candidate === 'trigger' ||
      MAIN_KINDS.includes(candidate) ||
      candidate in SUB_PARENT;
    if (known) {
      return { label: candidate, text: node.head.slice(take).join(' ') };
    }
  }
  return { label: node.head[0] ?? '', text: node.head.slice(1).join(' ') };
}

function toArgument(node: Node, kind: string, text: string, warnings: string[]): LooseArgument {
  const subs: Array<{ type: string; text: string }> = [];
  for (const child of node.children) {
    const sub = splitLabel(child);
    if (SUB_PARENT[sub.label] === kind) {
      if (child.children.length > 0) warnings.push(`dropped nesting under [ ${sub.label} ]`);
      subs.push({ type: sub.label, text: sub.text });
    } else {
      warnings.push(`skipped [ ${sub.label || '?'} ] under [ ${kind} ]`);
    }
  }
  return { type: kind, text, sub_arguments: subs };
}

/** Decode bracketed text to prediction-file events, collecting warnings. */
export function eventsFromLinear(text: string): { events: LooseEvent[]; warnings: string[] } {
  const warnings: string[] = [];
  const events: LooseEvent[] = [];
  for (const root of parseForest(lex(text, warnings), warnings)) {
    const { label, text: extra } = splitLabel(root);
    if (!EVENT_LABELS.includes(label)) {
      warnings.push(`skipped non-event node [ ${label || '?'} ]`);
      continue;
    }
    if (extra) warnings.push(`dropped text on event node: ${extra}`);
    let trigger: LooseSpan | null = null;
    const args: LooseArgument[] = [];
    for (const child of root.children) {
      const part = splitLabel(child);
      if (part.label === 'trigger') {
        if (trigger === null) trigger = { text: part.text };
        else warnings.push('kept only the first trigger');
      } else if (MAIN_KINDS.includes(part.label)) {
        args.push(toArgument(child, part.label, part.text, warnings));
      } else {
        warnings.push(`skipped [ ${part.label || '?'} ] under [ ${label} ]`);
      }
    }
    events.push({ event_type: label, trigger, arguments: args });
  }
  return { events, warnings };
}
