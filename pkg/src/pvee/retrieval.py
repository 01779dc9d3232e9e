"""Demonstration retrieval: BM25, dependency subpath kernel, dense cosine.

The tokenizer here is the shared one: token-level scoring in the metrics
module uses it too. Dependency trees come from CoNLL-U files (parsed
elsewhere); sentence embeddings come from JSONL files or a caller-provided
lookup. No parser or embedding model ships with the package.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import Instance
from .schema import EventType

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation, keeping alnum runs."""
    return _TOKEN_RE.findall(text.lower())


class UnknownDocument(Exception):
    pass


class DimensionMismatch(Exception):
    pass


class PoolTooSmall(Exception):
    pass


# ---------------------------------------------------------------------------
# BM25


@dataclass
class Bm25Index:
    doc_ids: list[str]
    term_freqs: dict[str, Counter]
    doc_lens: dict[str, int]
    doc_freq: Counter
    avg_len: float
    k1: float = 1.2
    b: float = 0.75

    @classmethod
    def build(cls, documents: dict[str, str], k1: float = 1.2,
              b: float = 0.75) -> "Bm25Index":
        term_freqs = {}
        doc_lens = {}
        doc_freq: Counter = Counter()
        for doc_id, text in documents.items():
            terms = tokenize(text)
            term_freqs[doc_id] = Counter(terms)
            doc_lens[doc_id] = len(terms)
            doc_freq.update(set(terms))
        n = len(documents)
        avg_len = (sum(doc_lens.values()) / n) if n else 0.0
        return cls(doc_ids=sorted(documents), term_freqs=term_freqs,
                   doc_lens=doc_lens, doc_freq=doc_freq, avg_len=avg_len,
                   k1=k1, b=b)

    def idf(self, term: str) -> float:
        n = len(self.doc_ids)
        df = self.doc_freq.get(term, 0)
        # Non-negative variant: ln((N - df + 0.5) / (df + 0.5) + 1).
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def score(self, query_terms, doc_id: str) -> float:
        if doc_id not in self.term_freqs:
            raise UnknownDocument(doc_id)
        tf = self.term_freqs[doc_id]
        length = self.doc_lens[doc_id]
        norm = self.k1 * (1.0 - self.b + self.b * (length / self.avg_len
                                                   if self.avg_len else 0.0))
        total = 0.0
        for term in query_terms:
            f = tf.get(term, 0)
            if f == 0:
                continue
            total += self.idf(term) * f * (self.k1 + 1.0) / (f + norm)
        return total

    def rank(self, query_terms) -> list[tuple[str, float]]:
        scored = [(doc_id, self.score(query_terms, doc_id))
                  for doc_id in self.doc_ids]
        scored.sort(key=lambda item: (-item[1], item[0]))
        return scored


# ---------------------------------------------------------------------------
# Dependency subpath kernel


@dataclass(frozen=True)
class TreeToken:
    form: str
    lower: str
    deprel: str
    head: int  # 1-based position of the head token; 0 means root


@dataclass(frozen=True)
class DependencyTree:
    sent_id: str
    tokens: tuple[TreeToken, ...]


@dataclass(frozen=True)
class SubpathSet:
    signatures: frozenset
    max_length: int


def _validate_tree(sent_id: str, tokens: list[TreeToken]) -> None:
    n = len(tokens)
    roots = [t for t in tokens if t.head == 0]
    if len(roots) != 1:
        raise ValueError(f"tree {sent_id!r} must have exactly one root, "
                         f"found {len(roots)}")
    for i, tok in enumerate(tokens, start=1):
        if not 0 <= tok.head <= n:
            raise ValueError(f"tree {sent_id!r}: head of token {i} out of range")
        seen = set()
        cur = i
        while cur != 0:
            if cur in seen:
                raise ValueError(f"tree {sent_id!r} contains a head cycle")
            seen.add(cur)
            cur = tokens[cur - 1].head


def parse_conllu(text: str) -> list[DependencyTree]:
    """Parse CoNLL-U content; multiword ranges and empty nodes are skipped."""
    trees = []
    block: list[str] = []
    sent_id: str | None = None
    index = 0

    def flush():
        nonlocal block, sent_id, index
        if block:
            tokens = []
            for line in block:
                cols = line.split("\t")
                if len(cols) != 10:
                    raise ValueError(f"expected 10 columns, got {len(cols)}: "
                                     f"{line!r}")
                if "-" in cols[0] or "." in cols[0]:
                    continue
                tokens.append(TreeToken(form=cols[1], lower=cols[1].lower(),
                                        deprel=cols[7], head=int(cols[6])))
            sid = sent_id if sent_id is not None else str(index)
            _validate_tree(sid, tokens)
            trees.append(DependencyTree(sent_id=sid, tokens=tuple(tokens)))
            index += 1
        block = []
        sent_id = None

    for raw in text.splitlines():
        line = raw.rstrip("\n")
        if not line.strip():
            flush()
        elif line.startswith("#"):
            m = re.match(r"#\s*sent_id\s*=\s*(\S+)", line)
            if m:
                sent_id = m.group(1)
        else:
            block.append(line)
    flush()
    return trees


def load_trees(conllu_path, manifest_path=None) -> dict[str, DependencyTree]:
    """Load trees keyed by instance id.

    The sidecar manifest maps instance id -> sent_id; without one, the
    sent_id itself is taken as the instance id.
    """
    trees = {t.sent_id: t for t in parse_conllu(
        Path(conllu_path).read_text(encoding="utf-8"))}
    if manifest_path is None:
        return trees
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    out = {}
    for instance_id, sent_id in manifest.items():
        if sent_id not in trees:
            raise KeyError(f"manifest maps {instance_id!r} to missing "
                           f"sentence {sent_id!r}")
        out[instance_id] = trees[sent_id]
    return out


def subpath_set(tree: DependencyTree, max_length: int = 3) -> SubpathSet:
    """Descending chains of 1..max_length edges.

    A signature alternates lowercased token and relation label along the
    chain: (token, deprel, token, deprel, token, ...). Single nodes are not
    subpaths, so a one-token tree yields an empty set.
    """
    children: dict[int, list[int]] = {}
    for pos, tok in enumerate(tree.tokens, start=1):
        children.setdefault(tok.head, []).append(pos)
    signatures = set()

    def walk(pos: int, signature: tuple, depth: int):
        for child in children.get(pos, ()):
            tok = tree.tokens[child - 1]
            extended = signature + (tok.deprel, tok.lower)
            signatures.add(extended)
            if depth + 1 < max_length:
                walk(child, extended, depth + 1)

    for pos, tok in enumerate(tree.tokens, start=1):
        walk(pos, (tok.lower,), 0)
    return SubpathSet(signatures=frozenset(signatures), max_length=max_length)


def jaccard(a, b) -> float:
    """Jaccard over signature sets; SubpathSet arguments are unwrapped."""
    if isinstance(a, SubpathSet):
        a = a.signatures
    if isinstance(b, SubpathSet):
        b = b.signatures
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def tree_kernel_similarity(a: DependencyTree, b: DependencyTree,
                           max_length: int = 3) -> float:
    return jaccard(subpath_set(a, max_length).signatures,
                   subpath_set(b, max_length).signatures)


# ---------------------------------------------------------------------------
# Dense similarity


def dense_similarity(u, v) -> float:
    """Cosine similarity; zero vectors score 0 by convention."""
    if len(u) != len(v):
        raise DimensionMismatch(f"{len(u)} vs {len(v)}")
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return sum(x * y for x, y in zip(u, v)) / (nu * nv)


@dataclass
class EmbeddingStore:
    vectors: dict[str, tuple[float, ...]]
    dim: int
    normalized: bool = False

    def get(self, instance_id: str) -> tuple[float, ...]:
        if instance_id not in self.vectors:
            raise KeyError(f"no embedding for instance {instance_id!r}")
        return self.vectors[instance_id]


def load_embeddings(path, normalize: bool = False) -> EmbeddingStore:
    vectors: dict[str, tuple[float, ...]] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            vec = tuple(float(x) for x in obj["vector"])
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DimensionMismatch(
                    f"embedding for {obj['id']!r} has dim {len(vec)}, "
                    f"expected {dim}"
                )
            if normalize:
                norm = math.sqrt(sum(x * x for x in vec))
                if norm > 0:
                    vec = tuple(x / norm for x in vec)
            vectors[obj["id"]] = vec
    return EmbeddingStore(vectors=vectors, dim=dim or 0, normalized=normalize)


# ---------------------------------------------------------------------------
# Demonstration selection

SELECTION_STRATEGIES = ("random", "bm25", "treekernel", "dense")


def _derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def select_demonstrations(
    strategy: str,
    query: Instance,
    pool,
    k: int,
    seed: int = 0,
    *,
    embeddings: EmbeddingStore | None = None,
    trees: dict[str, DependencyTree] | None = None,
    subpath_len: int = 3,
) -> dict[EventType, list[Instance]]:
    """Pick k demonstrations per event type, most similar first.

    The pool is partitioned by event-type presence (an instance with both
    types is a candidate for both). The query's own id is never selected.
    Ties break on ascending instance id, so rankings are total orders.
    """
    if strategy not in SELECTION_STRATEGIES:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    if k < 0:
        raise ValueError("k must be non-negative")
    out: dict[EventType, list[Instance]] = {}
    for et in EventType:
        candidates = sorted(
            (inst for inst in pool
             if inst.id != query.id
             and any(ev.event_type is et for ev in inst.events)),
            key=lambda inst: inst.id,
        )
        if k == 0:
            out[et] = []
            continue
        if k > len(candidates):
            raise PoolTooSmall(
                f"need {k} demonstrations for {et.value}, pool has "
                f"{len(candidates)}"
            )
        if strategy == "random":
            order = candidates[:]
            rng = random.Random(_derive_seed(seed, f"demo:{et.value}"))
            rng.shuffle(order)
            out[et] = order[:k]
            continue
        if strategy == "bm25":
            index = Bm25Index.build({c.id: c.text for c in candidates})
            query_terms = tokenize(query.text)
            scores = {c.id: index.score(query_terms, c.id) for c in candidates}
        elif strategy == "treekernel":
            if trees is None:
                raise ValueError("treekernel selection needs dependency trees")
            try:
                query_set = subpath_set(trees[query.id], subpath_len).signatures
            except KeyError:
                raise ValueError(f"no dependency tree for instance {query.id!r}")
            scores = {}
            for c in candidates:
                if c.id not in trees:
                    raise ValueError(f"no dependency tree for instance {c.id!r}")
                scores[c.id] = jaccard(
                    query_set, subpath_set(trees[c.id], subpath_len).signatures)
        else:  # dense
            if embeddings is None:
                raise ValueError("dense selection needs an embedding store")
            query_vec = embeddings.get(query.id)
            scores = {c.id: dense_similarity(query_vec, embeddings.get(c.id))
                      for c in candidates}
        ranked = sorted(candidates, key=lambda c: (-scores[c.id], c.id))
        out[et] = ranked[:k]
    return out
