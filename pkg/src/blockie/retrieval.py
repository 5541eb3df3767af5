"""Few-shot example selection: TF-IDF vectors, cosine ranking, diversity picks.

The vector scheme is deterministic by construction: lowercase word unigrams
plus bigrams, raw term counts, idf = ln((1+N)/(1+df)) + 1, Euclidean norm.
Dot products sum over sorted terms so cosine is bitwise symmetric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .model import normalize_text

KIND_DOCUMENT = "document"
KIND_BLOCK = "block"


def _terms(text: str) -> list[str]:
    words = normalize_text(text).lower().split()
    bigrams = [f"{a} {b}" for a, b in zip(words, words[1:])]
    return words + bigrams


@dataclass(frozen=True)
class TextVector:
    """Sparse non-negative term-weight map with its Euclidean norm."""

    weights: dict[str, float]
    norm: float

    @classmethod
    def from_weights(cls, weights: dict[str, float]) -> "TextVector":
        norm = math.sqrt(math.fsum(w * w for _, w in sorted(weights.items())))
        return cls(dict(weights), norm)


@dataclass(frozen=True)
class Vocabulary:
    """Term document-frequencies over the corpus the index was built from."""

    doc_count: int
    df: dict[str, int]

    def idf(self, term: str) -> float:
        return math.log((1 + self.doc_count) / (1 + self.df.get(term, 0))) + 1.0

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        df: dict[str, int] = {}
        count = 0
        for text in texts:
            count += 1
            for term in set(_terms(text)):
                df[term] = df.get(term, 0) + 1
        return cls(doc_count=count, df=df)


def vectorize(text: str, vocab: Vocabulary) -> TextVector:
    """TF-IDF vector of the text; out-of-vocabulary terms are dropped."""
    counts: dict[str, int] = {}
    for term in _terms(text):
        if term in vocab.df:
            counts[term] = counts.get(term, 0) + 1
    weights = {term: tf * vocab.idf(term) for term, tf in counts.items()}
    return TextVector.from_weights(weights)


def cosine(a: TextVector, b: TextVector) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    if len(b.weights) < len(a.weights):
        a, b = b, a
    common = sorted(term for term in a.weights if term in b.weights)
    dot = math.fsum(a.weights[t] * b.weights[t] for t in common)
    return dot / (a.norm * b.norm)


@dataclass(frozen=True)
class IndexEntry:
    example_id: str
    kind: str
    text: str
    vector: TextVector
    payload_ref: str = ""


@dataclass(frozen=True)
class Neighbor:
    example_id: str
    score: float


@dataclass(frozen=True)
class ExampleIndex:
    """Immutable similarity index over labeled examples."""

    vocabulary: Vocabulary
    entries: tuple[IndexEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, example_id: str) -> IndexEntry:
        for e in self.entries:
            if e.example_id == example_id:
                return e
        raise KeyError(example_id)

    @classmethod
    def build(cls, items: Sequence[tuple[str, str, str, str]]) -> "ExampleIndex":
        """Build from (example_id, kind, text, payload_ref) tuples."""
        vocab = Vocabulary.build(text for _, _, text, _ in items)
        entries = tuple(
            IndexEntry(example_id, kind, text, vectorize(text, vocab), payload_ref)
            for example_id, kind, text, payload_ref in items
        )
        return cls(vocabulary=vocab, entries=entries)

    def to_json(self) -> dict:
        return {
            "vocabulary": {"doc_count": self.vocabulary.doc_count, "df": self.vocabulary.df},
            "entries": [
                {
                    "example_id": e.example_id,
                    "kind": e.kind,
                    "text": e.text,
                    "payload_ref": e.payload_ref,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExampleIndex":
        vocab = Vocabulary(
            doc_count=data["vocabulary"]["doc_count"], df=dict(data["vocabulary"]["df"])
        )
        entries = tuple(
            IndexEntry(
                example_id=e["example_id"],
                kind=e["kind"],
                text=e["text"],
                vector=vectorize(e["text"], vocab),
                payload_ref=e.get("payload_ref", ""),
            )
            for e in data.get("entries", ())
        )
        return cls(vocabulary=vocab, entries=entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, ensure_ascii=False, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExampleIndex":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def top_k(
    index: ExampleIndex, query_text: str, k: int = 5, kind: str | None = None
) -> list[Neighbor]:
    """The k most cosine-similar entries, ties broken by ascending example id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = vectorize(query_text, index.vocabulary)
    scored = [
        Neighbor(e.example_id, cosine(query, e.vector))
        for e in index.entries
        if kind is None or e.kind == kind
    ]
    scored.sort(key=lambda n: (-n.score, n.example_id))
    return scored[:k]


def select_diverse(
    index: ExampleIndex,
    reference_texts: Sequence[str],
    k: int,
    kind: str | None = None,
) -> list[str]:
    """Greedy farthest-first selection of k entries.

    Each step picks the entry whose minimum distance (1 - cosine) to all
    reference texts and already selected entries is largest; ties break by
    ascending example id. With no references, the first pick is the lowest
    example id and the rest are farthest-first from the selection.
    """
    candidates = [e for e in index.entries if kind is None or e.kind == kind]
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds index size {len(candidates)}")
    reference_vectors = [vectorize(t, index.vocabulary) for t in reference_texts]

    min_dist = {}
    for e in candidates:
        dists = [1.0 - cosine(e.vector, rv) for rv in reference_vectors]
        min_dist[e.example_id] = min(dists) if dists else math.inf

    selected: list[str] = []
    remaining = {e.example_id: e for e in candidates}
    for _ in range(k):
        best_id = None
        best = -math.inf
        for example_id in sorted(remaining):
            d = min_dist[example_id]
            if d > best:
                best, best_id = d, example_id
        selected.append(best_id)
        chosen = remaining.pop(best_id)
        for example_id, e in remaining.items():
            d = 1.0 - cosine(e.vector, chosen.vector)
            if d < min_dist[example_id]:
                min_dist[example_id] = d
    return selected
