"""Okapi BM25 over rendered pool candidates.

Documents are the rendered (input, output) pairs. Zero-overlap documents
keep score 0.0 and are still eligible, so retrieval depth is always
min(n, pool size minus exclusions).
"""

import math
from collections import Counter, defaultdict
from dataclasses import dataclass

from .corpus import Example, ExamplePool, render_candidate, tokenize

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    avg_doc_length: float
    doc_count: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))


def build_bm25_index(pool: ExamplePool, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> InvertedIndex:
    if len(pool) == 0:
        raise ValueError("cannot index an empty pool")
    postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
    doc_lengths: dict[str, int] = {}
    for ex in pool.examples:
        tokens = tokenize(render_candidate(ex))
        doc_lengths[ex.example_id] = len(tokens)
        for term, tf in sorted(Counter(tokens).items()):
            postings[term].append((ex.example_id, tf))
    avg = sum(doc_lengths.values()) / len(doc_lengths)
    return InvertedIndex(
        postings=dict(postings),
        doc_lengths=doc_lengths,
        avg_doc_length=avg,
        doc_count=len(doc_lengths),
        k1=k1,
        b=b,
    )


def score_document(index: InvertedIndex, query_terms, doc_tf: Counter, doc_len: int) -> float:
    """Okapi score of one document given its term frequencies.

    Used by the exhaustive-scan oracle; the indexed path must agree with it
    to 1e-9.
    """
    score = 0.0
    for term in sorted(set(query_terms)):
        tf = doc_tf.get(term, 0)
        if tf == 0:
            continue
        norm = tf + index.k1 * (1.0 - index.b + index.b * doc_len / index.avg_doc_length)
        score += index.idf(term) * tf * (index.k1 + 1.0) / norm
    return score


def bm25_retrieve(
    index: InvertedIndex,
    query: str,
    n: int,
    exclude_id: str | None = None,
) -> list[tuple[str, float]]:
    """Top-n (example_id, score), score descending, ties by ascending id."""
    if n <= 0:
        raise ValueError("n must be >= 1")
    scores: dict[str, float] = {}
    for term in sorted(set(tokenize(query))):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            norm = tf + index.k1 * (
                1.0 - index.b + index.b * index.doc_lengths[doc_id] / index.avg_doc_length
            )
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (index.k1 + 1.0) / norm
    ranked = [
        (doc_id, scores.get(doc_id, 0.0))
        for doc_id in index.doc_lengths
        if doc_id != exclude_id
    ]
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked[:n]


def brute_force_bm25(
    index: InvertedIndex,
    pool: ExamplePool,
    query: str,
    n: int,
    exclude_id: str | None = None,
) -> list[tuple[str, float]]:
    """Independent oracle: score every document directly from its text."""
    if n <= 0:
        raise ValueError("n must be >= 1")
    terms = tokenize(query)
    ranked = []
    for ex in pool.examples:
        if ex.example_id == exclude_id:
            continue
        doc_tokens = tokenize(render_candidate(ex))
        score = score_document(index, terms, Counter(doc_tokens), len(doc_tokens))
        ranked.append((ex.example_id, score))
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked[:n]
