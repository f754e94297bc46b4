"""Frozen language model scoring for candidate ranking and prediction.

The built-in model is a cache-interpolated bigram LM: a cache bigram
distribution over the prompt so far, a global bigram model estimated over
the pool, and a uniform floor, mixed at fixed weights. It is deterministic
and is never updated by any training stage.

Blank lines (the shot separator) map to a reserved boundary token in the
model's token stream; greedy decoding stops when that token is emitted.
"""

import json
import math
import queue
import re
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np

from .corpus import Example, render_prompt

BOUNDARY_TOKEN = "\x1e"
UNK_TOKEN = "\x1f"
SENTINEL_SCORE = -1.0e9

LAMBDA_CACHE = 0.5
LAMBDA_GLOBAL = 0.4
LAMBDA_UNIFORM = 0.1

_BLANK_LINE_RE = re.compile(r"\n[ \t]*\n")
# str.split() treats \x1e and \x1f as whitespace, which would swallow the
# reserved tokens; split on an explicit class instead.
_WHITESPACE_RE = re.compile(r"[ \t\r\n\f\v]+")


class ScorerProtocolError(RuntimeError):
    """The external scorer process violated the line protocol."""


def lm_tokenize(text: str) -> list[str]:
    """Scorer-side tokens: blank lines become the boundary token."""
    marked = _BLANK_LINE_RE.sub(f" {BOUNDARY_TOKEN} ", text)
    return [
        t if t in (BOUNDARY_TOKEN, UNK_TOKEN) else t.lower()
        for t in _WHITESPACE_RE.split(marked)
        if t
    ]


@dataclass
class CacheBigramLM:
    """Deterministic scorer with a prompt cache and a smoothed global bigram."""

    vocab: tuple[str, ...]
    token_ids: dict[str, int] = field(init=False, repr=False)
    bigram: dict[int, dict[int, int]] = field(default_factory=dict, repr=False)
    context_totals: dict[int, int] = field(default_factory=dict, repr=False)
    lambda_cache: float = LAMBDA_CACHE
    lambda_global: float = LAMBDA_GLOBAL
    lambda_uniform: float = LAMBDA_UNIFORM
    smoothing: float = 0.1

    def __post_init__(self):
        if abs(self.lambda_cache + self.lambda_global + self.lambda_uniform - 1.0) > 1e-12:
            raise ValueError("interpolation weights must sum to 1")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.token_ids = {t: i for i, t in enumerate(self.vocab)}

    @classmethod
    def from_pool(
        cls,
        pool,
        lambda_cache: float = LAMBDA_CACHE,
        lambda_global: float = LAMBDA_GLOBAL,
        lambda_uniform: float = LAMBDA_UNIFORM,
        smoothing: float = 0.1,
    ) -> "CacheBigramLM":
        """Estimate the global bigram over pool examples.

        Each example contributes the stream <bnd> input output <bnd>, so the
        model sees output-after-input transitions and example boundaries.
        """
        vocab_set = {BOUNDARY_TOKEN, UNK_TOKEN}
        streams = []
        for ex in pool.examples:
            toks = lm_tokenize(ex.input_text) + lm_tokenize(ex.output_text)
            vocab_set.update(toks)
            streams.append(toks)
        vocab = tuple(sorted(vocab_set))
        lm = cls(
            vocab=vocab,
            lambda_cache=lambda_cache,
            lambda_global=lambda_global,
            lambda_uniform=lambda_uniform,
            smoothing=smoothing,
        )
        bid = lm.token_ids[BOUNDARY_TOKEN]
        for toks in streams:
            ids = [bid] + [lm.token_ids[t] for t in toks] + [bid]
            for prev, cur in zip(ids, ids[1:]):
                row = lm.bigram.setdefault(prev, {})
                row[cur] = row.get(cur, 0) + 1
                lm.context_totals[prev] = lm.context_totals.get(prev, 0) + 1
        return lm

    # -- token plumbing -------------------------------------------------

    def _ids(self, tokens: list[str]) -> list[int]:
        unk = self.token_ids[UNK_TOKEN]
        return [self.token_ids.get(t, unk) for t in tokens]

    def _global_prob(self, prev: int, cur: int) -> float:
        row = self.bigram.get(prev)
        count = row.get(cur, 0) if row else 0
        total = self.context_totals.get(prev, 0)
        v = len(self.vocab)
        return (count + self.smoothing) / (total + self.smoothing * v)

    def _token_prob(self, prev: int, cur: int, cache_bi, cache_tot) -> float:
        v = len(self.vocab)
        tot = cache_tot.get(prev, 0)
        if tot:
            p_cache = cache_bi.get(prev, {}).get(cur, 0) / tot
        else:
            p_cache = 1.0 / v
        return (
            self.lambda_cache * p_cache
            + self.lambda_global * self._global_prob(prev, cur)
            + self.lambda_uniform / v
        )

    @staticmethod
    def _cache_from(ids: list[int]):
        cache_bi: dict[int, dict[int, int]] = {}
        cache_tot: dict[int, int] = {}
        for prev, cur in zip(ids, ids[1:]):
            row = cache_bi.setdefault(prev, {})
            row[cur] = row.get(cur, 0) + 1
            cache_tot[prev] = cache_tot.get(prev, 0) + 1
        return cache_bi, cache_tot

    # -- public scoring -------------------------------------------------

    def cond_log_prob(self, prompt: str, target: str) -> float:
        """Sum of log p(token | prompt and target so far); empty target is 0."""
        target_ids = self._ids(lm_tokenize(target))
        if not target_ids:
            return 0.0
        bid = self.token_ids[BOUNDARY_TOKEN]
        prompt_ids = self._ids(lm_tokenize(prompt))
        cache_bi, cache_tot = self._cache_from(prompt_ids)
        prev = prompt_ids[-1] if prompt_ids else bid
        total = 0.0
        for cur in target_ids:
            total += math.log(self._token_prob(prev, cur, cache_bi, cache_tot))
            row = cache_bi.setdefault(prev, {})
            row[cur] = row.get(cur, 0) + 1
            cache_tot[prev] = cache_tot.get(prev, 0) + 1
            prev = cur
        return total

    def next_token_dist(self, prompt: str) -> np.ndarray:
        """Full next-token distribution after the prompt; sums to 1."""
        ids = self._ids(lm_tokenize(prompt))
        cache_bi, cache_tot = self._cache_from(ids)
        prev = ids[-1] if ids else self.token_ids[BOUNDARY_TOKEN]
        return self._dist(prev, cache_bi, cache_tot)

    def _dist(self, prev: int, cache_bi, cache_tot) -> np.ndarray:
        v = len(self.vocab)
        probs = np.full(v, self.lambda_uniform / v)
        tot = cache_tot.get(prev, 0)
        if tot:
            for cur, count in cache_bi.get(prev, {}).items():
                probs[cur] += self.lambda_cache * count / tot
        else:
            probs += self.lambda_cache / v
        g_tot = self.context_totals.get(prev, 0)
        denom = g_tot + self.smoothing * v
        probs += self.lambda_global * self.smoothing / denom
        row = self.bigram.get(prev)
        if row:
            for cur, count in row.items():
                probs[cur] += self.lambda_global * count / denom
        return probs

    def greedy_decode(self, prompt: str, max_tokens: int = 64) -> str:
        """Argmax decoding until the boundary token or the budget runs out."""
        ids = self._ids(lm_tokenize(prompt))
        cache_bi, cache_tot = self._cache_from(ids)
        bid = self.token_ids[BOUNDARY_TOKEN]
        prev = ids[-1] if ids else bid
        out: list[str] = []
        for _ in range(max_tokens):
            cur = int(np.argmax(self._dist(prev, cache_bi, cache_tot)))
            if cur == bid:
                break
            out.append(self.vocab[cur])
            row = cache_bi.setdefault(prev, {})
            row[cur] = row.get(cur, 0) + 1
            cache_tot[prev] = cache_tot.get(prev, 0) + 1
            prev = cur
        return " ".join(out)


@dataclass(frozen=True, slots=True)
class RankedCandidates:
    query_id: str
    entries: tuple[tuple[str, float], ...]
    ranking_depth: int

    def candidate_ids(self) -> list[str]:
        return [cid for cid, _ in self.entries]


def rank_candidates(
    lm,
    query: Example,
    candidates: list[Example],
    depth: int = 100,
    max_prompt_tokens: int = 256,
) -> RankedCandidates:
    """Score candidates as one-shot prompts for the query, best first.

    Cross-task candidates get the sentinel score and therefore sort last.
    Ties break by ascending candidate id. The scorer is frozen, so scoring
    order does not matter.
    """
    scored = []
    for cand in candidates[:depth]:
        if cand.task_id != query.task_id:
            score = SENTINEL_SCORE
        else:
            prompt = render_prompt([cand], query.input_text, max_prompt_tokens)
            score = lm.cond_log_prob(prompt, query.output_text)
        scored.append((cand.example_id, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RankedCandidates(
        query_id=query.example_id,
        entries=tuple(scored),
        ranking_depth=depth,
    )


class ExternalProcessScorer:
    """Scorer backed by a child process speaking line-delimited JSON.

    Request: {"prompt": ..., "target": ...}; response: {"log_prob": number}.
    Timeouts and malformed responses raise ScorerProtocolError.
    """

    def __init__(self, command: list[str], timeout: float = 10.0):
        self.timeout = timeout
        self._proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._drain, daemon=True)
        self._reader.start()

    def _drain(self):
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def cond_log_prob(self, prompt: str, target: str) -> float:
        if self._proc.poll() is not None:
            raise ScorerProtocolError("scorer process has exited")
        request = json.dumps({"prompt": prompt, "target": target})
        try:
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise ScorerProtocolError("scorer process pipe closed") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise ScorerProtocolError(f"no response within {self.timeout}s")
        if line is None:
            raise ScorerProtocolError("scorer process closed its output")
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScorerProtocolError(f"invalid response line: {line!r}") from exc
        value = payload.get("log_prob") if isinstance(payload, dict) else None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScorerProtocolError(f"non-numeric log_prob in {payload!r}")
        return float(value)

    def close(self):
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
