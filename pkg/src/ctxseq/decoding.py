"""Beam search with length normalization and repeated n-gram blocking."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import BOS, EOS, PAD, ExampleTriple
from .errors import ConfigError
from .tensor import no_grad
from .model import Memory, Seq2SeqModel, make_batch

StepFn = Callable[[list[tuple[int, ...]]], np.ndarray]


@dataclass
class DecodeConfig:
    beam_size: int = 5
    length_penalty: float = 1.5
    max_len: int = 500
    no_repeat_ngram: int = 3
    min_len: int = 0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be at least 1, got {self.beam_size}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be at least 1, got {self.max_len}")
        if self.no_repeat_ngram < 0 or self.min_len < 0:
            raise ConfigError("no_repeat_ngram and min_len must be non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def normalized_score(logprob: float, length: int, alpha: float) -> float:
    return logprob / (length ** alpha)


def blocked_tokens(tokens: Sequence[int], n: int) -> set[int]:
    """Tokens whose addition would repeat an n-gram already in ``tokens``."""
    if n <= 0 or len(tokens) < n - 1:
        return set()
    if n == 1:
        return set(tokens)
    prefix = tuple(tokens[len(tokens) - n + 1:])
    return {tokens[i + n - 1] for i in range(len(tokens) - n + 1) if tuple(tokens[i:i + n - 1]) == prefix}


def has_repeated_ngram(tokens: Sequence[int], n: int) -> bool:
    grams = [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
    return len(grams) != len(set(grams))


def _upper_bound(logprob: float, length: int, cfg: DecodeConfig) -> float:
    # log-probs only decrease as a hypothesis grows, so the best completion
    # keeps ``logprob`` and takes whichever admissible length scores highest
    if length >= cfg.max_len:
        return -np.inf
    a = cfg.length_penalty
    return max(normalized_score(logprob, length + 1, a), normalized_score(logprob, cfg.max_len, a))


def beam_search_fn(step_fn: StepFn, eos: int, cfg: DecodeConfig,
                   banned: Sequence[int] = ()) -> list[tuple[tuple[int, ...], float]]:
    """Generic beam search over a next-token log-probability function.

    ``step_fn`` receives the live prefixes (generated tokens only) and returns
    one row of log-probabilities per prefix. Finished hypotheses end with
    ``eos`` or reach ``max_len`` tokens; they are ranked by
    ``sum log p / len ** length_penalty``.
    """
    alpha = cfg.length_penalty
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[float, float, tuple[int, ...]]] = []
    banned = list(banned)
    while live:
        logp = step_fn([toks for toks, _ in live])
        cands = []
        for row, (toks, base) in zip(logp, live):
            row = np.array(row, dtype=np.float64)
            if banned:
                row[banned] = -np.inf
            if len(toks) < cfg.min_len:
                row[eos] = -np.inf
            for w in blocked_tokens(toks, cfg.no_repeat_ngram):
                row[w] = -np.inf
            for w in np.flatnonzero(np.isfinite(row)):
                cands.append((base + float(row[w]), toks + (int(w),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        nxt = []
        for rank, (lp, toks) in enumerate(cands):
            if toks[-1] == eos or len(toks) >= cfg.max_len:
                if rank < cfg.beam_size:
                    finished.append((normalized_score(lp, len(toks), alpha), lp, toks))
            elif len(nxt) < cfg.beam_size:
                nxt.append((toks, lp))
            if len(nxt) >= cfg.beam_size and rank >= cfg.beam_size - 1:
                break
        finished.sort(key=lambda f: (-f[0], f[2]))
        del finished[cfg.beam_size:]
        live = nxt
        if live and len(finished) >= cfg.beam_size:
            best = max(_upper_bound(lp, len(toks), cfg) for toks, lp in live)
            if best <= finished[-1][0]:
                break
    return [(toks, score) for score, _, toks in finished]


def _step_fn(model: Seq2SeqModel, memory: Memory) -> StepFn:
    cache: dict[int, Memory] = {}

    def step(prefixes):
        n = len(prefixes)
        if n not in cache:
            cache[n] = memory.repeat(n)
        ids = np.array([(BOS,) + p for p in prefixes], dtype=np.int64)
        return model.next_log_probs(ids, cache[n])

    return step


def beam_search(model: Seq2SeqModel, source: Sequence[int], context: Sequence[int],
                cfg: DecodeConfig) -> list[tuple[tuple[int, ...], float]]:
    """Ranked (tokens, score) hypotheses for one input; tokens include the final EOS if emitted."""
    memory = model.memory_for(ExampleTriple(tuple(source), tuple(context), ()))
    return beam_search_fn(_step_fn(model, memory), EOS, cfg, banned=(PAD, BOS))


def strip_eos(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t != EOS]


def generate(model: Seq2SeqModel, examples: Sequence[ExampleTriple], cfg: DecodeConfig,
             threads: int = 1) -> list[list[tuple[tuple[int, ...], float]]]:
    """Beam-search every example; returns the n-best list per example."""
    def one(ex):
        return beam_search(model, ex.source, ex.context, cfg)
    if threads <= 1:
        return [one(ex) for ex in examples]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(one, examples))


def greedy_decode(model: Seq2SeqModel, examples: Sequence[ExampleTriple], max_len: int = 50,
                  batch_size: int = 64) -> list[list[int]]:
    """Batched argmax decoding; returned sequences exclude EOS."""
    results: list[list[int]] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = make_batch(chunk, model.config, with_target=False)
        with no_grad():
            memory = model.encode_batch(batch)
        ids = np.full((len(chunk), 1), BOS, dtype=np.int64)
        done = np.zeros(len(chunk), dtype=bool)
        out = [[] for _ in chunk]
        for _ in range(max_len):
            lp = model.next_log_probs(ids, memory)
            lp[:, [PAD, BOS]] = -np.inf
            nxt = lp.argmax(axis=-1)
            for i, w in enumerate(nxt):
                if not done[i]:
                    if w == EOS:
                        done[i] = True
                    else:
                        out[i].append(int(w))
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
        results.extend(out)
    return results
