"""Generation metrics and the analysis measures used to study context use.

ROUGE scores are F1 based, without stemming or stopword removal. Corpus BLEU
uses add-one smoothing on the 2- to 4-gram precisions so that tiny corpora
give deterministic, finite scores.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionRecord
from .data import EOS, ExampleTriple, Vocabulary
from .decoding import DecodeConfig, generate, strip_eos
from .errors import ConfigError, InputError
from .model import Seq2SeqModel
from .training import evaluate_ppl


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: float, n_gen: int, n_ref: int) -> float:
    if overlap == 0 or n_gen == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_gen, overlap / n_ref
    return 100.0 * 2 * p * r / (p + r)


def rouge_n(gen: Sequence, ref: Sequence, n: int) -> float:
    """Clipped n-gram overlap F1, as a percentage."""
    if n < 1:
        raise ConfigError(f"n-gram order must be at least 1, got {n}")
    if not ref:
        warnings.warn("empty reference; ROUGE defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if len(ref) < n:
        # no n-grams to match; only an exact copy counts
        return 100.0 if list(gen) == list(ref) else 0.0
    g, r = _ngrams(gen, n), _ngrams(ref, n)
    overlap = sum((g & r).values())
    return _f1(overlap, sum(g.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(gen: Sequence, ref: Sequence) -> float:
    """Longest-common-subsequence F1, as a percentage."""
    if not ref:
        warnings.warn("empty reference; ROUGE-L defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return _f1(lcs_length(gen, ref), len(gen), len(ref))


def unigram_f1(gen: Sequence, ref: Sequence) -> float:
    return rouge_n(gen, ref, 1)


def corpus_bleu(gens: Sequence[Sequence], refs: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU-4 (single reference) with brevity penalty, scaled to 0-100."""
    if len(gens) != len(refs):
        raise InputError(f"{len(gens)} generations but {len(refs)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    gen_len = ref_len = 0
    for g, r in zip(gens, refs):
        gen_len += len(g)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            gc, rc = _ngrams(g, n), _ngrams(r, n)
            matches[n - 1] += sum((gc & rc).values())
            totals[n - 1] += sum(gc.values())
    if gen_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if gen_len > ref_len else math.exp(1.0 - ref_len / gen_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def perplexity(total_nll: float, n_tokens: int) -> float:
    return math.exp(total_nll / n_tokens)


# ---------------------------------------------------------------------------
# context use
# ---------------------------------------------------------------------------

def context_use_pct(ctx: Iterable[int], gold: Iterable[int], gen: Iterable[int], vocab: Vocabulary) -> float | None:
    """Share of content tokens found in both context and gold that the generation reuses.

    Returns None (the example is skipped) when context and gold share no content token.
    """
    useful = vocab.content_set(ctx) & vocab.content_set(gold)
    if not useful:
        return None
    return 100.0 * len(useful & vocab.content_set(gen)) / len(useful)


def corpus_context_use(examples: Sequence[ExampleTriple], gens: Sequence[Sequence[int]],
                       vocab: Vocabulary) -> tuple[float | None, int]:
    """Mean context use over scored examples, and the number skipped."""
    scores = [context_use_pct(ex.context, ex.target, g, vocab) for ex, g in zip(examples, gens)]
    kept = [s for s in scores if s is not None]
    return (float(np.mean(kept)) if kept else None), len(scores) - len(kept)


# ---------------------------------------------------------------------------
# backward perplexity
# ---------------------------------------------------------------------------

def backward_ppl(forward: Seq2SeqModel | None, reverse: Seq2SeqModel, examples: Sequence[ExampleTriple],
                 decode_cfg: DecodeConfig | None = None, hypotheses: Sequence[Sequence[int]] | None = None,
                 use_gold: bool = False, threads: int = 1) -> float:
    """Perplexity of each source under the reverse (target -> source) model fed the generations.

    Generations come from ``hypotheses`` if given, else from beam search with
    ``forward``; ``use_gold`` substitutes the gold targets (the sanity floor).
    An empty generation is fed to the reverse model as a lone EOS.
    """
    if forward is not None and forward.config.vocab_size != reverse.config.vocab_size:
        raise ConfigError("forward and reverse models use different vocabularies")
    if use_gold:
        hyps = [ex.target for ex in examples]
    elif hypotheses is not None:
        hyps = hypotheses
    else:
        if forward is None:
            raise ConfigError("need a forward model or precomputed hypotheses")
        nbest = generate(forward, examples, decode_cfg or DecodeConfig(), threads)
        hyps = [strip_eos(n[0][0]) if n else [] for n in nbest]
    pairs = [ExampleTriple(tuple(h) if len(h) else (EOS,), (), ex.source) for h, ex in zip(hyps, examples)]
    return evaluate_ppl(reverse, pairs)


# ---------------------------------------------------------------------------
# encoder attention statistics
# ---------------------------------------------------------------------------

@dataclass
class AttnStats:
    s_attn_c: float
    c_attn_s: float
    win_attn: float
    window_radius: int
    source_rows: int = 0
    context_rows: int = 0
    rows: int = 0


def _square_alphas(records: Sequence) -> list[np.ndarray]:
    out = []
    for rec in records:
        alpha = np.asarray(rec.alpha if isinstance(rec, AttentionRecord) else rec, dtype=np.float64)
        mats = alpha if alpha.ndim == 3 else alpha[None]
        for a in mats:
            if a.shape[0] != a.shape[1]:
                raise InputError(f"attention statistics need self-attention, got shape {a.shape}")
            out.append(a)
    return out


def attention_stats(records: Sequence, segments: Sequence[str], window_radius: int = 40) -> AttnStats:
    """Mass that source rows spend on context keys, and vice versa, plus local-window mass.

    ``segments`` labels each position ``"S"`` or ``"C"`` and applies to every record.
    """
    labels = list(segments)
    if any(s not in ("S", "C") for s in labels):
        raise InputError("segment labels must be 'S' or 'C'")
    is_c = np.array([s == "C" for s in labels])
    s_sum = c_sum = w_sum = 0.0
    s_rows = c_rows = rows = 0
    for a in _square_alphas(records):
        n = a.shape[0]
        if n != len(labels):
            raise InputError(f"segment map has {len(labels)} labels for a {n}x{n} attention matrix")
        on_c = a[:, is_c].sum(axis=1)
        s_sum += float(on_c[~is_c].sum())
        c_sum += float((1.0 - on_c[is_c]).sum())
        s_rows += int((~is_c).sum())
        c_rows += int(is_c.sum())
        i = np.arange(n)
        band = np.abs(i[:, None] - i[None, :]) <= window_radius
        w_sum += float((a * band).sum())
        rows += n
    return AttnStats(s_sum / s_rows if s_rows else 0.0, c_sum / c_rows if c_rows else 0.0,
                     w_sum / rows if rows else 0.0, window_radius, s_rows, c_rows, rows)


def combine_stats(parts: Sequence[AttnStats]) -> AttnStats:
    """Row-weighted pooling of per-example statistics."""
    if not parts:
        raise InputError("no statistics to combine")
    s_rows = sum(p.source_rows for p in parts)
    c_rows = sum(p.context_rows for p in parts)
    rows = sum(p.rows for p in parts)
    return AttnStats(
        sum(p.s_attn_c * p.source_rows for p in parts) / s_rows if s_rows else 0.0,
        sum(p.c_attn_s * p.context_rows for p in parts) / c_rows if c_rows else 0.0,
        sum(p.win_attn * p.rows for p in parts) / rows if rows else 0.0,
        parts[0].window_radius, s_rows, c_rows, rows)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    rouge1: float | None = None
    rouge2: float | None = None
    rougeL: float | None = None
    f1: float | None = None
    bleu: float | None = None
    ppl: float | None = None
    bw_ppl: float | None = None
    u_ctx: float | None = None
    skipped_uctx: int = 0
    n_examples: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def text_metrics(gens: Sequence[Sequence], refs: Sequence[Sequence]) -> MetricsReport:
    """Example-averaged ROUGE-1/2/L and unigram F1, plus corpus BLEU."""
    if len(gens) != len(refs):
        raise InputError(f"{len(gens)} generations but {len(refs)} references")
    if not refs:
        raise InputError("no examples to score")
    return MetricsReport(
        rouge1=float(np.mean([rouge_n(g, r, 1) for g, r in zip(gens, refs)])),
        rouge2=float(np.mean([rouge_n(g, r, 2) for g, r in zip(gens, refs)])),
        rougeL=float(np.mean([rouge_l(g, r) for g, r in zip(gens, refs)])),
        f1=float(np.mean([unigram_f1(g, r) for g, r in zip(gens, refs)])),
        bleu=corpus_bleu(gens, refs),
        n_examples=len(refs),
    )
