"""Vocabulary, dataset files, S/C/T augmentation and the synthetic lookup task."""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, GenerationError, ParseError, VocabError

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")
CONTENT_SUFFIX = "\t#content"


class Vocabulary:
    """Token/id bijection with per-token content flags.

    Ids 0-4 are reserved for PAD, BOS, EOS, SEP and UNK and are never content.
    """

    def __init__(self, tokens: Iterable[str] = (), content: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        self.content_flags: list[bool] = [False] * len(RESERVED)
        content = set(content)
        for tok in tokens:
            self.add(tok, tok in content)

    def add(self, token: str, content: bool = False) -> int:
        if not token or any(c.isspace() for c in token):
            raise VocabError(f"invalid token {token!r}")
        if token in self.stoi:
            idx = self.stoi[token]
            if content and idx >= len(RESERVED):
                self.content_flags[idx] = True
            return idx
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        self.content_flags.append(bool(content))
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.content_flags == other.content_flags

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.itos):
            raise VocabError(f"token id {idx} outside vocabulary of size {len(self.itos)}")
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.id(t) for t in tokens)

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.token(int(i)))
        return out

    def is_content(self, idx: int) -> bool:
        return self.content_flags[idx]

    def content_set(self, ids: Iterable[int]) -> set[int]:
        return {int(i) for i in ids if 0 <= i < len(self.itos) and self.content_flags[int(i)]}

    def lines(self) -> list[str]:
        return [t + (CONTENT_SUFFIX if f else "") for t, f in zip(self.itos, self.content_flags)]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        entries = []
        for n, raw in enumerate(lines, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            content = line.endswith(CONTENT_SUFFIX)
            tok = line[: -len(CONTENT_SUFFIX)] if content else line
            if "\t" in tok:
                raise ParseError(f"unexpected field in vocabulary entry {line!r}", n)
            entries.append((tok, content))
        if [t for t, _ in entries[: len(RESERVED)]] == list(RESERVED):
            entries = entries[len(RESERVED):]
        for tok, content in entries:
            if tok in vocab.stoi:
                raise ParseError(f"duplicate vocabulary token {tok!r}")
            vocab.add(tok, content)
        return vocab

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())

    def to_list(self) -> list[str]:
        return self.lines()


@dataclass(frozen=True)
class ExampleTriple:
    source: tuple[int, ...]
    context: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        for name in ("source", "context", "target"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def parse_line(line: str, vocab: Vocabulary, lineno: int | None = None) -> ExampleTriple:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 3:
        raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
    s, c, t = (vocab.encode(f.split()) for f in fields)
    return ExampleTriple(s, c, t)


def load_dataset(path, vocab: Vocabulary) -> list[ExampleTriple]:
    """Read ``S \\t C \\t T`` lines; tokens missing from ``vocab`` become UNK."""
    text = Path(path).read_text(encoding="utf-8")
    return [parse_line(line, vocab, n) for n, line in enumerate(text.splitlines(), 1)]


def format_example(ex: ExampleTriple, vocab: Vocabulary) -> str:
    return "\t".join(" ".join(vocab.decode(seq, strip=False)) for seq in (ex.source, ex.context, ex.target))


def write_dataset(path, examples: Iterable[ExampleTriple], vocab: Vocabulary) -> None:
    lines = [format_example(ex, vocab) for ex in examples]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentationConfig:
    p_st: float = 0.0
    p_sc: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_st", "p_sc"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.p_st + self.p_sc > 1.0 + 1e-12:
            raise ConfigError(f"p_st + p_sc must not exceed 1, got {self.p_st + self.p_sc}")

    def to_dict(self) -> dict:
        return {"p_st": self.p_st, "p_sc": self.p_sc, "seed": self.seed}


def example_rng(seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    """Independent stream per (seed, epoch, example index)."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, epoch, index])


def augment(example: ExampleTriple, cfg: AugmentationConfig, rng: np.random.Generator) -> ExampleTriple:
    """Resample the decoding task of one example.

    With probability ``p_st`` the context is dropped (S -> T); with
    probability ``p_sc`` the model must predict the context from the source
    (S -> C). Otherwise the example is returned unchanged. An example with an
    empty context has nothing to predict for S -> C and stays unchanged.
    """
    u = rng.random()
    if u < cfg.p_st:
        return ExampleTriple(example.source, (), example.target)
    if u < cfg.p_st + cfg.p_sc and example.context:
        return ExampleTriple(example.source, (), example.context)
    return example


def augment_epoch(examples: Sequence[ExampleTriple], cfg: AugmentationConfig, epoch: int) -> list[ExampleTriple]:
    if cfg.p_st == 0.0 and cfg.p_sc == 0.0:
        return list(examples)
    return [augment(ex, cfg, example_rng(cfg.seed, i, epoch)) for i, ex in enumerate(examples)]


# ---------------------------------------------------------------------------
# synthetic key/value lookup task
# ---------------------------------------------------------------------------

@dataclass
class SynthTask:
    vocab: Vocabulary
    train: list[ExampleTriple]
    valid: list[ExampleTriple]
    test: list[ExampleTriple]
    n_keys: int
    n_ops: int
    n_values: int
    # op_maps[j][v] is the output token id for value index v under op j
    op_maps: list[list[int]] = field(repr=False)

    def __iter__(self) -> Iterator[list[ExampleTriple]]:
        return iter((self.train, self.valid, self.test))

    @property
    def value_ids(self) -> list[int]:
        return [self.vocab.id(f"v{i}") for i in range(self.n_values)]


def synth_vocabulary(n_keys: int, n_ops: int, n_values: int) -> Vocabulary:
    tokens = ["query"]
    tokens += [f"k{i}" for i in range(n_keys)]
    tokens += [f"op{j}" for j in range(n_ops)]
    values = [f"v{i}" for i in range(n_values)]
    tokens += values
    tokens += [f"o{j}_{i}" for j in range(1, n_ops) for i in range(n_values)]
    return Vocabulary(tokens, content=values)


def synth_capacity(n_keys: int, n_ops: int, n_values: int) -> int:
    """Number of distinct (value assignment, queried key, op) combinations."""
    return n_values ** n_keys * n_keys * n_ops


def _sample_combinations(capacity: int, n: int, rng: np.random.Generator) -> list[int]:
    if capacity <= 4 * n or capacity < 2 ** 20:
        return [int(i) for i in rng.choice(capacity, size=n, replace=False)]
    seen: set[int] = set()
    out: list[int] = []
    while len(out) < n:
        idx = int(rng.integers(0, capacity)) if capacity < 2 ** 63 else int(rng.random() * capacity)
        if idx not in seen:
            seen.add(idx)
            out.append(idx)
    return out


def synth_lookup_task(n_keys: int, n_ops: int, n_examples: int, seed: int, n_values: int = 8,
                      valid_frac: float = 0.1, test_frac: float = 0.1) -> SynthTask:
    """Generate a context-dependent lookup task.

    The context lists every key once, in random order, each followed by a
    random value: ``k3 v5 k0 v1 ...``. The source asks ``query k_i op_j``; the
    target is the single token ``f_j(v)`` where ``v`` is the value of ``k_i``.
    ``f_0`` is the identity on values and every other op maps the values
    bijectively onto its own output tokens. Splits never share a
    (value assignment, queried key, op) combination.
    """
    if n_keys < 1 or n_ops < 1 or n_values < 1:
        raise GenerationError("n_keys, n_ops and n_values must be positive")
    if n_examples < 1:
        raise GenerationError("n_examples must be positive")
    capacity = synth_capacity(n_keys, n_ops, n_values)
    if n_examples > capacity:
        raise GenerationError(f"{n_examples} examples requested but only {capacity} distinct combinations exist")
    rng = np.random.default_rng(seed)
    vocab = synth_vocabulary(n_keys, n_ops, n_values)
    key_ids = [vocab.id(f"k{i}") for i in range(n_keys)]
    op_ids = [vocab.id(f"op{j}") for j in range(n_ops)]
    value_ids = [vocab.id(f"v{i}") for i in range(n_values)]
    op_maps = [list(value_ids)]
    for j in range(1, n_ops):
        perm = rng.permutation(n_values)
        op_maps.append([vocab.id(f"o{j}_{int(p)}") for p in perm])

    examples = []
    for combo in _sample_combinations(capacity, n_examples, rng):
        op, rest = combo % n_ops, combo // n_ops
        key, rest = rest % n_keys, rest // n_keys
        assignment = []
        for _ in range(n_keys):
            assignment.append(rest % n_values)
            rest //= n_values
        order = rng.permutation(n_keys)
        context = tuple(itertools.chain.from_iterable((key_ids[k], value_ids[assignment[k]]) for k in order))
        source = (vocab.id("query"), key_ids[key], op_ids[op])
        target = (op_maps[op][assignment[key]],)
        examples.append(ExampleTriple(source, context, target))

    n_test = int(round(n_examples * test_frac))
    n_valid = int(round(n_examples * valid_frac))
    n_train = n_examples - n_test - n_valid
    return SynthTask(vocab, examples[:n_train], examples[n_train:n_train + n_valid],
                     examples[n_train + n_valid:], n_keys, n_ops, n_values, op_maps)
