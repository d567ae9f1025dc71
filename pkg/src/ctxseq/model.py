"""Context-aware encoder-decoder Transformer.

The source and context are encoded separately by one shared encoder and the
decoder combines them according to a :class:`DecoderStrategy`:

* ``sequential``  - source, SEP and context are encoded as one sequence.
* ``concatenate`` - every decoder layer cross-attends to ``[E(S); E(C)]``.
* ``alternate``   - every layer attends to ``E(C)`` and then to ``E(S)``.
* ``interleave``  - layer ``l`` attends to ``E(S)`` if ``l`` is a source layer,
  otherwise to ``E(C)``.

All sublayers use residual connections followed by layer normalization.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, AttentionRecord, FocusConfig, attend, attend_causal
from .data import BOS, EOS, PAD, SEP, ExampleTriple
from .errors import CheckpointError, ConfigError, InputError, VocabError
from .tensor import Tensor


class DecoderStrategy(str, enum.Enum):
    SEQUENTIAL = "sequential"
    CONCATENATE = "concatenate"
    ALTERNATE = "alternate"
    INTERLEAVE = "interleave"


# strategies that share one parameter layout
SAME_PARAMETERS = frozenset({DecoderStrategy.SEQUENTIAL, DecoderStrategy.CONCATENATE, DecoderStrategy.INTERLEAVE})


def default_interleave_layers(n_layers: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Sandwich partition: outer layers attend to the source, middle layers to the context.

    Six layers give source layers (1, 2, 5, 6) and context layers (3, 4).
    """
    if n_layers < 2:
        raise ConfigError("interleave needs at least two decoder layers")
    outer = math.ceil(n_layers / 3)
    if 2 * outer >= n_layers:
        outer = (n_layers - 1) // 2
    if outer == 0:
        return (1,), tuple(range(2, n_layers + 1))
    source = tuple(range(1, outer + 1)) + tuple(range(n_layers - outer + 1, n_layers + 1))
    context = tuple(range(outer + 1, n_layers - outer + 1))
    return source, context


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    ffn_dim: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 1
    strategy: DecoderStrategy = DecoderStrategy.INTERLEAVE
    source_layers: tuple[int, ...] | None = None
    context_layers: tuple[int, ...] | None = None
    focus: FocusConfig = field(default_factory=FocusConfig)
    scaled_dot: bool = False
    share_embeddings: bool = True
    value_proj: bool = True

    def __post_init__(self):
        self.strategy = DecoderStrategy(self.strategy)
        if isinstance(self.focus, dict):
            self.focus = FocusConfig(**self.focus)
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must be at least 4, got {self.vocab_size}")
        for name in ("d_model", "ffn_dim", "enc_layers", "dec_layers", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.strategy is DecoderStrategy.INTERLEAVE:
            if self.source_layers is None and self.context_layers is None:
                self.source_layers, self.context_layers = default_interleave_layers(self.dec_layers)
            if self.source_layers is None or self.context_layers is None:
                raise ConfigError("interleave needs both source_layers and context_layers")
            self.source_layers = tuple(sorted(int(i) for i in self.source_layers))
            self.context_layers = tuple(sorted(int(i) for i in self.context_layers))
            s, c = set(self.source_layers), set(self.context_layers)
            if not s or not c:
                raise ConfigError("interleave layer sets must both be non-empty")
            if s & c:
                raise ConfigError(f"layers {sorted(s & c)} assigned to both source and context")
            if s | c != set(range(1, self.dec_layers + 1)) or len(self.source_layers) + len(self.context_layers) != self.dec_layers:
                raise ConfigError(f"source/context layers must partition 1..{self.dec_layers}")
        else:
            if self.source_layers or self.context_layers:
                raise ConfigError(f"layer sets only apply to interleave, not {self.strategy.value}")
            self.source_layers = self.context_layers = None

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model, "ffn_dim": self.ffn_dim,
            "enc_layers": self.enc_layers, "dec_layers": self.dec_layers, "n_heads": self.n_heads,
            "strategy": self.strategy.value,
            "source_layers": list(self.source_layers) if self.source_layers else None,
            "context_layers": list(self.context_layers) if self.context_layers else None,
            "focus": self.focus.to_dict(), "scaled_dot": self.scaled_dot,
            "share_embeddings": self.share_embeddings, "value_proj": self.value_proj,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["focus"] = FocusConfig(**d.get("focus", {}))
        return cls(**d)

    def source_attending(self, layer: int) -> bool:
        """Whether 1-based decoder ``layer`` cross-attends to the source under interleave."""
        return layer in self.source_layers


def attention_module_size(cfg: ModelConfig) -> int:
    """Parameters of one attention sublayer, including its layer norm."""
    d = cfg.d_model
    return (4 if cfg.value_proj else 2) * d * d + 2 * d


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v, f = cfg.d_model, cfg.vocab_size, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    if not cfg.share_embeddings:
        shapes["embed_tgt"] = (v, d)
        shapes["out_proj"] = (d, v)
    shapes["null_context"] = (1, d)
    projections = ("q", "k", "v", "o") if cfg.value_proj else ("q", "k")

    def attn(prefix):
        for p in projections:
            shapes[f"{prefix}.{p}"] = (d, d)
        shapes[f"{prefix}_norm.gain"] = (d,)
        shapes[f"{prefix}_norm.bias"] = (d,)

    def ff(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)
        shapes[f"{prefix}_norm.gain"] = (d,)
        shapes[f"{prefix}_norm.bias"] = (d,)

    for l in range(cfg.enc_layers):
        attn(f"encoder.{l}.self_attn")
        ff(f"encoder.{l}.ff")
    for l in range(cfg.dec_layers):
        attn(f"decoder.{l}.self_attn")
        if cfg.strategy is DecoderStrategy.ALTERNATE:
            attn(f"decoder.{l}.ctx_attn")
        attn(f"decoder.{l}.cross_attn")
        ff(f"decoder.{l}.ff")
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def _init_param(name: str, shape: tuple, rng: np.random.Generator, d_model: int) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2"):
        return np.zeros(shape)
    if name in ("embed", "embed_tgt", "null_context"):
        return rng.normal(0.0, d_model ** -0.5, size=shape)
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d // 2])
    return pe


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _pad(seqs: Sequence[Sequence[int]], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    width = max(min_len, max((len(s) for s in seqs), default=0))
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids != PAD


def joint_source(example: ExampleTriple) -> tuple[int, ...]:
    """Encoder input of the sequential strategy: ``S SEP C`` (just ``S`` without context)."""
    if not example.context:
        return example.source
    return example.source + (SEP,) + example.context


def joint_labels(example: ExampleTriple) -> str:
    """Segment of each position of :func:`joint_source`; the separator counts as source."""
    return "S" * (len(example.source) + (1 if example.context else 0)) + "C" * len(example.context)


@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    ctx: np.ndarray | None
    ctx_mask: np.ndarray | None
    ctx_empty: np.ndarray | None
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(examples: Sequence[ExampleTriple], cfg: ModelConfig, with_target: bool = True) -> Batch:
    if not examples:
        raise InputError("empty batch")
    for ex in examples:
        if not ex.source:
            raise InputError("empty source sequence")
        for seq in (ex.source, ex.context, ex.target):
            if seq and (min(seq) < 0 or max(seq) >= cfg.vocab_size):
                raise VocabError(f"token id outside vocabulary of size {cfg.vocab_size}")
    if cfg.strategy is DecoderStrategy.SEQUENTIAL:
        src, src_mask = _pad([joint_source(ex) for ex in examples])
        ctx = ctx_mask = ctx_empty = None
    else:
        src, src_mask = _pad([ex.source for ex in examples])
        ctx_empty = np.array([not ex.context for ex in examples])
        ctx, ctx_mask = _pad([ex.context for ex in examples])
        ctx_mask[ctx_empty, 0] = True
    if with_target:
        tgt_in, _ = _pad([(BOS,) + ex.target for ex in examples])
        tgt_out, _ = _pad([ex.target + (EOS,) for ex in examples])
    else:
        tgt_in = tgt_out = np.full((len(examples), 1), BOS, dtype=np.int64)
    return Batch(src, src_mask, ctx, ctx_mask, ctx_empty, tgt_in, tgt_out)


@dataclass
class Memory:
    """Encoder outputs handed to the decoder. ``context`` is None for sequential models."""
    source: Tensor
    source_mask: np.ndarray
    context: Tensor | None = None
    context_mask: np.ndarray | None = None

    def repeat(self, n: int) -> "Memory":
        """Tile a single-example memory ``n`` times along the batch axis (no gradient)."""
        def tile(x):
            return None if x is None else np.repeat(x, n, axis=0)
        return Memory(Tensor(tile(self.source.data)), tile(self.source_mask),
                      None if self.context is None else Tensor(tile(self.context.data)), tile(self.context_mask))


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class Seq2SeqModel:
    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        shapes = parameter_shapes(config)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            data = _init_param(name, shape, rng, config.d_model)
            self.params[name] = Tensor(data, requires_grad=True, name=name)
        if params is not None:
            self.load_state(params)
        self._pe = sinusoidal_positions(64, config.d_model)

    # -- parameters -------------------------------------------------------
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        mine = {k: p.shape for k, p in self.params.items()}
        theirs = {k: tuple(np.shape(v)) for k, v in state.items()}
        if mine != theirs:
            missing = sorted(set(mine) - set(theirs))
            extra = sorted(set(theirs) - set(mine))
            bad = sorted(k for k in set(mine) & set(theirs) if mine[k] != theirs[k])
            raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]} shape={bad[:5]}")
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- building blocks --------------------------------------------------
    def _attn(self, prefix: str) -> AttentionParams:
        p = self.params
        return AttentionParams(p[f"{prefix}.q"], p[f"{prefix}.k"], p.get(f"{prefix}.v"), p.get(f"{prefix}.o"),
                               self.config.n_heads)

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}_norm.gain"], self.params[f"{prefix}_norm.bias"])

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = T.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    def _positions(self, n: int) -> np.ndarray:
        if n > len(self._pe):
            self._pe = sinusoidal_positions(max(n, 2 * len(self._pe)), self.config.d_model)
        return self._pe[:n]

    def _embed(self, ids: np.ndarray, table: str) -> Tensor:
        x = T.embedding(self.params[table], ids) * math.sqrt(self.config.d_model)
        return x + self._positions(ids.shape[-1])

    # -- encoder ----------------------------------------------------------
    def encode_ids(self, ids: np.ndarray, mask: np.ndarray, is_context: bool = False,
                   records: list | None = None, kind: str | None = None) -> Tensor:
        """Encode a padded batch of token ids (B x L) into B x L x D states."""
        cfg = self.config
        kind = kind or ("self-C" if is_context else "self-S")
        focus = cfg.focus if is_context and cfg.focus.active else None
        x = self._embed(ids, "embed")
        key_mask = mask[:, None, :]
        for l in range(cfg.enc_layers):
            pre = f"encoder.{l}"
            a, rec = attend(x, x, x, self._attn(f"{pre}.self_attn"), mask=key_mask, focus=focus,
                            scaled_dot=cfg.scaled_dot, layer=l + 1, kind=kind)
            if records is not None:
                records.append(rec)
            x = self._norm(f"{pre}.self_attn", x + a)
            x = self._norm(f"{pre}.ff", x + self._ff(f"{pre}.ff", x))
        return x

    def encode(self, tokens: Sequence[int], is_context: bool = False, records: list | None = None) -> Tensor:
        """Encode one token sequence into a len x D matrix."""
        tokens = list(tokens)
        if not tokens:
            raise InputError("cannot encode an empty sequence")
        if min(tokens) < 0 or max(tokens) >= self.config.vocab_size:
            raise VocabError(f"token id outside vocabulary of size {self.config.vocab_size}")
        ids = np.array([tokens], dtype=np.int64)
        return self.encode_ids(ids, np.ones_like(ids, dtype=bool), is_context, records)[0]

    def encode_batch(self, batch: Batch, records: list | None = None) -> Memory:
        cfg = self.config
        if cfg.strategy is DecoderStrategy.SEQUENTIAL:
            src = self.encode_ids(batch.src, batch.src_mask, False, records, kind="self-joint")
            return Memory(src, batch.src_mask)
        src = self.encode_ids(batch.src, batch.src_mask, False, records)
        null = self.params["null_context"]
        empty = batch.ctx_empty
        if empty.all():
            ctx = null * np.ones((batch.size, 1, 1))
            return Memory(src, batch.src_mask, ctx, np.ones((batch.size, 1), dtype=bool))
        ctx = self.encode_ids(batch.ctx, batch.ctx_mask, True, records)
        if empty.any():
            keep = (~empty).astype(np.float64)[:, None, None]
            select = np.zeros(batch.ctx.shape + (1,))
            select[empty, 0, 0] = 1.0
            ctx = ctx * keep + null * select
        return Memory(src, batch.src_mask, ctx, batch.ctx_mask)

    # -- decoder ----------------------------------------------------------
    def decode(self, tgt_in: np.ndarray, memory: Memory, records: list | None = None) -> Tensor:
        """Teacher-forced decoder stack; returns B x P x V next-token logits."""
        cfg = self.config
        strategy = cfg.strategy
        if strategy is not DecoderStrategy.SEQUENTIAL and memory.context is None and strategy is not DecoderStrategy.CONCATENATE:
            raise ConfigError(f"{strategy.value} decoding needs a context encoding")
        src, src_mask = memory.source, memory.source_mask[:, None, :]
        if memory.context is not None:
            ctx, ctx_mask = memory.context, memory.context_mask[:, None, :]
        if strategy is DecoderStrategy.CONCATENATE and memory.context is not None:
            joint = T.concat([src, ctx], axis=1)
            joint_mask = np.concatenate([memory.source_mask, memory.context_mask], axis=1)[:, None, :]
        embed = "embed" if cfg.share_embeddings else "embed_tgt"
        y = self._embed(tgt_in, embed)

        def cross(prefix, mem, mask, kind, layer):
            a, rec = attend(y, mem, mem, self._attn(prefix), mask=mask, scaled_dot=cfg.scaled_dot,
                            layer=layer, kind=kind)
            if records is not None:
                records.append(rec)
            return self._norm(prefix, y + a)

        for l in range(cfg.dec_layers):
            pre = f"decoder.{l}"
            a, rec = attend_causal(y, self._attn(f"{pre}.self_attn"), scaled_dot=cfg.scaled_dot, layer=l + 1)
            if records is not None:
                records.append(rec)
            y = self._norm(f"{pre}.self_attn", y + a)
            if strategy is DecoderStrategy.SEQUENTIAL:
                y = cross(f"{pre}.cross_attn", src, src_mask, "cross-joint", l + 1)
            elif strategy is DecoderStrategy.CONCATENATE:
                if memory.context is None:
                    y = cross(f"{pre}.cross_attn", src, src_mask, "cross-S", l + 1)
                else:
                    y = cross(f"{pre}.cross_attn", joint, joint_mask, "cross-joint", l + 1)
            elif strategy is DecoderStrategy.ALTERNATE:
                y = cross(f"{pre}.ctx_attn", ctx, ctx_mask, "cross-C", l + 1)
                y = cross(f"{pre}.cross_attn", src, src_mask, "cross-S", l + 1)
            elif cfg.source_attending(l + 1):
                y = cross(f"{pre}.cross_attn", src, src_mask, "cross-S", l + 1)
            else:
                y = cross(f"{pre}.cross_attn", ctx, ctx_mask, "cross-C", l + 1)
            y = self._norm(f"{pre}.ff", y + self._ff(f"{pre}.ff", y))
        if cfg.share_embeddings:
            return y @ T.transpose(self.params["embed"])
        return y @ self.params["out_proj"]

    decode_step_stack = decode

    def logits(self, batch: Batch, records: list | None = None) -> Tensor:
        return self.decode(batch.tgt_in, self.encode_batch(batch, records), records)

    def forward_loss(self, examples: Sequence[ExampleTriple]) -> tuple[Tensor, int]:
        """Mean teacher-forced cross-entropy over non-PAD target positions, and their count."""
        batch = make_batch(examples, self.config)
        logits = self.logits(batch)
        count = int((batch.tgt_out != PAD).sum())
        return T.cross_entropy(logits, batch.tgt_out, ignore_index=PAD), count

    def memory_for(self, example: ExampleTriple, records: list | None = None) -> Memory:
        with T.no_grad():
            return self.encode_batch(make_batch([example], self.config, with_target=False), records)

    def next_log_probs(self, prefixes: np.ndarray, memory: Memory) -> np.ndarray:
        """Log-probabilities of the token following each row of ``prefixes`` (B x P, starting with BOS)."""
        with T.no_grad():
            logits = self.decode(prefixes, memory).data[:, -1, :]
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CTXSEQCK"
FORMAT_VERSION = 1


def save_checkpoint(path, model: Seq2SeqModel, meta: dict | None = None) -> None:
    """Write the versioned header and every named parameter as little-endian f64."""
    header = {"model_config": model.config.to_dict(), **(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", buf, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        pos = 16
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            n = int(np.prod(dims)) if rank else 1
            params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return header, params


def load_checkpoint(path) -> tuple[Seq2SeqModel, dict]:
    header, params = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    return Seq2SeqModel(cfg, params=params), header
