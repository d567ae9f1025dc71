"""``ctxseq`` command line: synth, train, eval, generate and stats subcommands.

Settings come from a flat JSON config file (``--config``), overridden by
flags, overridden in turn by the ``CTXSEQ_SEED`` environment variable for the
seed. Every run writes into ``--out-dir`` together with a ``manifest.json``
that records the full run configuration and its hash.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import FocusConfig
from .data import AugmentationConfig, ExampleTriple, Vocabulary, load_dataset, synth_lookup_task, write_dataset
from .decoding import DecodeConfig, generate, strip_eos
from .errors import (CheckpointError, ConfigError, GenerationError, InputError, NumericError,
                     ParseError, VocabError)
from .metrics import attention_stats, backward_ppl, combine_stats, corpus_context_use, text_metrics
from .model import DecoderStrategy, ModelConfig, Seq2SeqModel, joint_labels, load_checkpoint
from .training import TrainConfig, evaluate_ppl, train

log = logging.getLogger("ctxseq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class RunConfig:
    """Every tunable of an experiment, flat so it maps one-to-one onto a config file."""

    # model
    d_model: int = 64
    ffn_dim: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 1
    strategy: str = "interleave"
    layers_source: str = ""
    layers_context: str = ""
    tau: float = 1.0
    sigma: float = 40.0
    focus_temperature: bool = False
    focus_window: bool = False
    scaled_dot: bool = False
    # training
    lr_peak: float = 1e-4
    warmup_steps: int = 4000
    warmup_init_lr: float = 1e-7
    clip_norm: float = 1.0
    batch_size: int = 32
    max_steps: int = 1000
    validate_every: int = 250
    seed: int = 0
    p_st: float = 0.0
    p_sc: float = 0.0
    init_checkpoint: str = ""
    # decoding
    beam_size: int = 5
    length_penalty: float = 1.5
    max_len: int = 500
    no_repeat_ngram: int = 3
    min_len: int = 0
    # synthetic data
    n_keys: int = 6
    n_ops: int = 3
    n_values: int = 8
    n_examples: int = 12000
    # paths
    data_dir: str = ""
    vocab: str = ""
    checkpoint: str = ""
    reverse_checkpoint: str = ""

    @classmethod
    def build(cls, file: str | None, overrides: dict) -> "RunConfig":
        values: dict = {}
        if file:
            try:
                values = json.loads(Path(file).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{file}: not a JSON document ({exc})") from None
            if not isinstance(values, dict) or any(isinstance(v, (dict, list)) for v in values.values()):
                raise ConfigError(f"{file}: config must be a flat key/value object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update({k: v for k, v in overrides.items() if k in known and v is not None})
        if "CTXSEQ_SEED" in os.environ:
            try:
                values["seed"] = int(os.environ["CTXSEQ_SEED"])
            except ValueError:
                raise ConfigError(f"CTXSEQ_SEED must be an integer, got {os.environ['CTXSEQ_SEED']!r}") from None
        cfg = cls()
        for k, v in values.items():
            typ = type(getattr(cfg, k))
            if typ is bool and not isinstance(v, bool):
                raise ConfigError(f"{k} must be true or false")
            try:
                setattr(cfg, k, typ(v))
            except (TypeError, ValueError):
                raise ConfigError(f"{k}: cannot convert {v!r} to {typ.__name__}") from None
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, ffn_dim=self.ffn_dim, enc_layers=self.enc_layers,
            dec_layers=self.dec_layers, n_heads=self.n_heads, strategy=self.strategy,
            source_layers=_layer_list(self.layers_source), context_layers=_layer_list(self.layers_context),
            focus=FocusConfig(self.tau, self.sigma, self.focus_temperature, self.focus_window),
            scaled_dot=self.scaled_dot)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_peak=self.lr_peak, warmup_steps=self.warmup_steps, warmup_init_lr=self.warmup_init_lr,
            clip_norm=self.clip_norm, batch_size=self.batch_size, max_steps=self.max_steps,
            validate_every=self.validate_every, seed=self.seed,
            augmentation=AugmentationConfig(self.p_st, self.p_sc, self.seed),
            init_checkpoint=self.init_checkpoint or None)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.beam_size, self.length_penalty, self.max_len, self.no_repeat_ngram, self.min_len)


def _layer_list(text: str) -> tuple[int, ...] | None:
    if not text:
        return None
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"layer list must be comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(out: Path, command: str, cfg: RunConfig, files: Sequence[str], extra: dict | None = None) -> None:
    entry = {"command": command, "run_config": cfg.to_dict(), "run_config_hash": cfg.digest(),
             "files": {}}
    for name in files:
        entry["files"][name] = hashlib.sha256((out / name).read_bytes()).hexdigest()
    entry.update(extra or {})
    _write_json(out / "manifest.json", entry)


def _data_path(cfg: RunConfig, args, name: str) -> Path:
    explicit = getattr(args, name, None)
    if explicit:
        return Path(explicit)
    if not cfg.data_dir:
        raise ConfigError(f"need --{name} or data_dir")
    return Path(cfg.data_dir) / f"{name}.tsv"


def _vocab(cfg: RunConfig) -> Vocabulary:
    path = Path(cfg.vocab) if cfg.vocab else Path(cfg.data_dir or ".") / "vocab.txt"
    return Vocabulary.load(path)


def _load_model(path: str, vocab: Vocabulary) -> tuple[Seq2SeqModel, dict]:
    if not path:
        raise ConfigError("no checkpoint given")
    model, header = load_checkpoint(path)
    stored = header.get("vocab_digest")
    if stored is not None and stored != vocab.digest():
        raise VocabError(f"{path} was trained with a different vocabulary")
    if model.config.vocab_size != len(vocab):
        raise VocabError(f"{path} expects {model.config.vocab_size} tokens, vocabulary has {len(vocab)}")
    return model, header


def _read_token_lines(path: Path) -> list[list[str]]:
    return [line.split() for line in path.read_text(encoding="utf-8").splitlines()]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args, out: Path) -> int:
    task = synth_lookup_task(cfg.n_keys, cfg.n_ops, cfg.n_examples, cfg.seed, cfg.n_values)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in zip(("train", "valid", "test"), task):
        write_dataset(out / f"{name}.tsv", split, task.vocab)
    task.vocab.save(out / "vocab.txt")
    _manifest(out, "synth", cfg, ["train.tsv", "valid.tsv", "test.tsv", "vocab.txt"],
              {"sizes": {n: len(s) for n, s in zip(("train", "valid", "test"), task)}})
    print(f"wrote {len(task.train)}/{len(task.valid)}/{len(task.test)} examples to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    vocab = _vocab(cfg)
    model_cfg = cfg.model_config(len(vocab))
    train_cfg = cfg.train_config()
    train_set = load_dataset(_data_path(cfg, args, "train"), vocab)
    valid_set = load_dataset(_data_path(cfg, args, "valid"), vocab)
    if args.reverse:
        # target -> source pairs without context, for backward perplexity
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "strategy": "sequential", "source_layers": None,
                                   "context_layers": None, "focus": model_cfg.focus})
        train_set = [ExampleTriple(ex.target, (), ex.source) for ex in train_set]
        valid_set = [ExampleTriple(ex.target, (), ex.source) for ex in valid_set]
    model = Seq2SeqModel(model_cfg, seed=cfg.seed)
    meta = {"run_config": cfg.to_dict(), "run_config_hash": cfg.digest(), "vocab_digest": vocab.digest(),
            "reverse": bool(args.reverse)}
    result = train(model, train_set, valid_set, train_cfg, out_dir=out, meta=meta)
    _manifest(out, "train", cfg, ["model.ckpt", "train_log.jsonl"],
              {"best_valid_ppl": result.best_valid_ppl, "best_step": result.best_step})
    print(f"best valid ppl {result.best_valid_ppl} at step {result.best_step}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _hypotheses(model: Seq2SeqModel, examples: list[ExampleTriple], cfg: RunConfig, threads: int):
    return generate(model, examples, cfg.decode_config(), threads)


def cmd_generate(cfg: RunConfig, args, out: Path) -> int:
    vocab = _vocab(cfg)
    model, _ = _load_model(cfg.checkpoint, vocab)
    examples = load_dataset(_data_path(cfg, args, "test"), vocab)
    nbest = _hypotheses(model, examples, cfg, args.threads)
    out.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(vocab.decode(n[0][0])) if n else "" for n in nbest]
    (out / "generations.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    files = ["generations.txt"]
    if args.nbest:
        with (out / "nbest.jsonl").open("w", encoding="utf-8") as fh:
            for i, hyps in enumerate(nbest):
                for toks, score in hyps:
                    fh.write(json.dumps({"index": i, "tokens": vocab.decode(toks), "score": score}) + "\n")
        files.append("nbest.jsonl")
    scores = [n[0][1] for n in nbest if n]
    _manifest(out, "generate", cfg, files, {"mean_top_score": float(np.mean(scores)) if scores else None,
                                            "checkpoint": cfg.checkpoint})
    print(f"wrote {len(lines)} generations to {out / 'generations.txt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if args.gen and args.ref:
        gens = _read_token_lines(Path(args.gen))
        refs = _read_token_lines(Path(args.ref))
        report = text_metrics(gens, refs)
    else:
        vocab = _vocab(cfg)
        model, _ = _load_model(cfg.checkpoint, vocab)
        examples = load_dataset(_data_path(cfg, args, "test"), vocab)
        if args.gen:
            gens = [list(vocab.encode(t)) for t in _read_token_lines(Path(args.gen))]
            if len(gens) != len(examples):
                raise InputError(f"{len(gens)} generations for {len(examples)} test examples")
        else:
            gens = [strip_eos(n[0][0]) if n else [] for n in _hypotheses(model, examples, cfg, args.threads)]
        report = text_metrics([vocab.decode(g) for g in gens], [vocab.decode(ex.target) for ex in examples])
        report.ppl = evaluate_ppl(model, examples)
        report.u_ctx, report.skipped_uctx = corpus_context_use(examples, gens, vocab)
        if cfg.reverse_checkpoint:
            reverse, _ = _load_model(cfg.reverse_checkpoint, vocab)
            report.bw_ppl = backward_ppl(model, reverse, examples, hypotheses=gens)
            report.extra["bw_ppl_gold"] = backward_ppl(model, reverse, examples, use_gold=True)
    report.extra["run_config_hash"] = cfg.digest()
    _write_json(out / "report.json", report.to_dict())
    _manifest(out, "eval", cfg, ["report.json"])
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_stats(cfg: RunConfig, args, out: Path) -> int:
    vocab = _vocab(cfg)
    model, _ = _load_model(cfg.checkpoint, vocab)
    examples = load_dataset(_data_path(cfg, args, "test"), vocab)
    radius = args.window_radius
    parts = []
    for ex in examples:
        records: list = []
        model.memory_for(ex, records)
        if model.config.strategy is DecoderStrategy.SEQUENTIAL:
            parts.append(attention_stats(records, joint_labels(ex), radius))
        else:
            ctx = [r for r in records if r.kind == "self-C"]
            if ctx:
                parts.append(attention_stats(ctx, "C" * len(ex.context), radius))
    if not parts:
        raise InputError("no examples with attention to analyse")
    stats = asdict(combine_stats(parts))
    if model.config.strategy is not DecoderStrategy.SEQUENTIAL:
        # separate encoders never mix segments
        stats["s_attn_c"] = stats["c_attn_s"] = None
    stats["run_config_hash"] = cfg.digest()
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "stats.json", stats)
    _manifest(out, "stats", cfg, ["stats.json"])
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "generate": cmd_generate,
            "stats": cmd_stats}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxseq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--out-dir", required=True)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        typ = type(f.default)
        if typ is bool:
            common.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            common.add_argument(_flag(f.name), dest=f.name, type=typ, default=None)
    sub.add_parser("synth", parents=[common], help="write a synthetic lookup dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--reverse", action="store_true", help="train the target-to-source model")
    p = sub.add_parser("generate", parents=[common], help="beam-search a test file")
    p.add_argument("--test")
    p.add_argument("--nbest", action="store_true", help="also write every hypothesis with its score")
    p = sub.add_parser("eval", parents=[common], help="score generations")
    p.add_argument("--test")
    p.add_argument("--gen", help="generations, one per line")
    p.add_argument("--ref", help="references, one per line (with --gen, no model needed)")
    p = sub.add_parser("stats", parents=[common], help="encoder self-attention statistics")
    p.add_argument("--test")
    p.add_argument("--window-radius", type=int, default=40)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
        cfg = RunConfig.build(args.config, overrides)
        return COMMANDS[args.command](cfg, args, Path(args.out_dir))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, InputError, VocabError, CheckpointError, GenerationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
