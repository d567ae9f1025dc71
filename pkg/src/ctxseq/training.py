"""Adam, the warmup/inverse-sqrt schedule, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import AugmentationConfig, ExampleTriple, augment_epoch
from .errors import CheckpointError, ConfigError, NumericError
from .model import SAME_PARAMETERS, ModelConfig, Seq2SeqModel, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_peak: float = 1e-4
    warmup_steps: int = 4000
    warmup_init_lr: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0
    batch_size: int = 32
    max_steps: int = 1000
    validate_every: int = 250
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    init_checkpoint: str | None = None

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be at least 1")
        if not self.lr_peak > self.warmup_init_lr > 0:
            raise ConfigError("need lr_peak > warmup_init_lr > 0")
        if self.batch_size < 1 or self.max_steps < 0 or self.validate_every < 1:
            raise ConfigError("batch_size and validate_every must be positive, max_steps non-negative")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "augmentation"}
        d["augmentation"] = self.augmentation.to_dict()
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_init_lr`` to ``lr_peak``, then ``lr_peak * sqrt(warmup / step)``."""
    if step < cfg.warmup_steps:
        return cfg.warmup_init_lr + (cfg.lr_peak - cfg.warmup_init_lr) * step / cfg.warmup_steps
    return cfg.lr_peak * math.sqrt(cfg.warmup_steps / step)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
    """One bias-corrected Adam update, in place.

    ``params`` maps names to tensors (or arrays); parameters absent from
    ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        data = p.data if isinstance(p, T.Tensor) else p
        if g.shape != data.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name!r} {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = T.parameters_grad_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def evaluate_ppl(model: Seq2SeqModel, examples: Sequence[ExampleTriple], batch_size: int = 64) -> float:
    """exp of the token-weighted mean cross-entropy over ``examples``."""
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            loss, n = model.forward_loss(examples[start:start + batch_size])
            total += loss.item() * n
            count += n
    return math.exp(total / count)


def check_warm_start(old: ModelConfig, new: ModelConfig) -> None:
    """Strategies may differ only among those sharing one parameter layout."""
    a, b = old.to_dict(), new.to_dict()
    for key in ("strategy", "source_layers", "context_layers"):
        a.pop(key)
        b.pop(key)
    diff = sorted(k for k in a if a[k] != b[k])
    if diff:
        raise CheckpointError(f"warm-start checkpoint differs in {diff}")
    if old.strategy != new.strategy and not {old.strategy, new.strategy} <= SAME_PARAMETERS:
        raise CheckpointError(
            f"parameter mismatch: cannot warm-start {new.strategy.value} from {old.strategy.value}")


def warm_start(model: Seq2SeqModel, path) -> dict:
    header, params = read_checkpoint(path)
    check_warm_start(ModelConfig.from_dict(header["model_config"]), model.config)
    model.load_state(params)
    return header


@dataclass
class TrainResult:
    checkpoint: Path | None
    log: list[dict]
    best_valid_ppl: float | None
    best_step: int


def train(model: Seq2SeqModel, train_set: Sequence[ExampleTriple], valid_set: Sequence[ExampleTriple],
          cfg: TrainConfig, out_dir=None, meta: dict | None = None, restore_best: bool = True) -> TrainResult:
    """Teacher-forced training with per-epoch augmentation.

    Validation perplexity is measured on the untouched ``valid_set`` every
    ``validate_every`` steps and at the end; the best parameters are saved to
    ``out_dir/model.ckpt`` and, with ``restore_best``, loaded back into the
    model when training finishes.
    """
    if not train_set:
        raise ConfigError("empty training set")
    if cfg.init_checkpoint:
        warm_start(model, cfg.init_checkpoint)
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "model.ckpt" if out is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "train_log.jsonl").open("w", encoding="utf-8")
    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    state = AdamState()
    best_ppl, best_step, best_state = math.inf, 0, None
    step, epoch = 0, 0
    n = len(train_set)
    try:
        while step < cfg.max_steps:
            data = augment_epoch(train_set, cfg.augmentation, epoch)
            order = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, epoch]).permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = [data[i] for i in order[start:start + cfg.batch_size]]
                model.zero_grad()
                loss, _ = model.forward_loss(batch)
                grads = {p.name: g.data for p, g in T.backward(loss).items()}
                clip_by_global_norm(grads, cfg.clip_norm)
                lr = lr_at(step, cfg)
                adam_step(model.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                step += 1
                value = loss.item()
                emit({"step": step, "loss": value, "ppl": math.exp(min(value, 700.0)), "lr": lr})
                if valid_set and (step % cfg.validate_every == 0 or step == cfg.max_steps):
                    vppl = evaluate_ppl(model, valid_set)
                    emit({"step": step, "valid_ppl": vppl})
                    log.info("step %d loss %.4f valid ppl %.4f", step, value, vppl)
                    if vppl < best_ppl:
                        best_ppl, best_step, best_state = vppl, step, model.state_dict()
                        if ckpt_path is not None:
                            save_checkpoint(ckpt_path, model, meta)
                if step >= cfg.max_steps:
                    break
            epoch += 1
    finally:
        if log_file is not None:
            log_file.close()
    if best_state is None:
        best_step = step
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, model, meta)
    elif restore_best:
        model.load_state(best_state)
    return TrainResult(ckpt_path, records, best_ppl if best_state is not None else None, best_step)
