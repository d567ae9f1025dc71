"""Dot-product attention, its causal variant, and focused context attention.

Scores follow ``(Q P_Q)(K P_K)^T`` without the usual ``1/sqrt(d)`` factor
unless ``scaled_dot`` is requested. Focused attention sharpens the score
distribution with a temperature and then reweights it with a Gaussian window
around the diagonal before renormalizing each row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

RECORD_KINDS = ("self-S", "self-C", "self-T", "self-joint", "cross-S", "cross-C", "cross-joint")


@dataclass
class FocusConfig:
    tau: float = 1.0
    sigma: float = 40.0
    enable_temperature: bool = False
    enable_window: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if not self.sigma > 0:
            raise ConfigError(f"window size must be positive, got {self.sigma}")

    @property
    def active(self) -> bool:
        return self.enable_temperature or self.enable_window

    def to_dict(self) -> dict:
        return {"tau": self.tau, "sigma": self.sigma,
                "enable_temperature": self.enable_temperature, "enable_window": self.enable_window}


@dataclass
class AttentionParams:
    P_Q: Tensor
    P_K: Tensor
    P_V: Tensor | None = None
    P_O: Tensor | None = None
    n_heads: int = 1

    def __post_init__(self):
        d = self.P_Q.shape[0]
        for name in ("P_Q", "P_K", "P_V", "P_O"):
            p = getattr(self, name)
            if p is not None and p.shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {p.shape}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide model dimension {d}")

    @property
    def dim(self) -> int:
        return self.P_Q.shape[0]


@dataclass
class AttentionRecord:
    layer: int
    kind: str
    alpha: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in RECORD_KINDS:
            raise ValueError(f"unknown attention record kind {self.kind!r}")


def gaussian_window(n_query: int, n_key: int, sigma: float) -> np.ndarray:
    i = np.arange(n_query)[:, None]
    j = np.arange(n_key)[None, :]
    return np.exp(-((i - j) ** 2) / sigma ** 2)


def focused_scores(scores: Tensor, cfg: FocusConfig, mask: np.ndarray | None = None) -> Tensor:
    """Turn raw context self-attention scores into the focused distribution.

    Scores are multiplied by ``tau`` and soft-maxed per row; the result is
    multiplied entrywise by ``exp(-(i-j)^2 / sigma^2)`` and each row is
    renormalized to sum to one. With both flags off this is exactly
    :func:`tensor.softmax`.
    """
    if not cfg.tau > 0 or not cfg.sigma > 0:
        raise ConfigError(f"invalid focus config {cfg}")
    s = scores * cfg.tau if cfg.enable_temperature else scores
    alpha = T.softmax(s, mask)
    if not cfg.enable_window:
        return alpha
    weighted = alpha * gaussian_window(s.shape[-2], s.shape[-1], cfg.sigma)
    return weighted / weighted.sum(axis=-1, keepdims=True)


def _project(x: Tensor, p: Tensor | None) -> Tensor:
    return x if p is None else x @ p


def _attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: AttentionParams,
               mask: np.ndarray | None, focus: FocusConfig | None,
               scaled_dot: bool) -> tuple[Tensor, np.ndarray]:
    d = params.dim
    for name, x in (("Q", q_in), ("K", k_in), ("V", v_in)):
        if x.shape[-1] != d:
            raise DimensionError(f"{name} has feature size {x.shape[-1]}, expected {d}")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise DimensionError(f"keys {k_in.shape} and values {v_in.shape} differ in length")
    q = q_in @ params.P_Q
    k = k_in @ params.P_K
    v = _project(v_in, params.P_V)
    h = params.n_heads
    dh = d // h
    scale = 1.0 / math.sqrt(dh) if scaled_dot else None
    use_focus = focus is not None and focus.active
    outs, alpha_sum = [], None
    for head in range(h):
        if h == 1:
            qh, kh, vh = q, k, v
        else:
            cols = slice(head * dh, (head + 1) * dh)
            qh, kh, vh = q[..., cols], k[..., cols], v[..., cols]
        scores = qh @ T.transpose(kh)
        if scale is not None:
            scores = scores * scale
        alpha = focused_scores(scores, focus, mask) if use_focus else T.softmax(scores, mask)
        outs.append(alpha @ vh)
        alpha_sum = alpha.data if alpha_sum is None else alpha_sum + alpha.data
    out = outs[0] if h == 1 else T.concat(outs, axis=-1)
    out = _project(out, params.P_O)
    return out, alpha_sum / h


def attend(Q: Tensor, K: Tensor, V: Tensor, params: AttentionParams, *,
           mask: np.ndarray | None = None, focus: FocusConfig | None = None,
           scaled_dot: bool = False, layer: int = 0, kind: str = "cross-S") -> tuple[Tensor, AttentionRecord]:
    """Attend queries over key/value rows; returns the output and the weights used."""
    out, alpha = _attention(Q, K, V, params, mask, focus, scaled_dot)
    return out, AttentionRecord(layer, kind, alpha)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def attend_causal(X: Tensor, params: AttentionParams, *, key_mask: np.ndarray | None = None,
                  scaled_dot: bool = False, layer: int = 0) -> tuple[Tensor, AttentionRecord]:
    """Self-attention where position t sees only positions up to and including t."""
    mask = causal_mask(X.shape[-2])
    if key_mask is not None:
        mask = mask & key_mask
    out, alpha = _attention(X, X, X, params, mask, None, scaled_dot)
    return out, AttentionRecord(layer, "self-T", alpha)
