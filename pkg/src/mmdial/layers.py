"""Reusable neural blocks: multi-head attention, position-wise feed-forward
network, and the fixed sinusoidal position table.

Parameter containers are plain dataclasses of tensors; ``named(prefix)``
yields (name, tensor) pairs so optimizers and checkpoints can walk any
parameter tree without knowing its structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

# Large negative bias for masked attention scores. Chosen instead of -inf so
# every forward value stays finite; exp() underflows it to an exact 0 weight.
MASK_BIAS = -1e9


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MultiHeadAttentionParams:
    """Bias-free Q/K/V/O projections, all square d_model x d_model."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int) -> "MultiHeadAttentionParams":
        if n_heads < 1 or d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        mk = lambda: Tensor(glorot_uniform(rng, d_model, d_model), requires_grad=True)
        return cls(w_q=mk(), w_k=mk(), w_v=mk(), w_o=mk(), n_heads=n_heads)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o


@dataclass
class FFNParams:
    """Two linear maps with a ReLU between them."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_ff: int) -> "FFNParams":
        if d_ff < 1:
            raise ConfigError(f"d_ff must be >= 1, got {d_ff}")
        return cls(
            w1=Tensor(glorot_uniform(rng, d_model, d_ff), requires_grad=True),
            b1=Tensor(np.zeros(d_ff), requires_grad=True),
            w2=Tensor(glorot_uniform(rng, d_ff, d_model), requires_grad=True),
            b2=Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNormParams":
        return cls(
            gain=Tensor(np.ones(d), requires_grad=True),
            bias=Tensor(np.zeros(d), requires_grad=True),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None,
    params: MultiHeadAttentionParams,
) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` subspaces.

    ``q``: Lq x d, ``k``/``v``: Lk x d. ``mask`` is an optional Lq x Lk
    boolean array, True where a query may attend; masked scores get
    ``MASK_BIAS`` before the softmax. Heads are evaluated together as one
    batched 3-d matmul. Returns Lq x d.
    """
    d = params.w_q.shape[0]
    lq, lk = q.shape[0], k.shape[0]
    if lk == 0:
        raise ContractError("attention over zero keys")
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d or v.shape[0] != lk:
        raise ContractError(
            f"attention operands q{q.shape} k{k.shape} v{v.shape} inconsistent with d_model {d}"
        )
    n_heads = params.n_heads
    d_head = d // n_heads

    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (lq, lk):
            raise ContractError(f"mask shape {mask.shape} != ({lq}, {lk})")
        if not mask.any(axis=1).all():
            raise ContractError("mask leaves a query row with no keys to attend")

    def split(x: Tensor) -> Tensor:
        # L x d -> n_heads x L x d_head
        return T.transpose(T.reshape(x, (x.shape[0], n_heads, d_head)), (1, 0, 2))

    qh = split(T.matmul(q, params.w_q))
    kh = split(T.matmul(k, params.w_k))
    vh = split(T.matmul(v, params.w_v))

    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(d_head))
    if mask is not None:
        scores = T.add(scores, Tensor(np.where(mask, 0.0, MASK_BIAS)))
    att = T.softmax(scores)

    heads = T.matmul(att, vh)  # n_heads x Lq x d_head
    merged = T.reshape(T.transpose(heads, (1, 0, 2)), (lq, d))
    return T.matmul(merged, params.w_o)


def ffn(x: Tensor, params: FFNParams) -> Tensor:
    """Position-wise ``relu(x W1 + b1) W2 + b2``."""
    hidden = T.relu(T.add(T.matmul(x, params.w1), params.b1))
    return T.add(T.matmul(hidden, params.w2), params.b2)


def positional_encoding(length: int, d_model: int) -> Tensor:
    """Fixed sinusoidal table: sin on even dims, cos on odd, wavelength base
    10000. Row 0 is [0, 1, 0, 1, ...]. Not a parameter."""
    if length < 1:
        raise ContractError(f"positional_encoding length must be >= 1, got {length}")
    pos = np.arange(length)[:, None]
    pair = np.arange(0, d_model, 2)[None, :]
    angles = pos / np.power(10000.0, pair / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return Tensor(table)


def causal_mask(n: int) -> np.ndarray:
    """n x n boolean, True at (i, j) iff j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))
