"""Response decoder: masked self-attention over the shared embedding table,
cross-attention into the encoder's context memory, position-wise FFN.

Residual blocks use the same normalize-then-add form as the encoder so the
whole network is uniform. Logits come from the transposed embedding table
unless an untied output projection is supplied.
"""

from __future__ import annotations

import math

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import BOS
from .errors import ContractError
from .layers import (
    FFNParams,
    LayerNormParams,
    MultiHeadAttentionParams,
    causal_mask,
    ffn,
    multi_head_attention,
    positional_encoding,
)
from .tensor import Tensor


@dataclass
class DecoderLayerParams:
    self_att: MultiHeadAttentionParams
    self_ln: LayerNormParams
    cross_att: MultiHeadAttentionParams
    cross_ln: LayerNormParams
    ffn: FFNParams
    ffn_ln: LayerNormParams

    @classmethod
    def init(cls, rng, d_model: int, n_heads: int, d_ff: int) -> "DecoderLayerParams":
        return cls(
            self_att=MultiHeadAttentionParams.init(rng, d_model, n_heads),
            self_ln=LayerNormParams.init(d_model),
            cross_att=MultiHeadAttentionParams.init(rng, d_model, n_heads),
            cross_ln=LayerNormParams.init(d_model),
            ffn=FFNParams.init(rng, d_model, d_ff),
            ffn_ln=LayerNormParams.init(d_model),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.self_att.named(f"{prefix}.self_att")
        yield from self.self_ln.named(f"{prefix}.self_ln")
        yield from self.cross_att.named(f"{prefix}.cross_att")
        yield from self.cross_ln.named(f"{prefix}.cross_ln")
        yield from self.ffn.named(f"{prefix}.ffn")
        yield from self.ffn_ln.named(f"{prefix}.ffn_ln")


@dataclass
class DecoderParams:
    layers: list[DecoderLayerParams]
    out_proj: Tensor | None = None  # d_model x vocab; None = tied to embeddings

    @classmethod
    def init(cls, rng, n_layers: int, d_model: int, n_heads: int, d_ff: int,
             vocab_size: int | None = None) -> "DecoderParams":
        """Pass ``vocab_size`` to untie the output projection from the
        embedding table; default keeps them tied."""
        from .layers import glorot_uniform

        out = None
        if vocab_size is not None:
            out = Tensor(glorot_uniform(rng, d_model, vocab_size), requires_grad=True)
        return cls(
            layers=[DecoderLayerParams.init(rng, d_model, n_heads, d_ff) for _ in range(n_layers)],
            out_proj=out,
        )

    def named(self, prefix: str = "dec") -> Iterator[tuple[str, Tensor]]:
        for idx, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{idx}")
        if self.out_proj is not None:
            yield f"{prefix}.out_proj", self.out_proj


def decode_logits(
    prefix_ids,
    memory: Tensor,
    embed_table: Tensor,
    params: DecoderParams,
    max_len: int,
    memory_mask: np.ndarray | None = None,
) -> Tensor:
    """Next-token logits for every position of a BOS-led prefix.

    The causal mask keeps row i blind to tokens > i, so logits row i is the
    distribution over token i+1 given tokens <= i and the memory. Returns
    prefix_len x vocab.
    """
    ids = np.asarray(prefix_ids, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractError(f"decoder prefix must be a nonempty id sequence, got shape {ids.shape}")
    if ids[0] != BOS:
        raise ContractError(f"decoder prefix must start with BOS={BOS}, got {ids[0]}")
    if ids.size > max_len:
        raise ContractError(f"prefix length {ids.size} exceeds max generation length {max_len}")
    if memory.shape[0] == 0:
        raise ContractError("decoder memory is empty")

    p = ids.size
    d_model = memory.shape[1]
    # same sqrt(d) embedding scale as the encoder side
    looked_up = T.scale(T.embedding(embed_table, ids), math.sqrt(d_model))
    x = T.add(looked_up, Tensor(positional_encoding(max_len, d_model).data[:p]))
    self_mask = causal_mask(p)
    cross = (
        None
        if memory_mask is None
        else np.broadcast_to(np.asarray(memory_mask, bool)[None, :], (p, memory.shape[0]))
    )
    for lp in params.layers:
        a = T.add(lp.self_ln(multi_head_attention(x, x, x, self_mask, lp.self_att)), x)
        b = T.add(lp.cross_ln(multi_head_attention(a, memory, memory, cross, lp.cross_att)), a)
        x = T.add(lp.ffn_ln(ffn(b, lp.ffn)), b)

    if params.out_proj is not None:
        return T.matmul(x, params.out_proj)
    return T.matmul(x, T.transpose(embed_table))
