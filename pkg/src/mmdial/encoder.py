"""Context encoder: per-utterance dual-stream encoding, modality-dropout
fusion, and a per-layer history updater that threads state across utterances.

Each utterance is encoded by L layers, every layer running three parallel
streams:

  text stream    T_l = LayerNorm(MHA(T_{l-1}, T_{l-1}, T_{l-1})) + T_{l-1}
  image stream   I_l = LayerNorm(MHA(T_{l-1}, I_{l-1}, I_{l-1})) + T_{l-1}
  fusion         M_l = T_l, I_l, or their mean, picked per layer by a
                 uniform draw against p_net (training) or always the mean
                 (inference)
  history        H_l = LayerNorm(FFN(Hhat)) + Hhat,
                 Hhat = LayerNorm(MHA(M_l, H_{l-1}, H_{l-1})) + M_l

The image stream queries with words, so from layer 1 on every stream is
word-aligned. The history output of an utterance's last layer seeds the next
utterance's layer-0 history; a trainable matrix seeds the first utterance of
a conversation. The final utterance's last history is the decoder memory.

Note the residual order: normalize the block output, then add the skip. That
is intentional and load-bearing for state hand-off tests; do not "fix" it to
the more common add-then-norm.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, ShapeMismatchError
from .layers import (
    FFNParams,
    LayerNormParams,
    MultiHeadAttentionParams,
    ffn,
    glorot_uniform,
    multi_head_attention,
    positional_encoding,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

BRANCH_TEXT = "text"
BRANCH_IMAGE = "image"
BRANCH_BOTH = "both"


@dataclass
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    p_net: float = 0.4
    h_len: int = 16          # rows of the trainable initial history
    d_img: int = 64          # incoming image feature width
    max_images: int = 4
    max_len: int = 16
    context_size: int = 2

    def __post_init__(self):
        if not 0.0 <= self.p_net <= 1.0:
            raise ConfigError(f"p_net must be in [0, 1], got {self.p_net}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.h_len < 1:
            raise ConfigError(f"h_len must be >= 1, got {self.h_len}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "d_ff", "d_img", "max_images", "max_len", "context_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class UtteranceInput:
    """One utterance as the encoder consumes it.

    ``token_mask`` / ``image_mask`` mark real positions (True) when the
    arrays carry padding; None means everything is real.
    """

    token_ids: np.ndarray
    image_features: np.ndarray
    token_mask: np.ndarray | None = None
    image_mask: np.ndarray | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.intp)
        self.image_features = np.asarray(self.image_features, dtype=T.default_dtype())
        if self.image_features.ndim != 2:
            raise ShapeMismatchError(
                f"image_features must be 2-d (n_images x d_img), got {self.image_features.shape}"
            )
        if self.token_mask is not None:
            self.token_mask = np.asarray(self.token_mask, dtype=bool)
        if self.image_mask is not None:
            self.image_mask = np.asarray(self.image_mask, dtype=bool)

    @property
    def n_real_images(self) -> int:
        if self.image_mask is not None:
            return int(self.image_mask.sum())
        return self.image_features.shape[0]


@dataclass
class HistoryParam:
    """Trainable seed for the history stream of a conversation's first
    utterance. Frozen (excluded from updates) in the fixed-history ablation."""

    h: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, h_len: int, d_model: int) -> "HistoryParam":
        return cls(h=Tensor(rng.normal(0.0, 0.02, size=(h_len, d_model)), requires_grad=True))

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.h", self.h


@dataclass
class EncoderLayerParams:
    text_att: MultiHeadAttentionParams
    text_ln: LayerNormParams
    img_att: MultiHeadAttentionParams
    img_ln: LayerNormParams
    hist_att: MultiHeadAttentionParams
    hist_ln_att: LayerNormParams
    hist_ffn: FFNParams
    hist_ln_ffn: LayerNormParams

    @classmethod
    def init(cls, rng, d_model: int, n_heads: int, d_ff: int) -> "EncoderLayerParams":
        return cls(
            text_att=MultiHeadAttentionParams.init(rng, d_model, n_heads),
            text_ln=LayerNormParams.init(d_model),
            img_att=MultiHeadAttentionParams.init(rng, d_model, n_heads),
            img_ln=LayerNormParams.init(d_model),
            hist_att=MultiHeadAttentionParams.init(rng, d_model, n_heads),
            hist_ln_att=LayerNormParams.init(d_model),
            hist_ffn=FFNParams.init(rng, d_model, d_ff),
            hist_ln_ffn=LayerNormParams.init(d_model),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.text_att.named(f"{prefix}.text_att")
        yield from self.text_ln.named(f"{prefix}.text_ln")
        yield from self.img_att.named(f"{prefix}.img_att")
        yield from self.img_ln.named(f"{prefix}.img_ln")
        yield from self.hist_att.named(f"{prefix}.hist_att")
        yield from self.hist_ln_att.named(f"{prefix}.hist_ln_att")
        yield from self.hist_ffn.named(f"{prefix}.hist_ffn")
        yield from self.hist_ln_ffn.named(f"{prefix}.hist_ln_ffn")


@dataclass
class EncoderParams:
    img_proj: Tensor             # d_img -> d_model linear map
    layers: list[EncoderLayerParams]
    history: HistoryParam

    @classmethod
    def init(cls, rng, config: EncoderConfig) -> "EncoderParams":
        return cls(
            img_proj=Tensor(glorot_uniform(rng, config.d_img, config.d_model), requires_grad=True),
            layers=[
                EncoderLayerParams.init(rng, config.d_model, config.n_heads, config.d_ff)
                for _ in range(config.n_layers)
            ],
            history=HistoryParam.init(rng, config.h_len, config.d_model),
        )

    def named(self, prefix: str = "enc") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.img_proj", self.img_proj
        for idx, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{idx}")
        yield from self.history.named(f"{prefix}.history")


@dataclass
class EncoderState:
    """Everything the encoder computed for one context, kept for inspection.

    Indexing: ``t[c][l]`` is the text features of utterance c after layer l
    (l=0 is the embedding), ``h[c][l]`` the history after layer l (l=0 is the
    incoming hand-off), ``m[c][l-1]`` the fused features of layer l.
    """

    t: list[list[Tensor]] = field(default_factory=list)
    i: list[list[Tensor]] = field(default_factory=list)
    m: list[list[Tensor]] = field(default_factory=list)
    h: list[list[Tensor]] = field(default_factory=list)
    us: Sequence[float] | None = None
    branches: list[str] = field(default_factory=list)
    fallbacks: int = 0
    memory: Tensor | None = None
    memory_mask: np.ndarray | None = None


def select_fusion_branch(p_net: float, u: float | None, training: bool) -> str:
    """Three-way split of the unit interval: the bottom p/2 keeps only
    text, the top p/2 only image, the middle averages. Inference skips
    the draw entirely and always averages, and so does p_net=0, where
    the side branches have zero width."""
    if not 0.0 <= p_net <= 1.0:
        raise ConfigError(f"p_net must be in [0, 1], got {p_net}")
    if not training or p_net == 0.0:
        return BRANCH_BOTH
    if u is None:
        raise ContractError("training-mode fusion needs a uniform variate")
    if not 0.0 <= u <= 1.0:
        raise ContractError(f"uniform variate outside [0, 1]: {u}")
    if u < p_net / 2.0:
        return BRANCH_TEXT
    if u > 1.0 - p_net / 2.0:
        return BRANCH_IMAGE
    return BRANCH_BOTH


def modality_dropout_fuse(
    t_l: Tensor, i_l: Tensor, p_net: float, u: float | None, training: bool
) -> Tensor:
    if t_l.shape != i_l.shape:
        raise ShapeMismatchError(f"fusion needs equal shapes, got {t_l.shape} and {i_l.shape}")
    branch = select_fusion_branch(p_net, u, training)
    if branch == BRANCH_TEXT:
        return t_l
    if branch == BRANCH_IMAGE:
        return i_l
    return T.scale(T.add(t_l, i_l), 0.5)


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _pe(length: int, d_model: int) -> np.ndarray:
    key = (length, d_model)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = positional_encoding(length, d_model).data
    return _PE_CACHE[key]


def embed_utterance(
    utt: UtteranceInput, embed_table: Tensor, params: EncoderParams, config: EncoderConfig
) -> tuple[Tensor, Tensor]:
    """Token ids -> embeddings + position table; image features -> a learned
    linear projection into the model width. Returns (T_0: m x d, I_0: n x d)."""
    m = utt.token_ids.shape[0]
    if m < 1:
        raise ContractError("utterance with zero token positions (image-only utterances must carry the image-context token)")
    if m > config.max_len:
        raise DataError(f"utterance length {m} exceeds max_len {config.max_len}")
    n = utt.image_features.shape[0]
    if n > config.max_images:
        raise DataError(f"{n} images exceed max_images {config.max_images}")
    if utt.image_features.shape[1:] != (config.d_img,) and n > 0:
        raise ShapeMismatchError(
            f"image features must be {config.d_img}-dimensional, got {utt.image_features.shape}"
        )

    # embeddings are scaled up to keep token content comparable to the
    # positional signal, matching the convention the layer stack assumes
    looked_up = T.scale(T.embedding(embed_table, utt.token_ids), math.sqrt(config.d_model))
    t0 = T.add(looked_up, Tensor(_pe(config.max_len, config.d_model)[:m]))
    if n == 0:
        i0 = Tensor(np.zeros((0, config.d_model)))
    else:
        i0 = T.matmul(Tensor(utt.image_features), params.img_proj)
    return t0, i0


def _self_mask(token_mask: np.ndarray | None, m: int) -> np.ndarray | None:
    if token_mask is None:
        return None
    return np.broadcast_to(token_mask[None, :], (m, m))


def _cross_mask(key_mask: np.ndarray | None, m: int, k: int) -> np.ndarray | None:
    if key_mask is None:
        return None
    return np.broadcast_to(key_mask[None, :], (m, k))


def text_stream_layer(
    t_prev: Tensor, params: EncoderLayerParams, mask: np.ndarray | None = None
) -> Tensor:
    att = multi_head_attention(t_prev, t_prev, t_prev, mask, params.text_att)
    return T.add(params.text_ln(att), t_prev)


def image_stream_layer(
    t_prev: Tensor,
    i_prev: Tensor,
    params: EncoderLayerParams,
    mask: np.ndarray | None = None,
    fallback: Tensor | None = None,
) -> Tensor:
    """Words query the image features. With no images to attend (zero rows,
    or a mask hiding them all) the stream degenerates to ``fallback``, which
    callers pass as the current text-stream output."""
    k = i_prev.shape[0]
    no_keys = k == 0 or (mask is not None and not np.asarray(mask).any())
    if no_keys:
        if fallback is None:
            raise ContractError("image stream with zero images needs a text-stream fallback")
        return fallback
    att = multi_head_attention(t_prev, i_prev, i_prev, mask, params.img_att)
    return T.add(params.img_ln(att), t_prev)


def history_update(
    m_l: Tensor, h_prev: Tensor, params: EncoderLayerParams, mask: np.ndarray | None = None
) -> Tensor:
    """Fused features query the carried history, then a feed-forward block
    refines the result. Output is aligned to the current words (m x d)."""
    att = multi_head_attention(m_l, h_prev, h_prev, mask, params.hist_att)
    h_hat = T.add(params.hist_ln_att(att), m_l)
    return T.add(params.hist_ln_ffn(ffn(h_hat, params.hist_ffn)), h_hat)


def encode_context(
    utts: Sequence[UtteranceInput],
    embed_table: Tensor,
    params: EncoderParams,
    config: EncoderConfig,
    training: bool = False,
    us: Sequence[float] | None = None,
    conversation_start: bool = True,
) -> EncoderState:
    """Run the full encoder over ``utts`` (oldest first, query last).

    ``us`` supplies one uniform variate per layer for training-mode fusion;
    inference ignores it and never consumes randomness. The returned state's
    ``memory`` (last utterance, last layer history) is the decoder's input.
    """
    if not 1 <= len(utts) <= config.context_size + 1:
        raise ContractError(
            f"encoder takes 1..{config.context_size + 1} utterances, got {len(utts)}"
        )
    p_net = config.p_net if training else 0.0
    if training and p_net > 0.0:
        if us is None or len(us) != config.n_layers:
            raise ContractError(f"training with p_net={p_net} needs {config.n_layers} uniform variates")

    state = EncoderState(us=list(us) if us is not None else None)
    if conversation_start:
        h_prev = params.history.h
    else:
        # Mid-conversation slice with the true predecessor state unavailable;
        # neutral zeros keep the trainable seed out of the gradient path.
        h_prev = Tensor(np.zeros((config.h_len, config.d_model)))
    h_mask: np.ndarray | None = None

    for utt in utts:
        t0, i0 = embed_utterance(utt, embed_table, params, config)
        m = t0.shape[0]
        self_mask = _self_mask(utt.token_mask, m)
        img_mask = _cross_mask(utt.image_mask, m, i0.shape[0])

        # A text-only utterance has nothing for the image stream to attend at
        # any layer; it mirrors the text stream wholesale and fusion becomes
        # a no-op average.
        no_images = i0.shape[0] == 0 or (utt.image_mask is not None and not utt.image_mask.any())
        if no_images:
            state.fallbacks += 1
            logger.debug("image stream fallback: utterance has no images, mirroring text features")

        t_list, i_list, m_list = [t0], [i0], []
        h_list = [h_prev]
        for l in range(1, config.n_layers + 1):
            lp = params.layers[l - 1]
            t_prev, i_prev = t_list[-1], i_list[-1]

            t_l = text_stream_layer(t_prev, lp, self_mask)
            if no_images:
                i_l = image_stream_layer(t_prev, i0, lp, img_mask, fallback=t_l)
            else:
                # After layer 1 the image stream is word-aligned, so its keys
                # are masked like text keys from layer 2 on.
                key_mask = img_mask if l == 1 else self_mask
                i_l = image_stream_layer(t_prev, i_prev, lp, key_mask)

            u = us[l - 1] if (training and us is not None) else None
            branch = select_fusion_branch(p_net, u, training)
            state.branches.append(branch)
            m_l = modality_dropout_fuse(t_l, i_l, p_net, u, training)

            # Layer 1 attends the handed-off history (aligned to the previous
            # utterance's words); later layers attend this utterance's own
            # word-aligned history.
            hk_mask = h_mask if l == 1 else utt.token_mask
            h_l = history_update(m_l, h_list[-1], lp, _cross_mask(hk_mask, m, h_list[-1].shape[0]))

            t_list.append(t_l)
            i_list.append(i_l)
            m_list.append(m_l)
            h_list.append(h_l)

        state.t.append(t_list)
        state.i.append(i_list)
        state.m.append(m_list)
        state.h.append(h_list)
        h_prev = h_list[-1]      # hand-off: next utterance's layer-0 history
        h_mask = utt.token_mask  # carried rows are aligned to this utterance's words

    state.memory = h_prev
    state.memory_mask = h_mask
    return state
