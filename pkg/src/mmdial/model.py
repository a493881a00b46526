"""The full response-generation model: shared embedding table, context
encoder, response decoder, sequence scoring, and greedy generation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, DialogueSample, Utterance
from .decoder import DecoderParams, decode_logits
from .encoder import EncoderConfig, EncoderParams, EncoderState, UtteranceInput, encode_context
from .errors import ConfigError, ContractError
from .layers import glorot_uniform
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int = 200
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    p_net: float = 0.4
    h_len: int = 16
    d_img: int = 64
    max_images: int = 4
    max_len: int = 16
    context_size: int = 2
    tie_output: bool = True

    def __post_init__(self):
        if self.vocab_size <= EOS:
            raise ConfigError(f"vocab_size must exceed the reserved ids, got {self.vocab_size}")
        self.encoder_config()  # validates the shared fields

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
            d_ff=self.d_ff, p_net=self.p_net, h_len=self.h_len, d_img=self.d_img,
            max_images=self.max_images, max_len=self.max_len, context_size=self.context_size,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    embed: Tensor  # vocab x d_model, shared by encoder input and decoder in/out
    enc: EncoderParams
    dec: DecoderParams

    @classmethod
    def init(cls, rng: np.random.Generator, config: ModelConfig) -> "ModelParams":
        return cls(
            embed=Tensor(glorot_uniform(rng, config.vocab_size, config.d_model), requires_grad=True),
            enc=EncoderParams.init(rng, config.encoder_config()),
            dec=DecoderParams.init(
                rng, config.n_layers, config.d_model, config.n_heads, config.d_ff,
                vocab_size=None if config.tie_output else config.vocab_size,
            ),
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        yield from self.enc.named("enc")
        yield from self.dec.named("dec")


@dataclass
class Model:
    config: ModelConfig
    params: ModelParams

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config=config, params=ModelParams.init(np.random.default_rng(seed), config))

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self.params.named())


def to_encoder_input(utt: Utterance) -> UtteranceInput:
    return UtteranceInput(token_ids=np.asarray(utt.tokens, dtype=np.intp),
                          image_features=utt.image_features)


def encode_sample_context(model: Model, utterances: Sequence[Utterance],
                          conversation_start: bool = True, training: bool = False,
                          us: Sequence[float] | None = None) -> EncoderState:
    inputs = [to_encoder_input(u) for u in utterances]
    return encode_context(inputs, model.params.embed, model.params.enc,
                          model.config.encoder_config(), training=training, us=us,
                          conversation_start=conversation_start)


def response_token_log_probs(model: Model, sample: DialogueSample,
                             training: bool = False,
                             us: Sequence[float] | None = None) -> Tensor:
    """Log-probability of each reference response token under teacher
    forcing. Returns a length-m_r vector; position i scores response[i]."""
    if not sample.response or sample.response[-1] != EOS:
        raise ContractError("reference response must be nonempty and end with EOS")
    state = encode_sample_context(model, sample.utterances(),
                                  conversation_start=sample.conversation_start,
                                  training=training, us=us)
    prefix = [BOS, *sample.response[:-1]]
    logits = decode_logits(prefix, state.memory, model.params.embed, model.params.dec,
                           model.config.max_len, memory_mask=state.memory_mask)
    return T.gather_log_softmax(logits, sample.response)


def log_likelihood(model: Model, sample: DialogueSample) -> Tensor:
    """Scalar sum of response-token log-probabilities (inference mode)."""
    return T.tensor_sum(response_token_log_probs(model, sample))


def batch_loss(model: Model, samples: Sequence[DialogueSample],
               training: bool = False, us: Sequence[float] | None = None,
               per_sample_us: Sequence[Sequence[float]] | None = None) -> tuple[Tensor, int]:
    """Mean negative log-likelihood per token over the batch. Returns the
    scalar loss and the token count it averages over. ``per_sample_us``
    overrides ``us`` with one variate list per sample."""
    if not samples:
        raise ContractError("batch_loss over zero samples")
    if per_sample_us is not None and len(per_sample_us) != len(samples):
        raise ContractError("per_sample_us length must match the batch")
    total = None
    n_tokens = 0
    for i, sample in enumerate(samples):
        sample_us = per_sample_us[i] if per_sample_us is not None else us
        lp = response_token_log_probs(model, sample, training=training, us=sample_us)
        n_tokens += lp.shape[0]
        total = lp.sum() if total is None else T.add(total, lp.sum())
    return T.scale(total, -1.0 / n_tokens), n_tokens


def generate_greedy(model: Model, utterances: Sequence[Utterance],
                    max_new_tokens: int | None = None,
                    conversation_start: bool = True) -> list[int]:
    """Deterministic argmax decoding from BOS; stops after EOS or the token
    budget. Returns generated ids including the terminal EOS when reached.
    Inference mode throughout: no randomness is consumed."""
    if max_new_tokens is None:
        max_new_tokens = model.config.max_len - 1
    if max_new_tokens < 1:
        raise ContractError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
    state = encode_sample_context(model, utterances, conversation_start=conversation_start)
    prefix = [BOS]
    out: list[int] = []
    for _ in range(max_new_tokens):
        logits = decode_logits(prefix, state.memory, model.params.embed, model.params.dec,
                               model.config.max_len, memory_mask=state.memory_mask)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        if nxt == EOS or len(prefix) + 1 > model.config.max_len:
            break
        prefix.append(nxt)
    return out
