"""Corpus representation, vocabulary, padding/batching, serialization, and a
synthetic multimodal-dialogue generator.

The synthetic task is built so a correct response needs BOTH modalities and
the carried history:

  * the response copies a keyword that appears only in the OLDEST context
    utterance — utterances are encoded separately and connect only through
    the history hand-off, so the keyword must survive two hand-offs;
  * the response names the attributes of the QUERY's images, which exist
    only as codebook feature vectors, never as context text;
  * attributes are emitted in canonical (vocabulary id) order, not image
    order: attention over a set of image vectors carries no position signal,
    so image order is unlearnable by construction.

A rule-based oracle responder solves the task perfectly from the observable
sample alone, which pins the metric ceiling at BLEU-4 = 100.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, IMGCTX = 0, 1, 2, 3, 4
RESERVED_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>", "<imgctx>"]

SPEAKERS = ("user", "system")

CORPUS_VERSION = 1

KEYWORD_WORDS = [
    "shoes", "dress", "shirt", "jeans", "hat", "scarf", "bag", "watch",
    "jacket", "skirt", "belt", "boots", "sweater", "gloves", "tie", "socks",
    "coat", "suit", "vest", "shorts",
]
ATTRIBUTE_WORDS = [
    "red", "blue", "green", "black", "white", "golden", "silver", "floral",
    "striped", "leather", "denim", "woolen", "casual", "formal", "sporty",
    "vintage",
]
TEMPLATE_WORDS = [
    "i", "want", "show", "me", "please", "ok", "sure", "any", "suggestion",
    "idea", "for", "try", "style", "anything", "looking", "something", "nice",
    "need", "a", "new",
]


class Vocabulary:
    """Token/id bijection with fixed reserved ids."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with the reserved tokens")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}
        if len(self._ids) != len(self._tokens):
            raise ConfigError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self._tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise DataError(f"token id {idx} out of range [0, {len(self._tokens)})")
        return self._tokens[idx]

    def encode(self, words: list[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids, strip_special: bool = True) -> list[str]:
        special = {PAD, BOS, EOS}
        return [self.token(int(i)) for i in ids if not (strip_special and int(i) in special)]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"version": 1, "tokens": self._tokens}), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        if blob.get("version") != 1:
            raise DataError(f"unknown vocabulary version {blob.get('version')!r}")
        return cls(blob["tokens"])


@dataclass
class Utterance:
    speaker: str
    tokens: list[int]
    image_features: np.ndarray  # n_images x d_img

    def __post_init__(self):
        if self.speaker not in SPEAKERS:
            raise DataError(f"speaker must be one of {SPEAKERS}, got {self.speaker!r}")
        self.tokens = [int(t) for t in self.tokens]
        if not self.tokens:
            # An image-only turn still needs one query position for the
            # word-aligned streams.
            self.tokens = [IMGCTX]
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        if self.image_features.ndim != 2:
            raise DataError(f"image_features must be 2-d, got shape {self.image_features.shape}")
        if not np.isfinite(self.image_features).all():
            raise DataError("non-finite image feature")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        a, b = self.image_features, other.image_features
        # the column count of an empty feature block is a construction
        # artifact (serialization cannot preserve it), so "no images"
        # compares equal to "no images" regardless of declared width
        feats_equal = (a.shape[0] == 0 and b.shape[0] == 0) or (
            a.shape == b.shape and np.array_equal(a, b))
        return (self.speaker == other.speaker
                and self.tokens == other.tokens
                and feats_equal)


@dataclass
class DialogueSample:
    context: list[Utterance]
    query: Utterance
    response: list[int]
    conversation_start: bool = True

    def __post_init__(self):
        self.response = [int(t) for t in self.response]
        if not self.response or self.response[-1] != EOS:
            raise DataError("response must be nonempty and end with EOS")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DialogueSample)
            and self.context == other.context
            and self.query == other.query
            and self.response == other.response
            and self.conversation_start == other.conversation_start
        )

    def utterances(self) -> list[Utterance]:
        return [*self.context, self.query]


@dataclass
class SyntheticSpec:
    vocab_size: int = 200
    n_keywords: int = 20
    n_attributes: int = 16
    d_img: int = 64
    max_len: int = 16
    max_images: int = 4
    context_size: int = 2
    feature_noise: float = 0.05
    p_textonly_query: float = 0.1
    p_distractor_image: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_keywords > len(KEYWORD_WORDS) or self.n_attributes > len(ATTRIBUTE_WORDS):
            raise ConfigError(
                f"at most {len(KEYWORD_WORDS)} keywords / {len(ATTRIBUTE_WORDS)} attributes available"
            )
        floor = len(RESERVED_TOKENS) + self.n_keywords + self.n_attributes + len(TEMPLATE_WORDS)
        if self.vocab_size < floor:
            raise ConfigError(f"vocab_size {self.vocab_size} below minimum {floor}")
        if self.context_size < 1:
            raise ConfigError("context_size must be >= 1")
        if self.max_images < 1:
            raise ConfigError("max_images must be >= 1")


def build_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    tokens = list(RESERVED_TOKENS)
    tokens += KEYWORD_WORDS[: spec.n_keywords]
    tokens += ATTRIBUTE_WORDS[: spec.n_attributes]
    tokens += TEMPLATE_WORDS
    tokens += [f"w{i}" for i in range(spec.vocab_size - len(tokens))]
    return Vocabulary(tokens)


def keyword_ids(spec: SyntheticSpec) -> list[int]:
    base = len(RESERVED_TOKENS)
    return list(range(base, base + spec.n_keywords))


def attribute_ids(spec: SyntheticSpec) -> list[int]:
    base = len(RESERVED_TOKENS) + spec.n_keywords
    return list(range(base, base + spec.n_attributes))


def build_codebook(spec: SyntheticSpec) -> np.ndarray:
    """One fixed unit vector per attribute, n_attributes x d_img. Derived
    from the generator seed alone so it is recoverable without the corpus."""
    rng = np.random.default_rng([spec.seed, 0xC0DE])
    for _ in range(10):
        book = rng.standard_normal((spec.n_attributes, spec.d_img))
        book /= np.linalg.norm(book, axis=1, keepdims=True)
        dists = np.linalg.norm(book[:, None] - book[None, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        if dists.min() > 0.5:
            return book
    raise ConfigError(
        f"could not draw {spec.n_attributes} attribute vectors with pairwise distance > 0.5 in d_img={spec.d_img}"
    )


def nearest_attribute(feature: np.ndarray, codebook: np.ndarray) -> int:
    """Codebook row index closest to the feature vector."""
    return int(np.linalg.norm(codebook - feature, axis=1).argmin())


def _response_ids(kw: int, attrs: list[int], vocab: Vocabulary) -> list[int]:
    w = vocab.id
    body = [w("for"), kw, w("try")]
    body += sorted(attrs) if attrs else [w("anything")]
    return body + [w("style"), EOS]


_FIRST_PATTERNS = [
    ["i", "want", None],
    ["show", "me", None, "please"],
    ["looking", "for", "a", None],
    ["i", "need", "a", "new", None],
]
_MIDDLE_PATTERNS = [
    ["ok", "sure"],
    ["any", "idea"],
    ["nice", "suggestion"],
    ["something", "nice"],
]
_QUERY_PATTERNS = [
    ["any", "suggestion"],
    ["show", "me", "something"],
    ["ok", "try", "please"],
]


def _make_sample(rng: np.random.Generator, spec: SyntheticSpec, vocab: Vocabulary,
                 codebook: np.ndarray) -> DialogueSample:
    kws = keyword_ids(spec)
    attrs = attribute_ids(spec)
    kw = int(rng.choice(kws))

    def words(pattern, fill=None):
        return [fill if w is None else vocab.id(w) for w in pattern]

    def image(attr_idx: int) -> np.ndarray:
        return codebook[attr_idx] + rng.normal(0.0, spec.feature_noise, size=spec.d_img)

    first = Utterance("user", words(_FIRST_PATTERNS[rng.integers(len(_FIRST_PATTERNS))], kw),
                      np.zeros((0, spec.d_img)))

    # context length is itself sampled: short contexts keep the keyword one
    # hand-off from the query, long ones make the carry chain earn its keep
    middle = []
    for _ in range(int(rng.integers(spec.context_size))):
        feats = np.zeros((0, spec.d_img))
        if rng.uniform() < spec.p_distractor_image:
            feats = image(int(rng.integers(spec.n_attributes)))[None, :]
        middle.append(Utterance("system", words(_MIDDLE_PATTERNS[rng.integers(len(_MIDDLE_PATTERNS))]), feats))

    if rng.uniform() < spec.p_textonly_query:
        q_feats = np.zeros((0, spec.d_img))
        q_attrs: list[int] = []
    else:
        n_img = int(rng.choice(np.arange(1, spec.max_images + 1),
                               p=_image_count_probs(spec.max_images)))
        picks = rng.choice(spec.n_attributes, size=n_img, replace=False)
        q_feats = np.stack([image(int(a)) for a in picks])
        q_attrs = [attrs[int(a)] for a in picks]
    query = Utterance("user", words(_QUERY_PATTERNS[rng.integers(len(_QUERY_PATTERNS))]), q_feats)

    return DialogueSample(
        context=[first, *middle],
        query=query,
        response=_response_ids(kw, q_attrs, vocab),
        conversation_start=True,
    )


def _image_count_probs(max_images: int) -> np.ndarray:
    # Geometric-ish taper: singletons common, full houses rare.
    raw = 0.5 ** np.arange(max_images)
    return raw / raw.sum()


def generate_synthetic_corpus(spec: SyntheticSpec, n_samples: int) -> list[DialogueSample]:
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    vocab = build_vocabulary(spec)
    codebook = build_codebook(spec)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    return [_make_sample(rng, spec, vocab, codebook) for _ in range(n_samples)]


def oracle_response(sample: DialogueSample, spec: SyntheticSpec, vocab: Vocabulary,
                    codebook: np.ndarray) -> list[int]:
    """Rule-based responder working only from the observable sample: keyword
    from the oldest utterance's tokens, attributes by nearest-codebook lookup
    on the query's image vectors."""
    kws = set(keyword_ids(spec))
    oldest = sample.context[0] if sample.context else sample.query
    kw = next((t for t in oldest.tokens if t in kws), None)
    if kw is None:
        raise DataError("oracle: oldest utterance carries no keyword")
    attrs = attribute_ids(spec)
    q_attrs = [attrs[nearest_attribute(f, codebook)] for f in sample.query.image_features]
    return _response_ids(kw, q_attrs, vocab)


def split_corpus(samples: list[DialogueSample], seed: int) -> dict[str, list[DialogueSample]]:
    """Deterministic 80/10/10 split by hashing (seed, index); stable across
    runs and platforms, unlike the interpreter's salted hash()."""
    out: dict[str, list[DialogueSample]] = {"train": [], "valid": [], "test": []}
    for idx, sample in enumerate(samples):
        digest = hashlib.sha256(f"{seed}:{idx}".encode()).digest()
        bucket = int.from_bytes(digest[:8], "big") % 100
        key = "train" if bucket < 80 else "valid" if bucket < 90 else "test"
        out[key].append(sample)
    return out


# --------------------------------------------------------------------------
# Serialization

def _utt_to_json(u: Utterance) -> dict:
    return {
        "speaker": u.speaker,
        "tokens": u.tokens,
        "image_features": [list(map(float, row)) for row in u.image_features],
    }


def _utt_from_json(blob: dict, d_img_hint: int | None = None) -> Utterance:
    feats = blob["image_features"]
    arr = np.asarray(feats, dtype=np.float64) if feats else np.zeros((0, d_img_hint or 0))
    return Utterance(blob["speaker"], blob["tokens"], arr)


def save_corpus(path, samples: list[DialogueSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "version": CORPUS_VERSION,
                "context": [_utt_to_json(u) for u in s.context],
                "query": _utt_to_json(s.query),
                "response": s.response,
                "conversation_start": s.conversation_start,
            }) + "\n")


def load_corpus(path, d_img_hint: int | None = None) -> list[DialogueSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                blob = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: invalid record ({e})") from None
            if blob.get("version") != CORPUS_VERSION:
                raise DataError(f"{path}: line {lineno}: unknown corpus version {blob.get('version')!r}")
            try:
                samples.append(DialogueSample(
                    context=[_utt_from_json(u, d_img_hint) for u in blob["context"]],
                    query=_utt_from_json(blob["query"], d_img_hint),
                    response=blob["response"],
                    conversation_start=bool(blob["conversation_start"]),
                ))
            except (KeyError, DataError, TypeError) as e:
                raise DataError(f"{path}: line {lineno}: {e}") from None
    return samples


def write_dataset(dirpath, spec: SyntheticSpec, n_samples: int) -> dict[str, int]:
    """Generate, split, and lay out a dataset directory:
    train/valid/test.jsonl + vocab.json + meta.json. Returns split sizes."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary(spec)
    codebook = build_codebook(spec)
    splits = split_corpus(generate_synthetic_corpus(spec, n_samples), spec.seed)
    for name, part in splits.items():
        save_corpus(d / f"{name}.jsonl", part)
    vocab.save(d / "vocab.json")
    meta = {
        "version": 1,
        "spec": {k: getattr(spec, k) for k in SyntheticSpec.__dataclass_fields__},
        "codebook": {vocab.token(tid): list(map(float, vec))
                     for tid, vec in zip(attribute_ids(spec), codebook)},
    }
    (d / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
    return {k: len(v) for k, v in splits.items()}


def read_dataset(dirpath) -> tuple[dict[str, list[DialogueSample]], Vocabulary, SyntheticSpec, np.ndarray]:
    d = Path(dirpath)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    if meta.get("version") != 1:
        raise DataError(f"unknown dataset meta version {meta.get('version')!r}")
    spec = SyntheticSpec(**meta["spec"])
    vocab = Vocabulary.load(d / "vocab.json")
    codebook = build_codebook(spec)
    splits = {name: load_corpus(d / f"{name}.jsonl", d_img_hint=spec.d_img)
              for name in ("train", "valid", "test")}
    return splits, vocab, spec, codebook


# --------------------------------------------------------------------------
# Padding / batching

@dataclass
class PaddedBatch:
    """Dense arrays for a batch of samples; True mask entries mark real data.

    Utterance axis: position 0..C-1 are context slots (oldest first), the
    query is its own set of arrays. ``n_utts`` gives each sample's real
    context length.
    """

    ctx_tokens: np.ndarray        # B x C x Lc
    ctx_token_mask: np.ndarray
    ctx_images: np.ndarray        # B x C x N x d_img
    ctx_image_mask: np.ndarray
    ctx_speakers: np.ndarray      # B x C, index into SPEAKERS, -1 for absent
    n_utts: np.ndarray            # B
    qry_tokens: np.ndarray        # B x Lq
    qry_token_mask: np.ndarray
    qry_images: np.ndarray
    qry_image_mask: np.ndarray
    qry_speakers: np.ndarray      # B
    response: np.ndarray          # B x R
    response_mask: np.ndarray
    conversation_start: np.ndarray  # B


def _truncate(tokens: list[int], max_len: int, keep: str, what: str) -> list[int]:
    if len(tokens) <= max_len:
        return tokens
    logger.warning("truncating %s from %d to %d tokens (%s kept)", what, len(tokens), max_len, keep)
    if keep == "tail":
        return tokens[-max_len:]
    return tokens[: max_len - 1] + [EOS]


def batch_and_pad(samples: list[DialogueSample], max_len: int) -> PaddedBatch:
    if not samples:
        raise DataError("cannot batch zero samples")
    b = len(samples)
    c_max = max(len(s.context) for s in samples)
    c_max = max(c_max, 1)
    d_img = samples[0].query.image_features.shape[1]

    ctx_toks = [[_truncate(u.tokens, max_len, "tail", "context utterance") for u in s.context] for s in samples]
    resp = [_truncate(s.response, max_len, "head", "response") for s in samples]
    lc = max((len(t) for toks in ctx_toks for t in toks), default=1)
    lq = max(len(s.query.tokens) for s in samples)
    n_ctx = max((u.image_features.shape[0] for s in samples for u in s.context), default=0)
    n_ctx = max(n_ctx, 1)
    n_qry = max(max(s.query.image_features.shape[0] for s in samples), 1)
    lr = max(len(r) for r in resp)

    batch = PaddedBatch(
        ctx_tokens=np.full((b, c_max, lc), PAD, dtype=np.intp),
        ctx_token_mask=np.zeros((b, c_max, lc), dtype=bool),
        ctx_images=np.zeros((b, c_max, n_ctx, d_img)),
        ctx_image_mask=np.zeros((b, c_max, n_ctx), dtype=bool),
        ctx_speakers=np.full((b, c_max), -1, dtype=np.int8),
        n_utts=np.array([len(s.context) for s in samples], dtype=np.intp),
        qry_tokens=np.full((b, lq), PAD, dtype=np.intp),
        qry_token_mask=np.zeros((b, lq), dtype=bool),
        qry_images=np.zeros((b, n_qry, d_img)),
        qry_image_mask=np.zeros((b, n_qry), dtype=bool),
        qry_speakers=np.zeros(b, dtype=np.int8),
        response=np.full((b, lr), PAD, dtype=np.intp),
        response_mask=np.zeros((b, lr), dtype=bool),
        conversation_start=np.array([s.conversation_start for s in samples], dtype=bool),
    )
    for i, s in enumerate(samples):
        for c, u in enumerate(s.context):
            toks = ctx_toks[i][c]
            batch.ctx_tokens[i, c, : len(toks)] = toks
            batch.ctx_token_mask[i, c, : len(toks)] = True
            n = u.image_features.shape[0]
            batch.ctx_images[i, c, :n] = u.image_features
            batch.ctx_image_mask[i, c, :n] = True
            batch.ctx_speakers[i, c] = SPEAKERS.index(u.speaker)
        q = s.query
        batch.qry_tokens[i, : len(q.tokens)] = _truncate(q.tokens, max_len, "tail", "query")
        batch.qry_token_mask[i, : len(q.tokens)] = True
        nq = q.image_features.shape[0]
        batch.qry_images[i, :nq] = q.image_features
        batch.qry_image_mask[i, :nq] = True
        batch.qry_speakers[i] = SPEAKERS.index(q.speaker)
        batch.response[i, : len(resp[i])] = resp[i]
        batch.response_mask[i, : len(resp[i])] = True
    return batch


def unbatch(batch: PaddedBatch) -> list[DialogueSample]:
    out = []
    for i in range(batch.response.shape[0]):
        context = []
        for c in range(int(batch.n_utts[i])):
            tm = batch.ctx_token_mask[i, c]
            im = batch.ctx_image_mask[i, c]
            context.append(Utterance(
                SPEAKERS[batch.ctx_speakers[i, c]],
                [int(t) for t in batch.ctx_tokens[i, c][tm]],
                batch.ctx_images[i, c][im].copy(),
            ))
        qm = batch.qry_token_mask[i]
        qim = batch.qry_image_mask[i]
        query = Utterance(
            SPEAKERS[batch.qry_speakers[i]],
            [int(t) for t in batch.qry_tokens[i][qm]],
            batch.qry_images[i][qim].copy(),
        )
        out.append(DialogueSample(
            context=context,
            query=query,
            response=[int(t) for t in batch.response[i][batch.response_mask[i]]],
            conversation_start=bool(batch.conversation_start[i]),
        ))
    return out
