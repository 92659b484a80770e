"""Miniature transformer span model over a byte-level vocabulary.

Input layout mirrors span-extraction QA: a sequence-start marker, the question
bytes, a separator, the context bytes, a trailing separator. Marker/separator
positions belong to neither token class. The encoder is a small pre-norm
transformer; the span head is a per-token linear projection producing start
and end scores.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

BYTE_VOCAB = 256
SEQ_START_ID = 256
SEP_ID = 257
DEFAULT_VOCAB = 258

CHECKPOINT_MAGIC = b"QADAPT\x01"

SOURCE = "source"
TARGET_SYNTHETIC = "target_synthetic"
DOMAIN_TAGS = (SOURCE, TARGET_SYNTHETIC)


class TokenizationError(ValueError):
    """Sample cannot be represented under the model's sequence constraints."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the runtime config."""


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = DEFAULT_VOCAB
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: int = 256
    max_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "num_layers", "num_heads", "ff_dim", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )


@dataclass
class TokenizedSample:
    """Token ids with class masks and a gold answer span (inclusive indices)."""

    token_ids: np.ndarray
    question_mask: np.ndarray
    context_mask: np.ndarray
    answer_mask: np.ndarray
    answer_span: tuple[int, int]
    domain_tag: str
    special_positions: tuple[int, ...]
    sample_id: str = ""

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        length = self.token_ids.shape[0]
        for name in ("question_mask", "context_mask", "answer_mask"):
            mask = np.asarray(getattr(self, name), dtype=bool)
            if mask.shape != (length,):
                raise ValueError(f"{name} length {mask.shape} != sequence length {length}")
            setattr(self, name, mask)
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain_tag {self.domain_tag!r}")
        special = np.zeros(length, dtype=bool)
        for p in self.special_positions:
            if not 0 <= p < length:
                raise ValueError(f"special position {p} outside sequence of length {length}")
            special[p] = True
        nonspecial = ~special
        if np.any(self.question_mask & self.context_mask):
            raise ValueError("question and context masks overlap")
        if np.any((self.question_mask | self.context_mask) & special):
            raise ValueError("class masks cover special positions")
        if not np.array_equal(self.question_mask | self.context_mask, nonspecial):
            raise ValueError("class masks do not cover all non-special positions")
        start, end = self.answer_span
        if not (0 <= start <= end < length):
            raise ValueError(f"answer span {self.answer_span} outside sequence of length {length}")
        expected = np.zeros(length, dtype=bool)
        expected[start:end + 1] = True
        if not np.array_equal(self.answer_mask, expected):
            raise ValueError("answer_mask does not match answer_span")
        if not np.all(self.context_mask[self.answer_mask]):
            raise ValueError("answer span leaves the context region")

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def context_token_start(self) -> int:
        return int(np.flatnonzero(self.context_mask)[0])


@dataclass
class SpanLogits:
    start_scores: Tensor
    end_scores: Tensor


def tokenize_sample(
    question: str,
    context: str,
    answer_start: int,
    answer_text: str,
    domain_tag: str,
    max_len: int = 128,
    sample_id: str = "",
) -> TokenizedSample:
    """Byte-tokenize a QA triple; answer offsets are character positions."""
    if context[answer_start:answer_start + len(answer_text)] != answer_text:
        raise TokenizationError(
            f"answer {answer_text!r} not found at offset {answer_start} of context"
        )
    if len(answer_text) == 0:
        raise TokenizationError("empty answer text")
    q_bytes = question.encode("utf-8")
    c_bytes = context.encode("utf-8")
    length = 3 + len(q_bytes) + len(c_bytes)
    if length > max_len:
        raise TokenizationError(f"sequence length {length} exceeds max length {max_len}")

    ids = [SEQ_START_ID] + list(q_bytes) + [SEP_ID] + list(c_bytes) + [SEP_ID]
    ctx_start = 2 + len(q_bytes)
    question_mask = np.zeros(length, dtype=bool)
    question_mask[1:1 + len(q_bytes)] = True
    context_mask = np.zeros(length, dtype=bool)
    context_mask[ctx_start:ctx_start + len(c_bytes)] = True

    ans_byte_start = len(context[:answer_start].encode("utf-8"))
    ans_byte_len = len(answer_text.encode("utf-8"))
    span = (ctx_start + ans_byte_start, ctx_start + ans_byte_start + ans_byte_len - 1)
    answer_mask = np.zeros(length, dtype=bool)
    answer_mask[span[0]:span[1] + 1] = True

    return TokenizedSample(
        token_ids=np.array(ids, dtype=np.int64),
        question_mask=question_mask,
        context_mask=context_mask,
        answer_mask=answer_mask,
        answer_span=span,
        domain_tag=domain_tag,
        special_positions=(0, 1 + len(q_bytes), length - 1),
        sample_id=sample_id,
    )


def embedding_noise(shape: tuple[int, ...], sigma: float, seed: int) -> np.ndarray:
    """Zero-mean Gaussian perturbation with standard deviation sigma."""
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return sigma * rng.standard_normal(shape)


def _seeded_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


class SpanModel:
    """Byte-level transformer encoder plus answer-span classification head."""

    def __init__(self, config: EncoderConfig, _params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = _params if _params is not None else self._init_params(config)

    @staticmethod
    def _init_params(cfg: EncoderConfig) -> dict[str, Tensor]:
        rng = _seeded_rng(cfg.seed, 0xC0FFEE)

        def uniform(shape, scale):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)

        def glorot(fan_in, fan_out):
            return uniform((fan_in, fan_out), np.sqrt(6.0 / (fan_in + fan_out)))

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape), requires_grad=True)

        h, f = cfg.hidden_dim, cfg.ff_dim
        p: dict[str, Tensor] = {
            "tok_emb": uniform((cfg.vocab_size, h), 0.1),
            "pos_emb": uniform((cfg.max_len, h), 0.1),
            "final_ln.gain": ones(h),
            "final_ln.bias": zeros(h),
            "span.w": glorot(h, 2),
            "span.b": zeros(2),
        }
        for i in range(cfg.num_layers):
            pre = f"layer{i}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + name] = glorot(h, h)
            for name in ("bq", "bk", "bv", "bo"):
                p[pre + "attn." + name] = zeros(h)
            p[pre + "ln1.gain"] = ones(h)
            p[pre + "ln1.bias"] = zeros(h)
            p[pre + "ln2.gain"] = ones(h)
            p[pre + "ln2.bias"] = zeros(h)
            p[pre + "ff.w1"] = glorot(h, f)
            p[pre + "ff.b1"] = zeros(f)
            p[pre + "ff.w2"] = glorot(f, h)
            p[pre + "ff.b2"] = zeros(h)
        return p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x) * self.params[prefix + ".gain"] + self.params[prefix + ".bias"]

    def _attention(self, x: Tensor, layer: int) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layer{layer}.attn."
        q = T.matmul(x, p[pre + "wq"]) + p[pre + "bq"]
        k = T.matmul(x, p[pre + "wk"]) + p[pre + "bk"]
        v = T.matmul(x, p[pre + "wv"]) + p[pre + "bv"]
        dh = cfg.hidden_dim // cfg.num_heads
        heads = []
        for hidx in range(cfg.num_heads):
            lo, hi = hidx * dh, (hidx + 1) * dh
            qh, kh, vh = (T.slice_cols(t, lo, hi) for t in (q, k, v))
            scores = T.matmul(qh, T.transpose(kh)) * (1.0 / np.sqrt(dh))
            heads.append(T.matmul(T.softmax(scores), vh))
        return T.matmul(T.concat_cols(heads), p[pre + "wo"]) + p[pre + "bo"]

    def _ffn(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"layer{layer}.ff."
        return T.matmul(T.relu(T.matmul(x, p[pre + "w1"]) + p[pre + "b1"]), p[pre + "w2"]) + p[pre + "b2"]

    def encode(self, sample: TokenizedSample, noise_sigma: float = 0.0, noise_seed: int = 0) -> Tensor:
        """Per-token features [L x H]; optional Gaussian noise is applied to the
        token embeddings before the positional addition."""
        length = len(sample)
        if length > self.config.max_len:
            raise TokenizationError(
                f"sequence length {length} exceeds max length {self.config.max_len}"
            )
        if np.any(sample.token_ids >= self.config.vocab_size):
            raise TokenizationError("token id outside the configured vocabulary")
        x = T.embedding(self.params["tok_emb"], sample.token_ids)
        if noise_sigma > 0.0:
            x = x + T.constant(embedding_noise((length, self.config.hidden_dim), noise_sigma, noise_seed))
        x = x + T.embedding(self.params["pos_emb"], np.arange(length))
        for i in range(self.config.num_layers):
            x = x + self._attention(self._ln(x, f"layer{i}.ln1"), i)
            x = x + self._ffn(self._ln(x, f"layer{i}.ln2"), i)
        return self._ln(x, "final_ln")

    def span_logits(self, features: Tensor) -> SpanLogits:
        scores = T.matmul(features, self.params["span.w"]) + self.params["span.b"]
        length = features.shape[0]
        return SpanLogits(
            start_scores=T.reshape(T.slice_cols(scores, 0, 1), (length,)),
            end_scores=T.reshape(T.slice_cols(scores, 1, 2), (length,)),
        )

    def forward(self, sample: TokenizedSample, noise_sigma: float = 0.0, noise_seed: int = 0):
        features = self.encode(sample, noise_sigma, noise_seed)
        return features, self.span_logits(features)

    # -- checkpoint container --------------------------------------------------

    def save(self, path) -> None:
        header = json.dumps(asdict(self.config), sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(struct.pack("<I", len(self.params)))
            for name in sorted(self.params):
                data = self.params[name].data
                nb = name.encode("utf-8")
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<B", data.ndim))
                for d in data.shape:
                    fh.write(struct.pack("<I", d))
                fh.write(data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, expected_config: EncoderConfig | None = None) -> "SpanModel":
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
            (hlen,) = struct.unpack("<I", fh.read(4))
            config = EncoderConfig(**json.loads(fh.read(hlen).decode("utf-8")))
            if expected_config is not None and config != expected_config:
                raise CheckpointError(
                    f"checkpoint config {config} does not match runtime config {expected_config}"
                )
            (n_params,) = struct.unpack("<I", fh.read(4))
            params: dict[str, Tensor] = {}
            for _ in range(n_params):
                (nlen,) = struct.unpack("<H", fh.read(2))
                name = fh.read(nlen).decode("utf-8")
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(8 * count)
                if len(buf) != 8 * count:
                    raise CheckpointError(f"{path}: truncated parameter {name}")
                params[name] = Tensor(
                    np.frombuffer(buf, dtype="<f8").reshape(shape).copy(), requires_grad=True
                )
        model = cls(config, _params=params)
        expected_names = set(cls._init_params(config))
        if set(params) != expected_names:
            raise CheckpointError(f"{path}: parameter names do not match the architecture")
        return model


def predict_span(logits: SpanLogits, context_mask, max_answer_len: int) -> tuple[int, int]:
    """Best (start, end) with start <= end <= start + max_answer_len - 1, both
    inside the context region; ties prefer the smallest start, then end."""
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be >= 1")
    mask = np.asarray(context_mask, dtype=bool)
    positions = np.flatnonzero(mask)
    if positions.size == 0:
        raise ValueError("empty context mask")
    start_scores = logits.start_scores.data
    end_scores = logits.end_scores.data
    best = None
    best_score = -np.inf
    for s in positions:
        for e in range(s, min(s + max_answer_len, len(mask))):
            if not mask[e]:
                continue
            score = start_scores[s] + end_scores[e]
            if score > best_score:
                best_score = score
                best = (int(s), int(e))
    assert best is not None
    return best
