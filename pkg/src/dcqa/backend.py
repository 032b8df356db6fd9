"""Encoder-decoder backends.

A backend turns text into token batches, token batches into encoder hidden
states, and encoder-side states into clue hidden states by greedy decoding.
``ReferenceBackend`` is a one-layer transformer used for tests and the
synthetic task; ``PretrainedBackend`` wraps a local seq2seq checkpoint.
"""

from __future__ import annotations

import math
import re
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

PAD_ID, BOS_ID, UNK_ID = 0, 1, 2
_N_SPECIAL = 3
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class CapacityError(ValueError):
    """Sequence or clue length beyond what the backend supports."""


@dataclass(frozen=True)
class BackendConfig:
    name: str = "reference"
    hidden_dim: int = 16
    max_seq_len: int = 64
    clue_len: int = 10
    vocab_size: int = 64
    ffn_dim: int | None = None

    def __post_init__(self):
        for key in ("hidden_dim", "max_seq_len", "clue_len", "vocab_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ValueError("ffn_dim must be positive")

    @property
    def d(self) -> int:
        return self.hidden_dim


@dataclass
class TokenBatch:
    """Right-padded token ids with a 1/0 mask (1 = real token)."""

    token_ids: torch.Tensor
    attention_mask: torch.Tensor

    def __post_init__(self):
        if self.token_ids.shape != self.attention_mask.shape or self.token_ids.dim() != 2:
            raise ValueError("token_ids and attention_mask must be matching 2-D tensors")
        lengths = self.attention_mask.sum(-1, keepdim=True)
        prefix = torch.arange(self.token_ids.shape[1]).unsqueeze(0) < lengths
        if not torch.equal(prefix.to(self.attention_mask.dtype), self.attention_mask):
            raise ValueError("attention_mask must be a prefix of ones per row")

    @property
    def shape(self):
        return tuple(self.token_ids.shape)


@dataclass
class HiddenStates:
    values: torch.Tensor  # (batch, seq, d)
    mask: torch.Tensor  # (batch, seq), bool

    @property
    def shape(self):
        return tuple(self.values.shape)


def pad_rows(rows: Sequence[Sequence[int]], pad_to: int | None = None) -> TokenBatch:
    width = max(len(r) for r in rows) if pad_to is None else pad_to
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.long)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = torch.as_tensor(list(r), dtype=torch.long)
        mask[i, :len(r)] = 1
    return TokenBatch(ids, mask)


class WordTokenizer:
    """Lower-cased word/punctuation tokenizer.

    With a vocabulary, unknown words map to ``UNK_ID``; without one, words are
    hashed (crc32) into the non-special id range.
    """

    def __init__(self, vocab_size: int, vocab: Sequence[str] | None = None):
        if vocab_size <= _N_SPECIAL:
            raise ValueError(f"vocab_size must exceed {_N_SPECIAL}")
        self.vocab_size = vocab_size
        self.vocab = list(vocab) if vocab is not None else None
        if self.vocab is not None and len(self.vocab) + _N_SPECIAL > vocab_size:
            raise ValueError("vocabulary does not fit in vocab_size")
        self._index = {w: i + _N_SPECIAL for i, w in enumerate(self.vocab or [])}

    @classmethod
    def from_texts(cls, texts: Iterable[str], vocab_size: int) -> "WordTokenizer":
        counts = Counter(w for t in texts for w in cls.split(t))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(vocab_size, ranked[: vocab_size - _N_SPECIAL])

    @staticmethod
    def split(text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    def token_id(self, word: str) -> int:
        if self.vocab is not None:
            return self._index.get(word, UNK_ID)
        return _N_SPECIAL + zlib.crc32(word.encode("utf-8")) % (self.vocab_size - _N_SPECIAL)

    def encode(self, text: str) -> list[int]:
        return [self.token_id(w) for w in self.split(text)]

    def tokens(self, text: str) -> list[str]:
        return self.split(text)

    def state_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "vocab": self.vocab}

    @classmethod
    def from_state_dict(cls, state: dict) -> "WordTokenizer":
        return cls(state["vocab_size"], state["vocab"])


class Backend(nn.Module):
    """Common tokenize/encode/decode surface."""

    config: BackendConfig
    tokenizer: object

    def tokens(self, text: str) -> list[str]:
        return self.tokenizer.tokens(text)[: self.config.max_seq_len]

    def _token_ids(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def tokenize(self, text: str, max_len: int | None = None) -> TokenBatch:
        if not isinstance(text, str) or not text.strip():
            raise ValueError("cannot tokenize empty text")
        max_len = self.config.max_seq_len if max_len is None else max_len
        ids = self._token_ids(text)[:max_len]
        if not ids:
            raise ValueError(f"text {text!r} produced no tokens")
        return pad_rows([ids])

    def tokenize_batch(self, texts: Sequence[str], max_len: int | None = None) -> TokenBatch:
        rows = [self.tokenize(t, max_len).token_ids[0].tolist() for t in texts]
        return pad_rows(rows)

    def _check_len(self, length: int, what: str):
        if length > self.config.max_seq_len:
            raise CapacityError(f"{what} length {length} exceeds limit {self.config.max_seq_len}")

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode(self, batch: TokenBatch) -> HiddenStates:
        raise NotImplementedError

    def decode(self, encoder_states: HiddenStates, clue_len: int | None = None) -> HiddenStates:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Reference backend
# ---------------------------------------------------------------------------

def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(length, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * rate)
    table[:, 1::2] = torch.cos(pos * rate)[:, : d // 2]
    return table.to(dtype)


class _Attention(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)

    def forward(self, x, memory, key_mask, causal=False):
        logits = self.q(x) @ self.k(memory).transpose(-1, -2) / math.sqrt(x.shape[-1])
        allowed = key_mask[:, None, :].bool()
        if causal:
            n = x.shape[1]
            allowed = allowed & torch.ones(n, n, dtype=torch.bool, device=x.device).tril()
        logits = logits.masked_fill(~allowed, float("-inf"))
        return self.o(torch.softmax(logits, dim=-1) @ self.v(memory))


class _FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.inner = nn.Linear(d, hidden)
        self.outer = nn.Linear(hidden, d)

    def forward(self, x):
        return self.outer(torch.tanh(self.inner(x)))


class ReferenceBackend(Backend):
    """One encoder block and one autoregressive decoder block, single head.

    Weights are drawn from a private generator so construction never touches
    torch's global RNG. The output projection is tied to the embedding.
    """

    def __init__(self, config: BackendConfig, seed: int = 0, tokenizer: WordTokenizer | None = None):
        super().__init__()
        self.config = config
        self.seed = seed
        self.tokenizer = tokenizer or WordTokenizer(config.vocab_size)
        if self.tokenizer.vocab_size > config.vocab_size:
            raise ValueError("tokenizer vocabulary exceeds backend vocab_size")
        d, f = config.hidden_dim, config.ffn_dim or 2 * config.hidden_dim
        with torch.random.fork_rng(devices=[]):
            self._build(config.vocab_size, d, f)
        self._init_weights(seed)

    def _build(self, vocab_size: int, d: int, f: int):
        self.embedding = nn.Embedding(vocab_size, d)
        self.enc_attn = _Attention(d)
        self.enc_norm1 = nn.LayerNorm(d, eps=1e-6)
        self.enc_ffn = _FeedForward(d, f)
        self.enc_norm2 = nn.LayerNorm(d, eps=1e-6)

        self.dec_self = _Attention(d)
        self.dec_norm1 = nn.LayerNorm(d, eps=1e-6)
        self.dec_cross = _Attention(d)
        self.dec_norm2 = nn.LayerNorm(d, eps=1e-6)
        self.dec_ffn = _FeedForward(d, f)
        self.dec_norm3 = nn.LayerNorm(d, eps=1e-6)

    @torch.no_grad()
    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if "norm" in name:
                continue  # LayerNorm keeps gain 1 / bias 0
            if name == "embedding.weight":
                p.copy_(torch.randn(p.shape, generator=gen))
            else:
                bound = 1.0 / math.sqrt(p.shape[-1])
                p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        pos = sinusoidal_positions(ids.shape[1], self.config.hidden_dim, self.dtype)
        return self.embedding(ids) + pos

    def encode(self, batch: TokenBatch) -> HiddenStates:
        self._check_len(batch.token_ids.shape[1], "sequence")
        mask = batch.attention_mask.bool()
        h = self._embed(batch.token_ids)
        h = self.enc_norm1(h + self.enc_attn(h, h, mask))
        h = self.enc_norm2(h + self.enc_ffn(h))
        return HiddenStates(h * mask.unsqueeze(-1).to(h.dtype), mask)

    def _decoder(self, ids: torch.Tensor, memory: torch.Tensor, memory_mask: torch.Tensor) -> torch.Tensor:
        self_mask = torch.ones_like(ids, dtype=torch.bool)
        h = self._embed(ids)
        h = self.dec_norm1(h + self.dec_self(h, h, self_mask, causal=True))
        h = self.dec_norm2(h + self.dec_cross(h, memory, memory_mask))
        return self.dec_norm3(h + self.dec_ffn(h))

    def decode(self, encoder_states: HiddenStates, clue_len: int | None = None) -> HiddenStates:
        p = self.config.clue_len if clue_len is None else clue_len
        if p < 1:
            raise ValueError("clue_len must be >= 1")
        self._check_len(p, "clue")
        memory, mmask = encoder_states.values, encoder_states.mask.bool()
        ids = torch.full((memory.shape[0], 1), BOS_ID, dtype=torch.long)
        with torch.no_grad():
            for _ in range(p - 1):
                h = self._decoder(ids, memory, mmask)
                nxt = (h[:, -1] @ self.embedding.weight.T).argmax(-1, keepdim=True)
                ids = torch.cat([ids, nxt], dim=1)
        # one differentiable pass over the generated prefix; causal masking makes
        # position k identical to the state that produced token k
        h = self._decoder(ids, memory, mmask)
        return HiddenStates(h, torch.ones(ids.shape, dtype=torch.bool))

    def extra_state_dict(self) -> dict:
        return {"tokenizer": self.tokenizer.state_dict(), "seed": self.seed}


# ---------------------------------------------------------------------------
# Pretrained adapter
# ---------------------------------------------------------------------------

class _HFTokenizer:
    def __init__(self, tok):
        self.tok = tok
        self.vocab_size = len(tok)

    def encode(self, text: str) -> list[int]:
        return self.tok(text, add_special_tokens=True)["input_ids"]

    def tokens(self, text: str) -> list[str]:
        return self.tok.convert_ids_to_tokens(self.encode(text))


class PretrainedBackend(Backend):
    """Adapter over a transformers encoder-decoder (T5 family).

    ``model`` must expose ``get_encoder()``, ``decoder`` and ``lm_head``;
    ``tokenizer`` either a transformers tokenizer or anything with
    ``encode``/``tokens``.
    """

    def __init__(self, model, tokenizer, config: BackendConfig):
        super().__init__()
        if model.config.d_model != config.hidden_dim:
            raise ValueError(f"model d_model {model.config.d_model} != hidden_dim {config.hidden_dim}")
        self.model = model
        self.config = config
        self.tokenizer = tokenizer if hasattr(tokenizer, "tokens") else _HFTokenizer(tokenizer)
        start = getattr(model.config, "decoder_start_token_id", None)
        self.start_id = model.config.pad_token_id if start is None else start
        self.pad_id = model.config.pad_token_id or 0

    @classmethod
    def from_pretrained(cls, model_dir: str, clue_len: int = 10, max_seq_len: int = 64,
                        name: str | None = None) -> "PretrainedBackend":
        from transformers import AutoTokenizer, T5ForConditionalGeneration

        model = T5ForConditionalGeneration.from_pretrained(model_dir, local_files_only=True)
        tok = AutoTokenizer.from_pretrained(model_dir, local_files_only=True)
        config = BackendConfig(name=name or str(model_dir), hidden_dim=model.config.d_model,
                               max_seq_len=max_seq_len, clue_len=clue_len, vocab_size=len(tok))
        return cls(model, tok, config)

    def tokenize_batch(self, texts, max_len=None):
        batch = super().tokenize_batch(texts, max_len)
        batch.token_ids[batch.attention_mask == 0] = self.pad_id
        return batch

    def encode(self, batch: TokenBatch) -> HiddenStates:
        self._check_len(batch.token_ids.shape[1], "sequence")
        mask = batch.attention_mask.bool()
        out = self.model.get_encoder()(input_ids=batch.token_ids,
                                       attention_mask=batch.attention_mask).last_hidden_state
        return HiddenStates(out * mask.unsqueeze(-1).to(out.dtype), mask)

    def _decoder(self, ids, memory, mmask):
        return self.model.decoder(input_ids=ids, encoder_hidden_states=memory,
                                  encoder_attention_mask=mmask.long()).last_hidden_state

    def decode(self, encoder_states: HiddenStates, clue_len: int | None = None) -> HiddenStates:
        p = self.config.clue_len if clue_len is None else clue_len
        if p < 1:
            raise ValueError("clue_len must be >= 1")
        self._check_len(p, "clue")
        memory, mmask = encoder_states.values, encoder_states.mask.bool()
        ids = torch.full((memory.shape[0], 1), self.start_id, dtype=torch.long)
        scale = self.config.hidden_dim ** -0.5 if getattr(self.model.config, "tie_word_embeddings", False) else 1.0
        with torch.no_grad():
            for _ in range(p - 1):
                h = self._decoder(ids, memory, mmask)
                nxt = self.model.lm_head(h[:, -1] * scale).argmax(-1, keepdim=True)
                ids = torch.cat([ids, nxt], dim=1)
        h = self._decoder(ids, memory, mmask)
        return HiddenStates(h, torch.ones(ids.shape, dtype=torch.bool))


def make_backend(config: BackendConfig, seed: int = 0, *, tokenizer: WordTokenizer | None = None,
                 model_dir: str | None = None) -> Backend:
    if config.name == "reference":
        return ReferenceBackend(config, seed, tokenizer)
    if model_dir is None:
        raise ValueError(f"backend {config.name!r} needs a local model directory")
    return PretrainedBackend.from_pretrained(model_dir, config.clue_len, config.max_seq_len,
                                             name=config.name)

