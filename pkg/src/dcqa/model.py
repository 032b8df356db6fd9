"""The full choice-differentiating scorer and its checkpoint format."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .attention import (
    ChoiceAttention,
    CrossAttention,
    CrossAttnOutput,
    commonality_mask,
    max_pool_tokens,
    refine,
)
from .backend import Backend, BackendConfig, HiddenStates, ReferenceBackend, WordTokenizer, make_backend
from .data import MCQExample

CHECKPOINT_FORMAT = "dcqa-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class Ablation(str, Enum):
    NO_COME = "NO_COME"  # no commonality, no subtraction
    NO_CR = "NO_CR"  # commonality computed, subtraction skipped
    NO_DE = "NO_DE"  # no clue decoding
    NO_CE = "NO_CE"  # no choice enhancement
    NO_C1 = "NO_C1"  # question x commonality attention
    NO_C2 = "NO_C2"  # question x choice attention
    NO_C3 = "NO_C3"  # choice(+clue) x refined question attention


def parse_ablation(flags) -> frozenset[Ablation]:
    if flags is None:
        return frozenset()
    if isinstance(flags, (str, Ablation)):
        flags = [flags]
    out = set()
    for f in flags:
        try:
            out.add(f if isinstance(f, Ablation) else Ablation(str(f).strip().upper()))
        except ValueError:
            raise ConfigError(f"unknown ablation flag {f!r}") from None
    return frozenset(out)


def check_ablation(flags: frozenset[Ablation]) -> None:
    if (Ablation.NO_COME in flags) != (Ablation.NO_C1 in flags):
        raise ConfigError("inconsistent ablation flags: NO_COME and NO_C1 must be set together "
                          "(C1 consumes the commonality matrix)")
    if Ablation.NO_C3 in flags and Ablation.NO_CE not in flags:
        raise ConfigError("inconsistent ablation flags: NO_C3 requires NO_CE "
                          "(C3 is the choice-enhancement attention)")


@dataclass(frozen=True)
class DCQAConfig:
    n_choices: int
    d: int
    clue_len: int = 10
    mlp_hidden: int | None = None
    ablation: frozenset = field(default_factory=frozenset)
    share_choice_weights: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ablation", parse_ablation(self.ablation))
        if self.n_choices < 2:
            raise ConfigError("n_choices must be >= 2")
        if self.d < 1 or self.clue_len < 1:
            raise ConfigError("d and clue_len must be positive")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden must be positive")
        check_ablation(self.ablation)

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.d

    def has(self, flag: Ablation) -> bool:
        return flag in self.ablation

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablation"] = sorted(f.value for f in self.ablation)
        return out


@dataclass
class EncodedContexts:
    Q: torch.Tensor  # (B, l, d)
    Q_mask: torch.Tensor  # (B, l)
    A: torch.Tensor  # (B, n, m, d)
    A_mask: torch.Tensor  # (B, n, m)


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, n)
    probs: torch.Tensor  # (B, n)
    intermediates: dict = field(default_factory=dict)


def score_head(q: torch.Tensor, a: torch.Tensor, W1, b1, W2, b2) -> torch.Tensor:
    """Scalar logit from [q ; a] through one tanh hidden layer."""
    if q.shape[-1] != a.shape[-1]:
        raise ValueError("q and a must have the same length")
    if W1.shape[-1] != 2 * q.shape[-1]:
        raise ValueError(f"W1 expects input size {W1.shape[-1]}, got {2 * q.shape[-1]}")
    hidden = torch.tanh(torch.cat([q, a], dim=-1) @ W1.T + b1)
    return (hidden @ W2.T + b2).squeeze(-1)


class ScoreHead(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.inner = nn.Linear(2 * d, hidden)
        self.outer = nn.Linear(hidden, 1)

    def forward(self, q, a):
        return score_head(q, a, self.inner.weight, self.inner.bias, self.outer.weight, self.outer.bias)


def _concat(parts: Sequence[torch.Tensor], dim: int) -> torch.Tensor:
    return torch.cat(list(parts), dim=dim)


class DCQAModel(nn.Module):
    """Backend plus commonality extraction, refinement and choice enhancement."""

    def __init__(self, config: DCQAConfig, backend: Backend, seed: int = 0, attn_init_scale: float = 1.0):
        super().__init__()
        if backend.config.hidden_dim != config.d:
            raise ConfigError(f"backend hidden_dim {backend.config.hidden_dim} != model d {config.d}")
        self.config = config
        self.backend = backend
        d = config.d
        with torch.random.fork_rng(devices=[]):  # keep the global RNG untouched
            self.choice_attn = ChoiceAttention(d, config.n_choices, config.share_choice_weights)
            self.c1 = CrossAttention(d)
            self.c2 = CrossAttention(d)
            self.c3 = CrossAttention(d)
            self.head = ScoreHead(d, config.hidden)
        self._init_parameters(seed, attn_init_scale)

    @torch.no_grad()
    def _init_parameters(self, seed: int, attn_init_scale: float):
        gen = torch.Generator().manual_seed(seed + 7919)
        for name, p in self.named_parameters():
            if name.startswith("backend.") or name.endswith(("gain", "bias")):
                continue
            fan_in = p.shape[-1] if name.startswith("head.") else p.shape[-2]
            scale = attn_init_scale if name.endswith("W_I") else 1.0
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale / math.sqrt(fan_in))
        for module in (self.c1, self.c2, self.c3):
            module.gain.fill_(1.0)
            module.bias.zero_()
        self.head.inner.bias.zero_()
        self.head.outer.bias.zero_()

    # -- inputs -----------------------------------------------------------

    def represent_contexts(self, questions: Sequence[str], choices: Sequence[Sequence[str]]) -> EncodedContexts:
        n = self.config.n_choices
        for cs in choices:
            if len(cs) != n:
                raise ValueError(f"expected {n} choices, got {len(cs)}")
        q_states = self.backend.encode(self.backend.tokenize_batch(list(questions)))
        qa_texts = [f"{q} {c}" for q, cs in zip(questions, choices) for c in cs]
        a_states = self.backend.encode(self.backend.tokenize_batch(qa_texts))
        B = len(questions)
        m, d = a_states.values.shape[-2:]
        return EncodedContexts(
            Q=q_states.values,
            Q_mask=q_states.mask.bool(),
            A=a_states.values.reshape(B, n, m, d),
            A_mask=a_states.mask.bool().reshape(B, n, m),
        )

    # -- forward ------------------------------------------------------------

    def forward_contexts(self, ctx: EncodedContexts) -> ForwardOutput:
        cfg = self.config
        Q, qm, A, am = ctx.Q, ctx.Q_mask, ctx.A, ctx.A_mask
        B, n, m, d = A.shape
        l = Q.shape[1]
        inter = {"Q": Q, "Q_mask": qm, "A": A, "A_mask": am}

        Qe = Q.unsqueeze(1).expand(B, n, l, d)
        qme = qm.unsqueeze(1).expand(B, n, l)

        common = None
        if not cfg.has(Ablation.NO_COME):
            C = self.choice_attn(A, am)
            cm = commonality_mask(am)
            common = self.c1(Q, C, qm, cm)
            inter.update(C=C, C_mask=cm, Q_hat_c=common.enhanced, q_c=common.pooled)

        if cfg.has(Ablation.NO_C2):
            per_choice = CrossAttnOutput(Qe * qme.unsqueeze(-1).to(Q.dtype),
                                         max_pool_tokens(Qe, qme))
        else:
            per_choice = self.c2(Qe, A, qme, am)
        inter.update(Q_hat_a=per_choice.enhanced, q_a=per_choice.pooled)

        if common is not None and not cfg.has(Ablation.NO_CR):
            Q_hat, q_vec = refine(per_choice, CrossAttnOutput(common.enhanced.unsqueeze(1),
                                                             common.pooled.unsqueeze(1)))
        else:
            Q_hat, q_vec = per_choice.enhanced, per_choice.pooled
        inter.update(Q_hat=Q_hat, q=q_vec)

        target, tmask = A, am
        if not cfg.has(Ablation.NO_DE):
            clue = self.backend.decode(HiddenStates(Q_hat.reshape(B * n, l, d), qme.reshape(B * n, l)),
                                       cfg.clue_len)
            p = clue.values.shape[1]
            K = clue.values.reshape(B, n, p, d)
            inter["K"] = K
            target = _concat([A, K], dim=2)
            tmask = _concat([am, clue.mask.bool().reshape(B, n, p)], dim=2)

        if cfg.has(Ablation.NO_CE):
            a_vec = max_pool_tokens(A, am)
        else:
            enhanced = self.c3(target, Q_hat, tmask, qme)
            a_vec = enhanced.pooled
            inter.update(A_hat=enhanced.enhanced, A_hat_mask=tmask)
        inter["a"] = a_vec

        logits = self.head(q_vec, a_vec)
        probs = torch.softmax(logits, dim=-1)
        return ForwardOutput(logits, probs, inter)

    def forward(self, examples: "MCQExample | Sequence[MCQExample]") -> ForwardOutput:
        if isinstance(examples, MCQExample):
            examples = [examples]
        ctx = self.represent_contexts([ex.question for ex in examples], [ex.choices for ex in examples])
        return self.forward_contexts(ctx)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: DCQAModel, meta: dict | None = None, model_dir: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    backend = model.backend
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dcqa_config": model.config.to_dict(),
        "backend_config": asdict(backend.config),
        "backend_seed": getattr(backend, "seed", 0),
        "tokenizer": backend.tokenizer.state_dict() if isinstance(backend, ReferenceBackend) else None,
        "model_dir": model_dir,
        "dtype": str(backend.dtype).replace("torch.", ""),
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }
    torch.save(archive, path)
    return path


def load_checkpoint(path, model_dir: str | None = None) -> tuple[DCQAModel, dict]:
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if archive.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a DCQA checkpoint")
    if archive["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {archive['version']} is newer than supported")
    bcfg = BackendConfig(**archive["backend_config"])
    tok = WordTokenizer.from_state_dict(archive["tokenizer"]) if archive["tokenizer"] else None
    backend = make_backend(bcfg, archive["backend_seed"], tokenizer=tok,
                           model_dir=model_dir or archive.get("model_dir"))
    model = DCQAModel(DCQAConfig(**archive["dcqa_config"]), backend)
    model.to(getattr(torch, archive["dtype"]))
    model.load_state_dict(archive["state_dict"])
    model.eval()
    return model, archive["meta"]
