"""Choice-attention commonality, two-way cross-attention and refinement.

All functions accept arbitrary leading batch dimensions. Masks are boolean
(True = real token). Masked keys get ``-inf`` logits; masked query rows are
zeroed in every output so padding never leaks downstream.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn


class DegenerateInputError(ValueError):
    """Raised when every position on one side of an attention is masked."""


class CrossAttnOutput(NamedTuple):
    enhanced: torch.Tensor  # (..., l, d)
    pooled: torch.Tensor  # (..., d)


class RefinedQuestion(NamedTuple):
    matrix: torch.Tensor
    pooled: torch.Tensor


def _full_mask(x: torch.Tensor) -> torch.Tensor:
    return torch.ones(x.shape[:-1], dtype=torch.bool, device=x.device)


def _check_nonempty(mask: torch.Tensor, what: str):
    if not bool(mask.any(-1).all()):
        raise DegenerateInputError(f"{what} is fully masked")


def masked_softmax(logits: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with masked keys at exactly zero weight."""
    return torch.softmax(logits.masked_fill(~key_mask, float("-inf")), dim=-1)


def max_pool_tokens(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-feature max over unmasked rows: (..., l, d) -> (..., d)."""
    if mask is None:
        return x.max(dim=-2).values
    _check_nonempty(mask, "pooling input")
    return x.masked_fill(~mask.unsqueeze(-1), float("-inf")).max(dim=-2).values


def layer_normalize(x: torch.Tensor, gain: torch.Tensor | None = None,
                    bias: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    mean = x.mean(-1, keepdim=True)
    var = ((x - mean) ** 2).mean(-1, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def choice_attention_commonality(A: torch.Tensor, W: torch.Tensor,
                                 masks: torch.Tensor | None = None) -> torch.Tensor:
    """Aggregate what the choices share into one (m, d) matrix.

    ``A`` is (..., n, m, d). ``W`` is either one shared (d, d) matrix or a
    per-pair (n, n, d, d) stack. For every ordered pair i != j the rows of
    A_i attend over A_j through A_i W A_j^T; the attended rows are summed over
    all pairs and divided by n.
    """
    n, m, d = A.shape[-3:]
    if n < 2:
        raise ValueError("commonality needs at least two choices")
    if masks is None:
        masks = _full_mask(A)
    if masks.shape != A.shape[:-1]:
        raise ValueError(f"mask shape {tuple(masks.shape)} does not match {tuple(A.shape[:-1])}")
    if W.shape == (d, d):
        AW = (A @ W).unsqueeze(-3)  # (..., n, 1, m, d)
    elif W.shape == (n, n, d, d):
        AW = torch.einsum("...imd,ijde->...ijme", A, W)
    else:
        raise ValueError(f"W has shape {tuple(W.shape)}, expected ({d}, {d}) or ({n}, {n}, {d}, {d})")
    _check_nonempty(masks, "choice")

    # logits[..., i, j, r, s] = (A_i W_ij)[r] . A_j[s]
    logits = AW @ A.unsqueeze(-4).transpose(-1, -2)
    S = masked_softmax(logits, masks.unsqueeze(-3).unsqueeze(-2))
    attended = S @ A.unsqueeze(-4)  # (..., i, j, m, d)
    keep = ~torch.eye(n, dtype=torch.bool, device=A.device)
    weight = keep[..., :, :, None, None] & masks[..., :, None, :, None]
    return (attended * weight.to(A.dtype)).sum(dim=(-4, -3)) / n


def commonality_mask(masks: torch.Tensor) -> torch.Tensor:
    """Row r of C is real when any choice has a real token at r."""
    return masks.any(dim=-2)


def cross_attention(target: torch.Tensor, context: torch.Tensor, W_I: torch.Tensor,
                    target_mask: torch.Tensor | None = None,
                    context_mask: torch.Tensor | None = None,
                    gain: torch.Tensor | None = None, bias: torch.Tensor | None = None,
                    eps: float = 1e-6) -> CrossAttnOutput:
    """Two-way attention of ``target`` (l, d) with ``context`` (m, d).

    I_t = softmax(C T^T) pulls target tokens into context positions,
    I_c = softmax(T C^T) pulls [I_t T ; C] back onto target positions, and the
    result is projected by ``W_I`` (2d, d), added to the target and
    layer-normalised. The pooled vector is the max over real target rows.
    """
    d = target.shape[-1]
    if context.shape[-1] != d:
        raise ValueError("target and context feature sizes differ")
    if W_I.shape != (2 * d, d):
        raise ValueError(f"W_I has shape {tuple(W_I.shape)}, expected ({2 * d}, {d})")
    if target_mask is None:
        target_mask = _full_mask(target)
    if context_mask is None:
        context_mask = _full_mask(context)
    _check_nonempty(target_mask, "target")
    _check_nonempty(context_mask, "context")

    I_t = masked_softmax(context @ target.transpose(-1, -2), target_mask.unsqueeze(-2))
    I_c = masked_softmax(target @ context.transpose(-1, -2), context_mask.unsqueeze(-2))
    mixed = I_c @ torch.cat([I_t @ target, context], dim=-1)  # (..., l, 2d)
    enhanced = layer_normalize(target + mixed @ W_I, gain, bias, eps)
    enhanced = enhanced * target_mask.unsqueeze(-1).to(enhanced.dtype)
    return CrossAttnOutput(enhanced, max_pool_tokens(enhanced, target_mask))


def refine(with_choice: CrossAttnOutput, with_commonality: CrossAttnOutput) -> RefinedQuestion:
    """Remove the commonality-conditioned question from the choice-conditioned one."""
    if (with_choice.enhanced.shape[-2:] != with_commonality.enhanced.shape[-2:]
            or with_choice.pooled.shape[-1] != with_commonality.pooled.shape[-1]):
        raise ValueError("refine inputs must share shapes")
    return RefinedQuestion(with_choice.enhanced - with_commonality.enhanced,
                           with_choice.pooled - with_commonality.pooled)


class ChoiceAttention(nn.Module):
    """Learnable W for the commonality step (shared, or one per ordered pair)."""

    def __init__(self, d: int, n_choices: int, shared: bool = True):
        super().__init__()
        shape = (d, d) if shared else (n_choices, n_choices, d, d)
        self.shared = shared
        self.W = nn.Parameter(torch.empty(shape))
        nn.init.normal_(self.W, std=d ** -0.5)

    def forward(self, A, masks=None):
        return choice_attention_commonality(A, self.W, masks)


class CrossAttention(nn.Module):
    """One cross-attention site: W_I plus layer-norm gain and bias."""

    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.W_I = nn.Parameter(torch.empty(2 * d, d))
        nn.init.normal_(self.W_I, std=(2 * d) ** -0.5)
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, target, context, target_mask=None, context_mask=None) -> CrossAttnOutput:
        return cross_attention(target, context, self.W_I, target_mask, context_mask,
                               self.gain, self.bias, self.eps)
