"""Ablation runner, token-weight heatmaps and parameter counting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attention import masked_softmax
from .data import DatasetSplits, MCQExample
from .model import Ablation, ConfigError, check_ablation, parse_ablation
from .training import MultiSeedResult, TrainConfig, multi_seed_run

# Ablation variant ids -> flags. -C1 removes the whole commonality
# path (same as -ComE); -C3 is the choice-enhancement attention (same as -CE).
VARIANT_FLAGS: dict[str, frozenset[Ablation]] = {
    "FULL": frozenset(),
    "-ComE": frozenset({Ablation.NO_COME, Ablation.NO_C1}),
    "-CR": frozenset({Ablation.NO_CR}),
    "-DE": frozenset({Ablation.NO_DE}),
    "-CE": frozenset({Ablation.NO_CE}),
    "-C1": frozenset({Ablation.NO_COME, Ablation.NO_C1}),
    "-C2": frozenset({Ablation.NO_C2}),
    "-C3": frozenset({Ablation.NO_CE}),
}
VARIANTS = tuple(VARIANT_FLAGS)


def variant_flags(variant: str) -> frozenset[Ablation]:
    try:
        return VARIANT_FLAGS[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}") from None


# ---------------------------------------------------------------------------
# Token weights
# ---------------------------------------------------------------------------

@dataclass
class TokenWeightRow:
    question_tokens: list[str]
    percentages: np.ndarray  # (n, l), each row in [0, 100]
    degenerate: list[bool] = field(default_factory=list)


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def token_weights(Q, A, q_mask=None, a_mask=None, question_tokens: Sequence[str] | None = None) -> TokenWeightRow:
    """Percentage weight of each real question token, per choice.

    ``Q`` is (l, d), or (n, l, d) when the question representation differs
    per choice; ``A`` is (n, m, d). For each choice the question-to-choice
    attention softmax(Q A_i^T) is max-pooled over choice tokens, then
    min-max scaled to [0, 100]. A row whose raw scores are all equal is
    flagged degenerate and set to zero.
    """
    Q, A = _as_tensor(Q).detach(), _as_tensor(A).detach()
    n, m, _ = A.shape
    if Q.dim() == 2:
        Q = Q.unsqueeze(0).expand(n, *Q.shape)
    l = Q.shape[1]
    q_mask = torch.ones(l, dtype=torch.bool) if q_mask is None else _as_tensor(q_mask).bool()
    if q_mask.dim() == 2:
        q_mask = q_mask[0]
    a_mask = torch.ones(n, m, dtype=torch.bool) if a_mask is None else _as_tensor(a_mask).bool()

    weights = masked_softmax(Q @ A.transpose(-1, -2), a_mask.unsqueeze(1))  # (n, l, m)
    raw = weights.max(dim=-1).values[:, q_mask]  # (n, l_real)
    lo = raw.min(dim=-1, keepdim=True).values
    hi = raw.max(dim=-1, keepdim=True).values
    span = hi - lo
    degenerate = (span == 0).squeeze(-1)
    pct = torch.where(span > 0, 100.0 * ((raw - lo) / torch.where(span > 0, span, torch.ones_like(span))),
                      torch.zeros_like(raw))
    if question_tokens is None:
        question_tokens = [f"t{k}" for k in range(pct.shape[1])]
    if len(question_tokens) != pct.shape[1]:
        raise ValueError(f"{len(question_tokens)} question tokens for {pct.shape[1]} real positions")
    return TokenWeightRow(list(question_tokens), pct.double().numpy(), degenerate.tolist())


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------

STAGES = ("encoder", "refined_question", "enhanced_choice")


@dataclass
class Heatmap:
    """``matrices[stage][choice][question_token]`` holds a list of values
    (one pooled percentage per question token)."""

    question_tokens: list[str]
    choices: list[str]
    stages: list[str]
    matrices: list

    def grid(self, stage: int) -> np.ndarray:
        return np.asarray(self.matrices[stage], dtype=float)[..., 0]

    def to_json(self) -> dict:
        return {"question_tokens": self.question_tokens, "choices": self.choices,
                "stages": self.stages, "matrices": self.matrices}


def _heatmap_from_rows(rows: Sequence[TokenWeightRow], stages: Sequence[str], choices: Sequence[str]) -> Heatmap:
    matrices = [[[[float(v)] for v in choice_row] for choice_row in row.percentages] for row in rows]
    return Heatmap(list(rows[0].question_tokens), list(choices), list(stages), matrices)


def stage_triplet(model, example: MCQExample) -> Heatmap:
    """Question-token weights at three points of the forward pass.

    Stages: encoder Q vs A_i, refined question vs A_i, refined question vs
    the enhanced choice. ``model`` is a fitted estimator or a DCQAModel.
    """
    net = getattr(model, "model_", model)
    net.eval()
    with torch.no_grad():
        inter = net(example).intermediates
    if "A_hat" not in inter:
        raise ValueError("stage triplet needs choice enhancement (model was built with NO_CE)")
    tokens = net.backend.tokens(example.question)
    qm = inter["Q_mask"][0]
    rows = [
        token_weights(inter["Q"][0], inter["A"][0], qm, inter["A_mask"][0], tokens),
        token_weights(inter["Q_hat"][0], inter["A"][0], qm, inter["A_mask"][0], tokens),
        token_weights(inter["Q_hat"][0], inter["A_hat"][0], qm, inter["A_hat_mask"][0], tokens),
    ]
    return _heatmap_from_rows(rows, STAGES, example.choices)


def _to_heatmap(data, choices: Sequence[str] | None) -> Heatmap:
    if isinstance(data, Heatmap):
        return data
    if isinstance(data, TokenWeightRow):
        names = list(choices) if choices is not None else [f"choice {i}" for i in range(len(data.percentages))]
        return _heatmap_from_rows([data], ["weights"], names)
    raise TypeError(f"cannot export {type(data).__name__}")


def export_heatmap(data, out_path, fmt: str = "json", choices: Sequence[str] | None = None) -> Path:
    """Write token weights as JSON, CSV (one row per stage x choice) or PNG."""
    heat = _to_heatmap(data, choices)
    out_path = Path(out_path)
    fmt = fmt.lower()
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            out_path.write_text(json.dumps(heat.to_json(), indent=1))
        elif fmt == "csv":
            with open(out_path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["stage", "choice"] + heat.question_tokens)
                for s, stage in enumerate(heat.stages):
                    for choice, row in zip(heat.choices, heat.grid(s)):
                        writer.writerow([stage, choice] + [repr(float(v)) for v in row])
        elif fmt == "png":
            _render_png(heat, out_path)
        else:
            raise ValueError(f"unknown heatmap format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {out_path}: {exc}") from exc
    return out_path


def load_heatmap(path) -> Heatmap:
    raw = json.loads(Path(path).read_text())
    return Heatmap(raw["question_tokens"], raw["choices"], raw["stages"], raw["matrices"])


def _render_png(heat: Heatmap, out_path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = len(heat.stages)
    fig, axes = plt.subplots(1, k, figsize=(max(4, 0.6 * len(heat.question_tokens)) * k, 0.5 * len(heat.choices) + 2),
                             squeeze=False)
    for s, ax in enumerate(axes[0]):
        ax.imshow(heat.grid(s), cmap="Blues", vmin=0, vmax=100, aspect="auto")
        ax.set_title(heat.stages[s])
        ax.set_xticks(range(len(heat.question_tokens)), heat.question_tokens, rotation=60, fontsize=8)
        ax.set_yticks(range(len(heat.choices)), heat.choices if s == 0 else [""] * len(heat.choices), fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parameter counting
# ---------------------------------------------------------------------------

@dataclass
class ParameterCount:
    total: int
    by_module: dict[str, int]

    @property
    def millions(self) -> str:
        return f"{self.total / 1e6:.2f}"

    def __str__(self):
        return f"{self.total} parameters ({self.millions}M)"


def count_parameters(model) -> ParameterCount:
    net = getattr(model, "model_", model)
    seen, by_module = set(), {}
    for name, p in net.named_parameters():
        if id(p) in seen or not p.requires_grad:
            continue
        seen.add(id(p))
        top = name.split(".")[0]
        by_module[top] = by_module.get(top, 0) + p.numel()
    return ParameterCount(sum(by_module.values()), by_module)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    flags: frozenset[Ablation]
    result: MultiSeedResult


@dataclass
class AblationReport:
    dataset: str
    rows: list[AblationRow]

    def table(self) -> str:
        lines = [f"{'Model':<8} {'Dev':>16} {'Test':>16}"]
        for row in self.rows:
            cells = row.result.formatted()
            lines.append(f"{row.variant:<8} {cells.get('dev', '-'):>16} {cells.get('test', '-'):>16}")
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        return [{"dataset": self.dataset, "variant": r.variant,
                 "flags": sorted(f.value for f in r.flags), **r.result.to_record()} for r in self.rows]


def run_ablation(config: TrainConfig, variants: Sequence[str], seeds: Sequence[int],
                 splits: DatasetSplits, model_params: dict | None = None,
                 out_dir=None, meta: dict | None = None) -> AblationReport:
    """Multi-seed training for each variant's flag set."""
    rows = []
    for variant in variants:
        flags = variant_flags(variant)
        check_ablation(parse_ablation(flags))
        params = dict(model_params or {})
        params["ablation"] = sorted(f.value for f in flags)
        run_dir = None if out_dir is None else Path(out_dir) / variant
        rows.append(AblationRow(variant, flags, multi_seed_run(config, seeds, splits, params, run_dir, meta=meta)))
    return AblationReport(config.dataset_tag, rows)
