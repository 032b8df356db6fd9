"""Optimisation loop and the multi-seed / grid-search experiment protocol."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .data import DatasetSplits, DatasetTag, MCQExample

logger = logging.getLogger(__name__)

LEARNING_RATE_GRID = (1e-4, 5e-5, 1e-5, 5e-6)
BATCH_SIZE_GRID = (16, 8, 4)
DEFAULT_SEEDS = (1, 10, 20)
ARC_C_SEEDS = (1, 10, 20, 30, 40)

# Selected (learning rate, batch size) per backbone family and dataset.
SELECTED_HYPERPARAMETERS: dict[tuple[str, str], tuple[float, int]] = {
    ("T5", "CSQA"): (1e-5, 16),
    ("T5", "OBQA"): (5e-5, 16),
    ("T5", "ARC-E"): (1e-4, 4),
    ("T5", "ARC-C"): (1e-4, 16),
    ("T5", "QASC"): (5e-5, 8),
    ("T5", "PIQA"): (1e-4, 8),
    ("T5", "SocialIQA"): (5e-5, 16),
    ("Unified-T5", "CSQA"): (1e-4, 8),
    ("Unified-T5", "OBQA"): (1e-4, 8),
    ("Unified-T5", "ARC-E"): (1e-4, 16),
    ("Unified-T5", "ARC-C"): (1e-4, 8),
    ("Unified-T5", "QASC"): (1e-4, 8),
    ("Unified-T5", "PIQA"): (1e-4, 16),
    ("Unified-T5", "SocialIQA"): (5e-5, 16),
}


def seeds_for(tag: "str | DatasetTag") -> tuple[int, ...]:
    """Five seeds for the smallest benchmark (ARC-C), three elsewhere."""
    return ARC_C_SEEDS if DatasetTag.parse(tag) is DatasetTag.ARC_C else DEFAULT_SEEDS


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 50
    early_stop_patience: int = 15
    weight_decay: float = 0.01
    seed: int = 1
    dataset_tag: str = "SYNTHETIC"
    backend: str = "reference"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, max_epochs and early_stop_patience must be positive")
        if self.early_stop_patience > self.max_epochs:
            raise ValueError("early_stop_patience cannot exceed max_epochs")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dev_accuracy: float | None


@dataclass
class RunResult:
    best_dev_accuracy: float | None
    test_accuracy: float | None
    epochs_run: int
    seed: int
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    train_accuracy: float | None = None
    checkpoint: str | None = None

    def to_record(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def _labels(examples: Sequence[MCQExample]) -> torch.Tensor:
    return torch.tensor([ex.answer_index for ex in examples], dtype=torch.long)


@torch.no_grad()
def predict_proba(model, examples: Sequence[MCQExample], batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    chunks = [model(list(examples[i:i + batch_size])).probs for i in range(0, len(examples), batch_size)]
    model.train(was_training)
    if not chunks:
        return np.zeros((0, model.config.n_choices))
    return torch.cat(chunks).double().numpy()


def accuracy(model, examples: Sequence[MCQExample], batch_size: int = 64) -> float:
    if not examples:
        raise ValueError("cannot compute accuracy on an empty split")
    probs = predict_proba(model, examples, batch_size)
    return float((probs.argmax(1) == _labels(examples).numpy()).mean())


def fit_loop(model, train: Sequence[MCQExample], dev: Sequence[MCQExample] | None, *,
             learning_rate: float, batch_size: int, max_epochs: int, patience: int,
             weight_decay: float, seed: int, eval_batch_size: int = 64,
             verbose: int = 0) -> tuple[list[EpochRecord], int]:
    """Train in place with AdamW and dev-accuracy early stopping.

    Returns the per-epoch history and the best epoch; the model is left
    holding the best-dev weights (last weights when there is no dev set).
    """
    if not train:
        raise ValueError("empty training split")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=weight_decay)
    history: list[EpochRecord] = []
    best_acc, best_epoch, best_state = -1.0, 0, None

    for epoch in range(1, max_epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for start in range(0, len(train), batch_size):
            batch = [train[i] for i in order[start:start + batch_size]]
            logits = model(batch).logits
            loss = F.cross_entropy(logits, _labels(batch))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start}; "
                    f"try a smaller learning rate than {learning_rate}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            seen += len(batch)

        dev_acc = accuracy(model, dev, eval_batch_size) if dev else None
        history.append(EpochRecord(epoch, total / seen, dev_acc))
        if verbose:
            logger.info("epoch %d loss %.4f dev %s", epoch, total / seen, dev_acc)

        if dev_acc is None:
            best_epoch = epoch
            continue
        if dev_acc > best_acc:
            best_acc, best_epoch = dev_acc, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= patience:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history, best_epoch


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------

def train(config: TrainConfig, splits: DatasetSplits, model_params: dict | None = None,
          out_dir: "str | Path | None" = None, meta: dict | None = None):
    """One seeded run: fit on train, select on dev, report test.

    Returns ``(RunResult, fitted DCQAClassifier)``. With ``out_dir`` the best
    checkpoint and a one-line result record are written there; ``meta`` is
    stored in the checkpoint alongside them.
    """
    from .estimator import DCQAClassifier

    if not splits.train or not splits.dev:
        raise ValueError("train and dev splits must be non-empty")
    params = dict(model_params or {})
    params.update(backend=config.backend, learning_rate=config.learning_rate,
                  batch_size=config.batch_size, max_epochs=config.max_epochs,
                  early_stop_patience=config.early_stop_patience,
                  weight_decay=config.weight_decay, random_state=config.seed)
    clf = DCQAClassifier(**params).fit(splits.train, X_dev=splits.dev)
    result = RunResult(
        best_dev_accuracy=clf.best_dev_accuracy_,
        test_accuracy=clf.score(splits.test) if splits.test else None,
        epochs_run=clf.epochs_run_,
        seed=config.seed,
        history=clf.history_,
        best_epoch=clf.best_epoch_,
        train_accuracy=clf.score(splits.train),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        info = dict(meta or {}, train_config=asdict(config), result=result.to_record())
        result.checkpoint = str(clf.save(out_dir / "best.pt", meta=info))
        with open(out_dir / "result.jsonl", "w") as fh:
            fh.write(json.dumps(result.to_record()) + "\n")
    return result, clf


def format_mean_std(values: Sequence[float]) -> str:
    """Accuracies in [0, 1] -> ``"mean(±std)"`` in percent, population std."""
    pct = 100.0 * np.asarray(values, dtype=float)
    return f"{pct.mean():.2f}(±{pct.std():.2f})"


@dataclass
class MultiSeedResult:
    seeds: list[int]
    runs: list[RunResult]
    failures: dict[int, str]
    dev_mean: float
    dev_std: float
    test_mean: float | None
    test_std: float | None

    @property
    def failed(self) -> bool:
        return bool(self.failures)

    def formatted(self) -> dict[str, str]:
        out = {"dev": format_mean_std([r.best_dev_accuracy for r in self.runs])} if self.runs else {}
        if self.runs and all(r.test_accuracy is not None for r in self.runs):
            out["test"] = format_mean_std([r.test_accuracy for r in self.runs])
        return out

    def to_record(self) -> dict:
        return {"seeds": self.seeds, "failures": {str(k): v for k, v in self.failures.items()},
                "dev_mean": self.dev_mean, "dev_std": self.dev_std,
                "test_mean": self.test_mean, "test_std": self.test_std,
                "formatted": self.formatted(), "runs": [r.to_record() for r in self.runs]}


def _mean_std(values):
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


def multi_seed_run(config: TrainConfig, seeds: Sequence[int], splits: DatasetSplits,
                   model_params: dict | None = None, out_dir: "str | Path | None" = None,
                   n_jobs: int = 1, meta: dict | None = None) -> MultiSeedResult:
    """Repeat :func:`train` per seed; failing seeds are recorded, not raised."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("multi_seed_run needs at least two seeds")

    def one(seed):
        run_dir = None if out_dir is None else Path(out_dir) / str(seed)
        try:
            return seed, train(replace(config, seed=seed), splits, model_params, run_dir, meta)[0], None
        except Exception as exc:  # noqa: BLE001 - reported per seed
            logger.error("seed %s failed: %s", seed, exc)
            return seed, None, f"{type(exc).__name__}: {exc}"

    if n_jobs == 1:
        outcomes = [one(s) for s in seeds]
    else:
        from joblib import Parallel, delayed
        outcomes = Parallel(n_jobs=n_jobs)(delayed(one)(s) for s in seeds)

    runs = [r for _, r, err in outcomes if err is None]
    failures = {s: err for s, _, err in outcomes if err is not None}
    dev_mean, dev_std = _mean_std([r.best_dev_accuracy for r in runs])
    tests = [r.test_accuracy for r in runs if r.test_accuracy is not None]
    test_mean, test_std = _mean_std(tests) if tests else (None, None)
    return MultiSeedResult(seeds, runs, failures, dev_mean, dev_std, test_mean, test_std)


@dataclass
class GridResult:
    learning_rate: float
    batch_size: int
    table: list[dict]


def grid_search(config: TrainConfig, splits: DatasetSplits,
                learning_rates: Sequence[float] = LEARNING_RATE_GRID,
                batch_sizes: Sequence[int] = BATCH_SIZE_GRID,
                model_params: dict | None = None) -> GridResult:
    """Exhaustive (learning rate, batch size) search on dev accuracy.

    Ties go to the larger learning rate, then the larger batch.
    """
    if not learning_rates or not batch_sizes:
        raise ValueError("grids must be non-empty")
    if len(learning_rates) == 1 and len(batch_sizes) == 1:
        lr, bs = learning_rates[0], batch_sizes[0]
        return GridResult(lr, bs, [{"learning_rate": lr, "batch_size": bs, "dev_accuracy": None}])

    table = []
    for lr in learning_rates:
        for bs in batch_sizes:
            result, _ = train(replace(config, learning_rate=lr, batch_size=bs), splits, model_params)
            table.append({"learning_rate": lr, "batch_size": bs,
                          "dev_accuracy": result.best_dev_accuracy})
    best = max(table, key=lambda row: (row["dev_accuracy"], row["learning_rate"], row["batch_size"]))
    return GridResult(best["learning_rate"], best["batch_size"], table)


def loss_at(model, examples: Sequence[MCQExample]) -> float:
    """Mean cross-entropy of the gold choices (no gradient)."""
    with torch.no_grad():
        logits = model(list(examples)).logits
        value = F.cross_entropy(logits, _labels(examples)).item()
    if not math.isfinite(value):
        raise TrainingDivergedError("non-finite loss")
    return value
