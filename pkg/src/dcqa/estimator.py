"""scikit-learn compatible wrapper around :class:`~dcqa.model.DCQAModel`."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .backend import BackendConfig, WordTokenizer, make_backend
from .data import MCQExample
from .model import DCQAConfig, DCQAModel, load_checkpoint, save_checkpoint
from .training import fit_loop, predict_proba

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def check_examples(X, y=None, n_choices: int | None = None, require_labels: bool = False):
    """Coerce ``X`` to a list of examples and ``y`` to an int array.

    ``X`` may hold :class:`MCQExample` objects or unified-format dicts. When
    ``y`` is omitted, labels come from ``answer_index``.
    """
    if isinstance(X, MCQExample):
        X = [X]
    examples = [x if isinstance(x, MCQExample) else MCQExample.from_record(x) for x in X]
    if not examples:
        raise ValueError("empty input")
    counts = {ex.n_choices for ex in examples}
    if len(counts) != 1:
        raise ValueError(f"all examples must have the same number of choices, got {sorted(counts)}")
    n = counts.pop()
    if n_choices is not None and n != n_choices:
        raise ValueError(f"estimator was fitted with {n_choices} choices, got {n}")
    if y is not None:
        y = np.asarray(y, dtype=int)
        if y.shape != (len(examples),):
            raise ValueError(f"y has shape {y.shape}, expected ({len(examples)},)")
        if y.min() < 0 or y.max() >= n:
            raise ValueError("labels out of range")
        examples = [MCQExample(ex.id, ex.question, ex.choices, int(lab), ex.dataset_tag)
                    for ex, lab in zip(examples, y)]
    elif require_labels:
        if any(ex.answer_index is None for ex in examples):
            raise ValueError("unlabelled examples; pass y or set answer_index")
        y = np.array([ex.answer_index for ex in examples])
    return examples, y


class DCQAClassifier(ClassifierMixin, BaseEstimator):
    """Multiple-choice classifier that scores choices by their differences.

    ``X`` is a sequence of :class:`~dcqa.data.MCQExample`; the predicted class
    is the index of the chosen answer.

    Parameters
    ----------
    backend : str
        ``"reference"`` for the built-in tiny encoder-decoder, otherwise a
        name for a pretrained seq2seq model loaded from ``model_dir``.
    hidden_dim, max_seq_len, clue_len, vocab_size
        Backend shape. ``vocab_size=None`` sizes the reference vocabulary to
        the training texts.
    mlp_hidden : int or None
        Hidden width of the score head (defaults to ``hidden_dim``).
    ablation : iterable of str
        Flags from :class:`~dcqa.model.Ablation`.
    attn_init_scale : float
        Multiplier on the initial cross-attention projections W_I. The default
        0 starts every cross-attention site as a pure residual.
    learning_rate, batch_size, max_epochs, early_stop_patience, weight_decay
        AdamW settings and dev-accuracy early stopping.
    dtype : {"float32", "float64"}
    random_state : int
    """

    def __init__(self, backend="reference", hidden_dim=16, max_seq_len=64, clue_len=10,
                 vocab_size=None, model_dir=None, mlp_hidden=None, ablation=(),
                 share_choice_weights=True, attn_init_scale=0.0, learning_rate=1e-4,
                 batch_size=16, max_epochs=50, early_stop_patience=15, weight_decay=0.01, eval_batch_size=64,
                 dtype="float32", random_state=0, verbose=0):
        self.backend = backend
        self.hidden_dim = hidden_dim
        self.max_seq_len = max_seq_len
        self.clue_len = clue_len
        self.vocab_size = vocab_size
        self.model_dir = model_dir
        self.mlp_hidden = mlp_hidden
        self.ablation = ablation
        self.share_choice_weights = share_choice_weights
        self.attn_init_scale = attn_init_scale
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.weight_decay = weight_decay
        self.eval_batch_size = eval_batch_size
        self.dtype = dtype
        self.random_state = random_state
        self.verbose = verbose

    def _seed(self) -> int:
        return 0 if self.random_state is None else int(self.random_state)

    def build_model(self, examples: Sequence[MCQExample]) -> DCQAModel:
        """Construct an untrained model sized for ``examples``."""
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        n = examples[0].n_choices
        tokenizer = None
        vocab_size = self.vocab_size
        if self.backend == "reference":
            texts = [ex.question for ex in examples] + [c for ex in examples for c in ex.choices]
            if vocab_size is None:
                tokenizer = WordTokenizer.from_texts(texts, 10 ** 9)
                vocab_size = len(tokenizer.vocab) + 3
                tokenizer = WordTokenizer(vocab_size, tokenizer.vocab)
            else:
                tokenizer = WordTokenizer.from_texts(texts, vocab_size)
        bcfg = BackendConfig(name=self.backend, hidden_dim=self.hidden_dim,
                             max_seq_len=self.max_seq_len, clue_len=self.clue_len,
                             vocab_size=vocab_size or 32128)
        backend = make_backend(bcfg, self._seed(), tokenizer=tokenizer, model_dir=self.model_dir)
        cfg = DCQAConfig(n_choices=n, d=backend.config.hidden_dim, clue_len=self.clue_len,
                         mlp_hidden=self.mlp_hidden, ablation=self.ablation,
                         share_choice_weights=self.share_choice_weights)
        return DCQAModel(cfg, backend, seed=self._seed(),
                         attn_init_scale=self.attn_init_scale).to(_DTYPES[self.dtype])

    def fit(self, X, y=None, X_dev=None, y_dev=None):
        """Train on ``X``; ``X_dev`` drives early stopping and model selection."""
        examples, y = check_examples(X, y, require_labels=True)
        dev = None
        if X_dev is not None:
            dev, _ = check_examples(X_dev, y_dev, n_choices=examples[0].n_choices, require_labels=True)
        self.model_ = self.build_model(examples)
        self.n_choices_ = examples[0].n_choices
        self.classes_ = np.arange(self.n_choices_)
        self.history_, self.best_epoch_ = fit_loop(
            self.model_, examples, dev, learning_rate=self.learning_rate,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.early_stop_patience, weight_decay=self.weight_decay,
            seed=self._seed(), eval_batch_size=self.eval_batch_size, verbose=self.verbose)
        self.epochs_run_ = len(self.history_)
        devs = [h.dev_accuracy for h in self.history_ if h.dev_accuracy is not None]
        self.best_dev_accuracy_ = max(devs) if devs else None
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("DCQAClassifier is not fitted yet; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        examples, _ = check_examples(X, n_choices=self.n_choices_)
        return predict_proba(self.model_, examples, self.eval_batch_size)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y=None, sample_weight=None) -> float:
        examples, y = check_examples(X, y, require_labels=True)
        pred = self.predict(examples)
        weights = None if sample_weight is None else np.asarray(sample_weight, dtype=float)
        return float(np.average(pred == y, weights=weights))

    def forward_details(self, example: MCQExample):
        """Probabilities and every intermediate tensor for one example."""
        self._check_fitted()
        self.model_.eval()
        with torch.no_grad():
            return self.model_(example)

    def save(self, path, meta: dict | None = None) -> Path:
        self._check_fitted()
        meta = dict(meta or {})
        meta["estimator_params"] = self.get_params()
        meta["fit_state"] = {"best_epoch": self.best_epoch_, "epochs_run": self.epochs_run_,
                             "best_dev_accuracy": self.best_dev_accuracy_,
                             "history": [vars(h) for h in self.history_]}
        return save_checkpoint(path, self.model_, meta, model_dir=self.model_dir)

    @classmethod
    def load(cls, path, model_dir: str | None = None) -> "DCQAClassifier":
        from .training import EpochRecord

        model, meta = load_checkpoint(path, model_dir)
        params = dict(meta.get("estimator_params", {}))
        if model_dir is not None:
            params["model_dir"] = model_dir
        clf = cls(**params)
        clf.model_ = model
        clf.n_choices_ = model.config.n_choices
        clf.classes_ = np.arange(clf.n_choices_)
        state = meta.get("fit_state", {})
        clf.history_ = [EpochRecord(**h) for h in state.get("history", [])]
        clf.best_epoch_ = state.get("best_epoch", 0)
        clf.epochs_run_ = state.get("epochs_run", 0)
        clf.best_dev_accuracy_ = state.get("best_dev_accuracy")
        clf.checkpoint_meta_ = meta
        return clf
