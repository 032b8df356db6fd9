"""Multiple-choice QA that scores each choice by what sets it apart from the others."""

__version__ = "0.1.0"

from .data import DatasetSplits, DatasetTag, MCQExample, load_dataset, make_synthetic_dataset
from .estimator import DCQAClassifier

__all__ = [
    "DCQAClassifier",
    "DatasetSplits",
    "DatasetTag",
    "MCQExample",
    "load_dataset",
    "make_synthetic_dataset",
]
