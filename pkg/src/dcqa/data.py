"""Dataset ingestion for multiple-choice QA benchmarks.

Every source schema is mapped onto :class:`MCQExample` and can be written to
(and read back from) one unified JSON-lines format.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DatasetTag(str, Enum):
    CSQA = "CSQA"
    OBQA = "OBQA"
    ARC_E = "ARC-E"
    ARC_C = "ARC-C"
    QASC = "QASC"
    PIQA = "PIQA"
    SOCIALIQA = "SocialIQA"
    SYNTHETIC = "SYNTHETIC"

    @classmethod
    def parse(cls, value: "str | DatasetTag") -> "DatasetTag":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("_", "-")
        for tag in cls:
            if tag.value.upper() == key or tag.name == key.replace("-", "_"):
                return tag
        raise ValueError(f"unknown dataset tag {value!r}")


class Provenance(str, Enum):
    OFFICIAL = "OFFICIAL"
    IN_HOUSE_DEV = "IN_HOUSE_DEV"


# (train, dev, test, n_choices) as used for the experiments.
DATASET_STATS: dict[DatasetTag, tuple[int, int, int, int]] = {
    DatasetTag.CSQA: (8500, 1241, 1221, 5),
    DatasetTag.OBQA: (4957, 500, 500, 4),
    DatasetTag.ARC_E: (2241, 567, 2365, 4),
    DatasetTag.ARC_C: (1117, 295, 1165, 4),
    DatasetTag.QASC: (7320, 814, 926, 8),
    DatasetTag.PIQA: (14500, 1613, 1838, 2),
    DatasetTag.SOCIALIQA: (31500, 1910, 1954, 3),
}

# Datasets whose official test labels are unreleased: the official dev set
# becomes the test split and dev is held out of train.
IN_HOUSE_DEV = {DatasetTag.CSQA, DatasetTag.QASC, DatasetTag.PIQA, DatasetTag.SOCIALIQA}

# ARC ships a few 3- and 5-choice questions; they are dropped, not padded.
_SKIP_MISMATCHED = {DatasetTag.ARC_E, DatasetTag.ARC_C}


class DataError(Exception):
    """Base class for dataset ingestion failures."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class LabelError(DataError):
    pass


@dataclass(frozen=True)
class MCQExample:
    id: str
    question: str
    choices: tuple[str, ...]
    answer_index: int | None
    dataset_tag: DatasetTag

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        object.__setattr__(self, "dataset_tag", DatasetTag.parse(self.dataset_tag))
        if len(self.choices) < 2:
            raise SchemaError(f"{self.id}: need at least 2 choices, got {len(self.choices)}")
        if any(not isinstance(c, str) or not c.strip() for c in self.choices):
            raise SchemaError(f"{self.id}: empty choice text")
        if self.answer_index is not None and not 0 <= self.answer_index < len(self.choices):
            raise LabelError(f"{self.id}: answer_index {self.answer_index} out of range")

    @property
    def n_choices(self) -> int:
        return len(self.choices)

    def to_record(self) -> dict:
        record = asdict(self)
        record["choices"] = list(self.choices)
        record["dataset_tag"] = self.dataset_tag.value
        return record

    @classmethod
    def from_record(cls, record: dict) -> "MCQExample":
        return cls(
            id=str(record["id"]),
            question=record["question"],
            choices=tuple(record["choices"]),
            answer_index=record.get("answer_index"),
            dataset_tag=record["dataset_tag"],
        )


@dataclass
class DatasetSplits:
    train: list[MCQExample]
    dev: list[MCQExample]
    test: list[MCQExample] = field(default_factory=list)
    provenance: Provenance = Provenance.OFFICIAL

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.dev), len(self.test)

    def __getitem__(self, name: str) -> list[MCQExample]:
        if name not in ("train", "dev", "test"):
            raise KeyError(name)
        return getattr(self, name)


# ---------------------------------------------------------------------------
# Source schemas
# ---------------------------------------------------------------------------

def _label_to_index(label, labels: Sequence[str], where: str) -> int:
    label = str(label).strip()
    if label in labels:
        return list(labels).index(label)
    raise LabelError(f"{where}: unknown answer label {label!r} (choices labelled {list(labels)})")


def _parse_stem_record(record: dict, where: str) -> tuple[str, str, list[str], int | None]:
    # CSQA / OBQA / ARC / QASC share the {"question": {"stem", "choices"}, "answerKey"} layout.
    q = record["question"]
    choices = q["choices"]
    labels = [str(c["label"]).strip() for c in choices]
    texts = [c["text"] for c in choices]
    answer = record.get("answerKey")
    index = None if answer in (None, "") else _label_to_index(answer, labels, where)
    return str(record["id"]), q["stem"], texts, index


def _parse_piqa(record: dict, label, where: str):
    texts = [record["sol1"], record["sol2"]]
    index = None if label is None else _label_to_index(label, ["0", "1"], where)
    return str(record.get("id", "")), record["goal"], texts, index


def _parse_siqa(record: dict, label, where: str):
    texts = [record["answerA"], record["answerB"], record["answerC"]]
    question = f"{record['context']} {record['question']}".strip()
    index = None if label is None else _label_to_index(label, ["1", "2", "3"], where)
    return str(record.get("id", "")), question, texts, index


def _labels_file(path: Path) -> Path | None:
    candidates = [
        path.with_name(f"{path.stem}-labels.lst"),
        path.with_name(f"{path.stem}_labels.lst"),
        path.with_name(f"{path.stem}-labels.txt"),
    ]
    return next((c for c in candidates if c.exists()), None)


def _read_lines(path: Path) -> list[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        return [(i, line) for i, line in enumerate(fh, start=1) if line.strip()]


def load_dataset(path: "str | os.PathLike", tag: "str | DatasetTag",
                 strict: bool | None = None) -> list[MCQExample]:
    """Load one published split file into a list of examples.

    Records whose choice count differs from the dataset's declared count raise
    :class:`SchemaError` when ``strict``; otherwise they are dropped with a
    warning. ``strict`` defaults to True except for the ARC sets, whose
    published files contain a handful of 3- and 5-choice questions.

    A file already in the unified format is recognised and loaded as-is.
    """
    path = Path(path)
    tag = DatasetTag.parse(tag)
    if not path.exists():
        raise FileNotFoundError(path)
    if strict is None:
        strict = tag not in _SKIP_MISMATCHED
    expected_n = DATASET_STATS[tag][3] if tag in DATASET_STATS else None

    lines = _read_lines(path)
    labels: list[str] | None = None
    if tag in (DatasetTag.PIQA, DatasetTag.SOCIALIQA):
        label_path = _labels_file(path)
        if label_path is not None:
            labels = [ln.strip() for _, ln in _read_lines(label_path)]
            if len(labels) != len(lines):
                raise SchemaError(
                    f"{label_path}: {len(labels)} labels for {len(lines)} records in {path}")

    examples = []
    skipped = 0
    for k, (lineno, line) in enumerate(lines):
        where = f"{path}:{lineno}"
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{where}: malformed record ({exc.msg})") from exc
        try:
            if "choices" in record and "dataset_tag" in record:
                ex = MCQExample.from_record(record)
                qid, question, texts, index = ex.id, ex.question, list(ex.choices), ex.answer_index
            elif tag is DatasetTag.PIQA:
                label = labels[k] if labels is not None else record.get("label")
                qid, question, texts, index = _parse_piqa(record, label, where)
            elif tag is DatasetTag.SOCIALIQA:
                label = labels[k] if labels is not None else record.get("label")
                qid, question, texts, index = _parse_siqa(record, label, where)
            else:
                qid, question, texts, index = _parse_stem_record(record, where)
        except KeyError as exc:
            raise ParseError(f"{where}: missing field {exc}") from exc
        if not qid:
            qid = f"{tag.value}-{path.stem}-{lineno}"

        if expected_n is not None and len(texts) != expected_n:
            if strict:
                raise SchemaError(f"{where}: expected {expected_n} choices, got {len(texts)}")
            skipped += 1
            continue
        examples.append(MCQExample(qid, question, tuple(texts), index, tag))

    if skipped:
        logger.warning("%s: dropped %d records with a choice count other than %s",
                       path, skipped, expected_n)
    return examples


def save_unified(examples: Iterable[MCQExample], path: "str | os.PathLike") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def load_unified(path: "str | os.PathLike") -> list[MCQExample]:
    out = []
    for lineno, line in _read_lines(Path(path)):
        try:
            out.append(MCQExample.from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed unified record ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def split_in_house_dev(train: Sequence[MCQExample], dev_size: int, seed: int) -> DatasetSplits:
    """Randomly hold ``dev_size`` examples out of ``train``.

    Both parts keep the input's relative order. The caller attaches ``test``.
    """
    if not 0 < dev_size < len(train):
        raise ValueError(f"dev_size must be in (0, {len(train)}), got {dev_size}")
    rng = np.random.default_rng(seed)
    held = np.zeros(len(train), dtype=bool)
    held[rng.permutation(len(train))[:dev_size]] = True
    return DatasetSplits(
        train=[ex for ex, h in zip(train, held) if not h],
        dev=[ex for ex, h in zip(train, held) if h],
        provenance=Provenance.IN_HOUSE_DEV,
    )


# Official file names per dataset; the first existing candidate wins.
_SPLIT_FILES: dict[DatasetTag, dict[str, list[str]]] = {
    DatasetTag.CSQA: {"train": ["train_rand_split.jsonl", "train.jsonl"],
                      "dev": ["dev_rand_split.jsonl", "dev.jsonl"]},
    DatasetTag.OBQA: {"train": ["train.jsonl"], "dev": ["dev.jsonl"], "test": ["test.jsonl"]},
    DatasetTag.ARC_E: {"train": ["ARC-Easy-Train.jsonl", "train.jsonl"],
                       "dev": ["ARC-Easy-Dev.jsonl", "dev.jsonl"],
                       "test": ["ARC-Easy-Test.jsonl", "test.jsonl"]},
    DatasetTag.ARC_C: {"train": ["ARC-Challenge-Train.jsonl", "train.jsonl"],
                       "dev": ["ARC-Challenge-Dev.jsonl", "dev.jsonl"],
                       "test": ["ARC-Challenge-Test.jsonl", "test.jsonl"]},
    DatasetTag.QASC: {"train": ["train.jsonl"], "dev": ["dev.jsonl"]},
    DatasetTag.PIQA: {"train": ["train.jsonl"], "dev": ["valid.jsonl", "dev.jsonl"]},
    DatasetTag.SOCIALIQA: {"train": ["train.jsonl"], "dev": ["dev.jsonl"]},
}

_DIR_ALIASES: dict[DatasetTag, list[str]] = {
    DatasetTag.CSQA: ["CSQA", "csqa", "commonsenseqa"],
    DatasetTag.OBQA: ["OBQA", "obqa", "openbookqa", "OpenBookQA-V1-Sep2018/Data/Main", "Main"],
    DatasetTag.ARC_E: ["ARC-E", "arc-e", "ARC-Easy", "ARC-V1-Feb2018-2/ARC-Easy"],
    DatasetTag.ARC_C: ["ARC-C", "arc-c", "ARC-Challenge", "ARC-V1-Feb2018-2/ARC-Challenge"],
    DatasetTag.QASC: ["QASC", "qasc", "QASC_Dataset"],
    DatasetTag.PIQA: ["PIQA", "piqa", "physicaliqa-train-dev"],
    DatasetTag.SOCIALIQA: ["SocialIQA", "socialiqa", "siqa", "socialiqa-train-dev"],
}


def find_split_file(data_dir: "str | os.PathLike", tag: "str | DatasetTag", split: str) -> Path | None:
    tag = DatasetTag.parse(tag)
    data_dir = Path(data_dir)
    roots = [data_dir / alias for alias in _DIR_ALIASES.get(tag, [])] + [data_dir]
    for root in roots:
        for name in _SPLIT_FILES[tag].get(split, []):
            if (root / name).exists():
                return root / name
    return None


def prepare_splits(tag: "str | DatasetTag", data_dir: "str | os.PathLike",
                   seed: int = 1) -> DatasetSplits:
    """Build train/dev/test for one benchmark from its official files."""
    tag = DatasetTag.parse(tag)
    if tag is DatasetTag.SYNTHETIC:
        raise ValueError("use make_synthetic_dataset for SYNTHETIC")
    paths = {s: find_split_file(data_dir, tag, s) for s in ("train", "dev", "test")}
    if paths["train"] is None or paths["dev"] is None:
        raise FileNotFoundError(f"official {tag.value} train/dev files not found under {data_dir}")

    train = load_dataset(paths["train"], tag)
    dev = load_dataset(paths["dev"], tag)
    if tag in IN_HOUSE_DEV:
        splits = split_in_house_dev(train, DATASET_STATS[tag][1], seed)
        splits.test = dev
        return splits
    if paths["test"] is None:
        raise FileNotFoundError(f"official {tag.value} test file not found under {data_dir}")
    return DatasetSplits(train, dev, load_dataset(paths["test"], tag), Provenance.OFFICIAL)


def save_splits(splits: DatasetSplits, out_dir: "str | os.PathLike") -> dict[str, Path]:
    out_dir = Path(out_dir)
    written = {}
    for name in ("train", "dev", "test"):
        written[name] = out_dir / f"{name}.jsonl"
        save_unified(splits[name], written[name])
    (out_dir / "provenance.txt").write_text(splits.provenance.value + "\n")
    return written


def load_splits(out_dir: "str | os.PathLike") -> DatasetSplits:
    out_dir = Path(out_dir)
    prov_file = out_dir / "provenance.txt"
    provenance = Provenance(prov_file.read_text().strip()) if prov_file.exists() else Provenance.OFFICIAL
    parts = {}
    for name in ("train", "dev", "test"):
        p = out_dir / f"{name}.jsonl"
        parts[name] = load_unified(p) if p.exists() else []
    return DatasetSplits(provenance=provenance, **parts)


# ---------------------------------------------------------------------------
# Synthetic fixture
# ---------------------------------------------------------------------------

def make_synthetic_dataset(n_examples: int, n_choices: int, vocab_size: int,
                           seed: int) -> DatasetSplits:
    """Generate a task that is solvable by token overlap.

    Every choice carries the same shared tokens plus one choice-specific
    token; only the gold choice's specific token also appears in the
    question. Split 80/10/10.
    """
    if n_choices < 2:
        raise ValueError("n_choices must be >= 2")
    if vocab_size < 2 * n_choices:
        raise ValueError("vocab_size must be >= 2 * n_choices")
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")

    rng = np.random.default_rng(seed)
    words = [f"w{k}" for k in range(vocab_size)]
    n_common = 2 if vocab_size >= 2 * n_choices + 4 else 1
    common = words[:n_common]
    pool = np.arange(n_common, vocab_size)
    n_filler = 3

    examples = []
    for k in range(n_examples):
        picked = rng.choice(pool, size=n_choices, replace=False)
        rest = np.setdiff1d(pool, picked)
        filler = rng.choice(rest, size=min(n_filler, len(rest)), replace=False)
        gold = int(rng.integers(n_choices))
        q_tokens = [words[i] for i in filler] + [words[picked[gold]]]
        q_tokens = [q_tokens[i] for i in rng.permutation(len(q_tokens))]
        choices = []
        for i in picked:
            c_tokens = common + [words[i]]
            choices.append(" ".join(c_tokens[j] for j in rng.permutation(len(c_tokens))))
        examples.append(MCQExample(f"syn-{seed}-{k}", " ".join(q_tokens), tuple(choices),
                                   gold, DatasetTag.SYNTHETIC))

    n_train = int(round(0.8 * n_examples))
    n_dev = int(round(0.1 * n_examples))
    return DatasetSplits(
        train=examples[:n_train],
        dev=examples[n_train:n_train + n_dev],
        test=examples[n_train + n_dev:],
        provenance=Provenance.OFFICIAL,
    )
