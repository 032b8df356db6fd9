import pytest
import torch

from dcqa.backend import BackendConfig, ReferenceBackend, WordTokenizer
from dcqa.data import DatasetTag, MCQExample
from dcqa.model import DCQAConfig, DCQAModel


def tiny_model(n_choices=3, d=8, clue_len=2, ablation=(), seed=0, dtype=torch.float64,
               attn_init_scale=1.0, vocab_size=64, share=True):
    backend = ReferenceBackend(BackendConfig(hidden_dim=d, max_seq_len=32, clue_len=clue_len,
                                             vocab_size=vocab_size), seed=seed,
                               tokenizer=WordTokenizer(vocab_size))
    cfg = DCQAConfig(n_choices=n_choices, d=d, clue_len=clue_len, ablation=ablation,
                     share_choice_weights=share)
    return DCQAModel(cfg, backend, seed=seed, attn_init_scale=attn_init_scale).to(dtype)


def random_example(rng, n_choices=3, idx=0):
    words = ["red", "blue", "cat", "dog", "runs", "sleeps", "under", "the", "table", "river",
             "stone", "bright", "quiet", "seven", "apple"]

    def phrase(lo, hi):
        return " ".join(rng.choice(words, size=int(rng.integers(lo, hi + 1))))

    return MCQExample(f"ex-{idx}", phrase(2, 6), tuple(phrase(1, 4) for _ in range(n_choices)),
                      int(rng.integers(n_choices)), DatasetTag.SYNTHETIC)


@pytest.fixture
def model_factory():
    return tiny_model


# -- acceptance summary -------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name, text): acceptance criterion a test checks")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or report.outcome != "passed"):
        name, text = marker.args
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        previous = _CRITERIA.get(name, (None, text))[0]
        if previous not in ("FAIL",):
            _CRITERIA[name] = (status, text)
    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, text = _CRITERIA[name]
        terminalreporter.write_line(f"{name} {status}: {text}")
