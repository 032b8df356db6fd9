"""Acceptance gate. Run with ``pytest tests/test_acceptance.py -v``; a
PASS/FAIL/SKIP line per criterion is printed at the end of the session."""

import math
import os
import time

import numpy as np
import pytest
import torch

from conftest import random_example, tiny_model
from dcqa import DCQAClassifier, oracles
from dcqa.analysis import VARIANT_FLAGS, export_heatmap, load_heatmap, stage_triplet, token_weights
from dcqa.attention import (
    choice_attention_commonality,
    cross_attention,
    layer_normalize,
    max_pool_tokens,
    refine,
    CrossAttnOutput,
)
from dcqa.data import DATASET_STATS, DatasetTag, MCQExample, find_split_file, make_synthetic_dataset, prepare_splits
from dcqa.model import Ablation

P1 = "vectorized algebra matches loop oracles within 1e-10 on 100 random instances"
P2 = "finite-difference gradients of the training loss agree within 1e-3 on 20 instances"
P3 = "forward returns a distribution and is choice-permutation equivariant on 50 examples"
P4 = "all eight ablation variants run; -C1 == -ComE and -C3 == -CE as flag sets"
P5 = "synthetic task: >= 90% train and >= 70% held-out accuracy within 200 epochs, deterministic"
P6 = "official files load with the published split sizes"
P7 = "token weights in [0, 100] with 0/100 endpoints; JSON round-trip; 3 grids per triplet"


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def prefix_mask(rng, rows, length):
    return np.arange(length)[None, :] < rng.integers(1, length + 1, size=(rows, 1))


@pytest.mark.criterion("P1", P1)
def test_p1_algebra_oracles():
    rng = np.random.default_rng(2024)
    start = time.time()
    worst = 0.0
    for _ in range(100):
        n, l, m, d = (int(rng.integers(2, 6)), int(rng.integers(1, 9)),
                      int(rng.integers(1, 9)), int(rng.integers(2, 9)))
        A, W = rng.standard_normal((n, m, d)), rng.standard_normal((d, d))
        am = prefix_mask(rng, n, m)
        got = choice_attention_commonality(t64(A), t64(W), torch.as_tensor(am)).numpy()
        worst = max(worst, np.abs(got - oracles.commonality(list(A), W, list(am))).max())

        T, Cx, W_I = rng.standard_normal((l, d)), rng.standard_normal((m, d)), rng.standard_normal((2 * d, d))
        g, b = rng.standard_normal(d), rng.standard_normal(d)
        tm, cm = prefix_mask(rng, 1, l)[0], prefix_mask(rng, 1, m)[0]
        out = cross_attention(t64(T), t64(Cx), t64(W_I), torch.as_tensor(tm), torch.as_tensor(cm), t64(g), t64(b))
        enh, pooled = oracles.cross_attention(T, Cx, W_I, tm, cm, g, b)
        worst = max(worst, np.abs(out.enhanced.numpy() - enh).max(), np.abs(out.pooled.numpy() - pooled).max())

        Y, y = rng.standard_normal((l, d)), rng.standard_normal(d)
        ref = refine(out, CrossAttnOutput(t64(Y), t64(y)))
        mat, vec = oracles.refine(out.enhanced.numpy(), out.pooled.numpy(), Y, y)
        worst = max(worst, np.abs(ref.matrix.numpy() - mat).max(), np.abs(ref.pooled.numpy() - vec).max())

        worst = max(worst, np.abs(max_pool_tokens(t64(T), torch.as_tensor(tm)).numpy()
                                  - oracles.max_pool(T, tm)).max())
        worst = max(worst, np.abs(layer_normalize(t64(T), t64(g), t64(b)).numpy()
                                  - oracles.layer_normalize(T, g, b)).max())

        Q = rng.standard_normal((l, d))
        row = token_weights(t64(Q), t64(A), torch.as_tensor(tm), torch.as_tensor(am))
        want, degenerate = oracles.token_weights(Q, A, tm, am)
        assert row.degenerate == degenerate
        worst = max(worst, np.abs(row.percentages - want).max())
    elapsed = time.time() - start
    print(f"P1 max abs error {worst:.2e} in {elapsed:.1f}s")
    assert worst <= 1e-10
    assert elapsed < 60


def _directional_check(loss_fn, params, rng):
    grads = torch.autograd.grad(loss_fn(), params)
    worst = 0.0
    h = 1e-5
    for p, g in zip(params, grads):
        direction = torch.as_tensor(rng.standard_normal(tuple(p.shape)), dtype=p.dtype)
        with torch.no_grad():
            p += h * direction
            up = loss_fn().item()
            p -= 2 * h * direction
            down = loss_fn().item()
            p += h * direction
        fd = (up - down) / (2 * h)
        an = (g * direction).sum().item()
        # the floor only matters for gradients that are zero by symmetry (the
        # outer MLP bias shifts every logit equally), where fd is rounding noise
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


@pytest.mark.criterion("P2", P2)
def test_p2_gradients():
    rng = np.random.default_rng(7)
    start = time.time()
    worst = 0.0
    for k in range(20):
        n = int(rng.integers(2, 6))
        model = tiny_model(n_choices=n, d=int(rng.integers(4, 9)), clue_len=2, seed=k)
        batch = [random_example(rng, n, j) for j in range(2)]
        labels = torch.tensor([ex.answer_index for ex in batch])

        def loss():
            return torch.nn.functional.cross_entropy(model(batch).logits, labels)

        params = [model.choice_attn.W, model.head.inner.weight, model.head.inner.bias,
                  model.head.outer.weight, model.head.outer.bias]
        for site in (model.c1, model.c2, model.c3):
            params += [site.W_I, site.gain, site.bias]
        worst = max(worst, _directional_check(loss, params, rng))
    elapsed = time.time() - start
    print(f"P2 worst relative error {worst:.2e} in {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 300


@pytest.mark.criterion("P3", P3)
def test_p3_simplex_and_permutation():
    rng = np.random.default_rng(11)
    start = time.time()
    worst_sum = worst_perm = 0.0
    models = {n: tiny_model(n_choices=n, d=8, dtype=torch.float32, seed=n).eval() for n in range(2, 6)}
    for k in range(50):
        n = int(rng.integers(2, 6))
        ex = random_example(rng, n, k)
        perm = rng.permutation(n)
        permuted = MCQExample(ex.id, ex.question, tuple(ex.choices[i] for i in perm), None, ex.dataset_tag)
        with torch.no_grad():
            p = models[n](ex).probs[0]
            pp = models[n](permuted).probs[0]
        assert torch.all(p >= 0)
        worst_sum = max(worst_sum, abs(p.sum().item() - 1), abs(pp.sum().item() - 1))
        worst_perm = max(worst_perm, (pp - p[perm]).abs().max().item())
    elapsed = time.time() - start
    print(f"P3 sum error {worst_sum:.1e}, permutation error {worst_perm:.1e}")
    assert worst_sum <= 1e-6 and worst_perm <= 1e-5 and elapsed < 60


@pytest.mark.criterion("P4", P4)
def test_p4_ablation_structure():
    assert len(VARIANT_FLAGS) == 8
    assert VARIANT_FLAGS["-C1"] == VARIANT_FLAGS["-ComE"] == {Ablation.NO_COME, Ablation.NO_C1}
    assert VARIANT_FLAGS["-C3"] == VARIANT_FLAGS["-CE"] == {Ablation.NO_CE}
    ex = random_example(np.random.default_rng(0), 4)
    for name, flags in VARIANT_FLAGS.items():
        probs = tiny_model(n_choices=4, ablation=flags)(ex).probs
        assert probs.shape == (1, 4) and torch.all(probs >= 0), name
        assert abs(probs.sum().item() - 1) <= 1e-6, name


def _p5_fit(splits):
    return DCQAClassifier(hidden_dim=16, clue_len=4, learning_rate=5e-4, batch_size=16,
                          max_epochs=200, early_stop_patience=50, random_state=1).fit(splits.train,
                                                                                     X_dev=splits.dev)


@pytest.mark.criterion("P5", P5)
def test_p5_synthetic_learnability():
    splits = make_synthetic_dataset(200, 5, 64, seed=1)
    start = time.time()
    clf = _p5_fit(splits)
    train_acc, test_acc = clf.score(splits.train), clf.score(splits.test)
    again = _p5_fit(splits)
    elapsed = time.time() - start
    print(f"P5 train {train_acc:.2f}, held-out {test_acc:.2f}, dev {clf.best_dev_accuracy_:.2f}, "
          f"{clf.epochs_run_} epochs, {elapsed:.0f}s for two runs")
    assert clf.epochs_run_ <= 200
    assert train_acc >= 0.9 and test_acc >= 0.7
    assert [vars(h) for h in again.history_] == [vars(h) for h in clf.history_]
    assert np.array_equal(again.predict_proba(splits.test), clf.predict_proba(splits.test))
    assert elapsed < 600


OFFICIAL = [t for t in DatasetTag if t is not DatasetTag.SYNTHETIC]


@pytest.mark.criterion("P6", P6)
@pytest.mark.parametrize("tag", OFFICIAL, ids=[t.value for t in OFFICIAL])
def test_p6_data_fidelity(tag):
    root = os.environ.get("DCQA_DATA_DIR")
    if not root or find_split_file(root, tag, "train") is None:
        pytest.skip(f"official {tag.value} files not available (set DCQA_DATA_DIR)")
    splits = prepare_splits(tag, root)
    n_train, n_dev, n_test, n_choices = DATASET_STATS[tag]
    assert splits.sizes() == (n_train, n_dev, n_test)
    assert all(ex.n_choices == n_choices for ex in splits.train + splits.dev + splits.test)


@pytest.mark.criterion("P7", P7)
def test_p7_visualization(tmp_path):
    rng = np.random.default_rng(3)
    for _ in range(50):
        n, l, m, d = (int(rng.integers(2, 6)), int(rng.integers(1, 9)),
                      int(rng.integers(1, 9)), int(rng.integers(2, 9)))
        row = token_weights(t64(rng.standard_normal((l, d))), t64(rng.standard_normal((n, m, d))))
        assert row.percentages.min() >= 0 and row.percentages.max() <= 100
        for r, deg in zip(row.percentages, row.degenerate):
            assert deg or (r.min() == 0 and r.max() == 100)
    model = tiny_model(n_choices=3)
    for k in range(3):
        heat = stage_triplet(model, random_example(rng, 3, k))
        assert len(heat.matrices) == 3 and len(heat.stages) == 3
        path = export_heatmap(heat, tmp_path / f"h{k}.json")
        again = load_heatmap(path)
        assert again.to_json() == heat.to_json()


def test_p8_full_scale_is_out_of_scope():
    pytest.skip("P8 needs a Base-size pretrained backbone and GPU hours; optional, not run here")
